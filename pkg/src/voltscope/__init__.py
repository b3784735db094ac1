"""Side-channel workbench for island-based random dynamic voltage scaling."""

from .aes import LeakageModel, build_hypothesis, model_power, sbox
from .align import ElasticAligner, WarpPath, align_set, dtw, elastic_align
from .cluster import ClusterCPA, TraceKMeans, cluster_attack, fuse_rankings, ideal_k, kmeans, sweep_k
from .cpa import CPA, AttackResult, MtdReport, avg_pge, compute_mtd, cpa_attack, cpa_attack_all
from .metrics import (
    MisalignmentParams,
    SnrParams,
    TvlaReport,
    covariance_decomposition_check,
    make_tvla_batches,
    predict_misaligned_rho,
    snr_analytic,
    snr_empirical,
    snr_general,
    tvla_fixed_vs_random,
    welch_t,
)
from .synth import (
    PulseModel,
    ROIExtractor,
    SynthPlan,
    VoltagePolicy,
    compose_irdvs,
    corrupt_unstable_clock,
    extract_roi,
    synthesize,
)
from .traces import (
    IslandConfig,
    Trace,
    TraceFormatError,
    TraceSet,
    import_csv,
    read_trace_file,
    write_trace_file,
)

__version__ = "0.1.0"
