"""Input validation helpers shared by the estimators and functional API."""

from __future__ import annotations

import binascii

import numpy as np


def check_traces(X, *, min_traces: int = 1, name: str = "traces") -> np.ndarray:
    """Return ``X`` as a 2-D float64 array of uniform-length, finite traces."""
    if isinstance(X, (list, tuple)) and X and np.ndim(X[0]) == 1:
        lengths = {len(x) for x in X}
        if len(lengths) > 1:
            raise ValueError(f"{name} have ragged lengths {sorted(lengths)[:4]}")
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n_traces, n_samples), got ndim={arr.ndim}")
    if arr.shape[1] == 0:
        raise ValueError(f"{name} have zero samples")
    if arr.shape[0] < min_traces:
        raise ValueError(f"need at least {min_traces} {name}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contain NaN or infinite samples")
    return arr


def check_samples(x, *, name: str = "samples") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contain NaN or infinite values")
    return arr


def check_block(b, *, name: str = "block") -> bytes:
    """Coerce a 16-byte AES block given as bytes, hex string or int sequence."""
    if isinstance(b, str):
        b = parse_hex_block(b, name=name)
    elif isinstance(b, np.ndarray):
        b = bytes(b.astype(np.uint8).tolist())
    elif not isinstance(b, (bytes, bytearray)):
        b = bytes(b)
    if len(b) != 16:
        raise ValueError(f"{name} must be 16 bytes, got {len(b)}")
    return bytes(b)


def check_plaintexts(P, n_traces: int | None = None) -> np.ndarray:
    """Return plaintexts as an (n, 16) uint8 array."""
    if isinstance(P, (list, tuple)) and P and isinstance(P[0], (bytes, bytearray, str)):
        P = [check_block(p, name="plaintext") for p in P]
        arr = np.frombuffer(b"".join(P), dtype=np.uint8).reshape(-1, 16)
    else:
        arr = np.asarray(P)
        if arr.ndim != 2 or arr.shape[1] != 16:
            raise ValueError(f"plaintexts must have shape (n, 16), got {arr.shape}")
        if arr.dtype != np.uint8:
            if np.any((arr < 0) | (arr > 255)):
                raise ValueError("plaintext bytes out of range")
            arr = arr.astype(np.uint8)
    if arr.shape[0] == 0:
        raise ValueError("empty plaintext list")
    if n_traces is not None and arr.shape[0] != n_traces:
        raise ValueError(f"{arr.shape[0]} plaintexts for {n_traces} traces")
    return arr


def parse_hex_block(text: str, *, name: str = "block") -> bytes:
    text = text.strip()
    if text.lower().startswith("0x"):
        text = text[2:]
    if len(text) != 32:
        raise ValueError(f"{name} must be 32 hex characters, got {len(text)}")
    try:
        return binascii.unhexlify(text)
    except binascii.Error as exc:
        raise ValueError(f"{name} is not valid hex: {text!r}") from exc


def check_byte_index(byte_index: int) -> int:
    if not 0 <= int(byte_index) < 16:
        raise ValueError(f"byte_index must be in [0, 16), got {byte_index}")
    return int(byte_index)


def check_positive_int(value, name: str) -> int:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
