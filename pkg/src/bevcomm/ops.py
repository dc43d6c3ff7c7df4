"""Small shared numeric helpers used across the pipeline modules."""

from __future__ import annotations

import numpy as np

# Logit magnitude beyond which sigmoid saturates well past float precision.
_SIGMOID_CLIP = 60.0


def sigmoid(x):
    """Numerically safe elementwise logistic function."""
    z = np.clip(np.asarray(x, dtype=np.float64), -_SIGMOID_CLIP, _SIGMOID_CLIP)
    return 1.0 / (1.0 + np.exp(-z))


def conv3x3(data: np.ndarray, weights: np.ndarray, bias: float = 0.0) -> np.ndarray:
    """Single-output 3x3 convolution over a (H, W, C) array with zero padding.

    ``weights`` has shape (3, 3, C); the result is a (H, W) float64 map.
    Implemented as nine shifted accumulations, which keeps the result
    bit-stable across thread counts.
    """
    h, w, c = data.shape
    if weights.shape != (3, 3, c):
        raise ValueError(f"conv weights must be (3, 3, {c}), got {weights.shape}")
    padded = np.zeros((h + 2, w + 2, c), dtype=np.float64)
    padded[1:-1, 1:-1] = data
    out = np.full((h, w), float(bias), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            tap = weights[dy, dx]
            if not tap.any():
                continue
            out += padded[dy:dy + h, dx:dx + w] @ tap
    return out


def stream(*key: int) -> np.random.Generator:
    """Deterministic, order-independent RNG stream for an entity key.

    Each distinct integer key tuple yields an independent generator, so
    parallel evaluation order cannot change any draw.
    """
    entropy = [int(k) & 0xFFFFFFFF for k in key]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def time_key(t_ms: int) -> int:
    """Map a (possibly negative) millisecond timestamp to a stream key."""
    return int(t_ms) + (1 << 31)
