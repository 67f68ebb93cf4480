"""Input checks and the flat feature layout used by the estimator wrappers.

A flat row is ``[values (m+n), alphas (m), adjacency (m*n, row-major)]``.
"""
from __future__ import annotations

import numpy as np

from .model import AuctionSamples, AuctionSetting


def n_features(setting: AuctionSetting) -> int:
    return setting.n_agents + setting.m + setting.m * setting.n


def check_array_2d(X, name="X", dtype=np.float64) -> np.ndarray:
    X = np.asarray(X, dtype=dtype)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or infinite entries")
    return X


def check_bids(bids, setting: AuctionSetting, value_max: float | None = None) -> np.ndarray:
    """``(L, m+n)`` non-negative finite bids, optionally bounded by ``value_max``."""
    b = check_array_2d(bids, "bids")
    if b.shape[1] != setting.n_agents:
        raise ValueError(f"bids need {setting.n_agents} columns (stores then brands), got {b.shape[1]}")
    if (b < 0).any():
        raise ValueError("bids must be non-negative")
    if value_max is not None and (b > value_max).any():
        raise ValueError(f"bids exceed the value domain [0, {value_max}]")
    return b


def to_features(samples: AuctionSamples) -> np.ndarray:
    L = len(samples)
    return np.hstack([samples.values, samples.alphas, samples.adjacency.reshape(L, -1).astype(np.float64)])


def check_samples(X, setting: AuctionSetting, value_max: float = 1.0) -> AuctionSamples:
    """Accept :class:`AuctionSamples` or a flat feature matrix and return samples."""
    if isinstance(X, AuctionSamples):
        if X.setting != setting:
            raise ValueError("samples belong to a different auction setting")
        return X
    X = check_array_2d(X)
    want = n_features(setting)
    if X.shape[1] != want:
        raise ValueError(f"expected {want} feature columns for this setting, got {X.shape[1]}")
    N, m = setting.n_agents, setting.m
    values, alphas, adj = X[:, :N], X[:, N:N + m], X[:, N + m:]
    if (values < 0).any():
        raise ValueError("values must be non-negative")
    if (alphas <= 0).any():
        raise ValueError("quality factors must be positive")
    if not np.isin(adj, (0.0, 1.0)).all():
        raise ValueError("adjacency columns must be 0 or 1")
    return AuctionSamples(setting, values, alphas, adj.reshape(len(X), m, setting.n).astype(np.int8), value_max)
