"""Domain objects for hybrid sponsored-search auctions.

A slot is shown either to a single store (click rate ``alpha_i * theta_k``) or
to a store+brand bundle (click rate ``theta_k``). Agents are indexed stores
first, then brands, everywhere in the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AuctionSetting:
    """Static scenario: ``m`` stores, ``n`` brands, ``K`` slots, bundle cap ``C``."""

    m: int
    n: int
    K: int
    C: int
    theta: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        if self.m < 1 or self.n < 0 or self.K < 0:
            raise ValueError(f"invalid counts m={self.m} n={self.n} K={self.K}")
        if len(self.theta) != self.K:
            raise ValueError(f"expected {self.K} slot CTRs, got {len(self.theta)}")
        th = np.asarray(self.theta)
        if self.K and not (th[0] < 1 and th[-1] > 0 and np.all(np.diff(th) <= 0)):
            raise ValueError("slot CTRs must satisfy 1 > theta_1 >= ... >= theta_K > 0")
        if not 0 <= self.C <= self.K:
            raise ValueError(f"bundle cap C={self.C} must lie in [0, K={self.K}]")

    @property
    def n_agents(self) -> int:
        return self.m + self.n

    @property
    def max_bundles(self) -> int:
        """Size of the fixed bundle grid, ``m * n``."""
        return self.m * self.n

    @property
    def theta_array(self) -> np.ndarray:
        return np.asarray(self.theta, dtype=np.float64)

    def with_cap(self, C: int) -> "AuctionSetting":
        return AuctionSetting(self.m, self.n, self.K, C, self.theta)

    def to_dict(self) -> dict:
        return {"m": self.m, "n": self.n, "K": self.K, "C": self.C, "theta": list(self.theta)}


def enumerate_bundles(adjacency) -> list[tuple[int, int]]:
    """Row-major list of ``(store, brand)`` pairs whose adjacency entry is 1.

    Indices are 0-based.
    """
    adj = np.asarray(adjacency)
    if adj.ndim != 2:
        raise ValueError("adjacency must be a 2-d matrix")
    if not np.isin(adj, (0, 1)).all():
        raise ValueError("adjacency entries must be 0 or 1")
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(adj))]


@dataclass(frozen=True)
class AuctionInstance:
    """Per-sample randomness: store quality factors and the store-brand relation."""

    alphas: np.ndarray
    adjacency: np.ndarray
    bundles: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        adj = np.asarray(self.adjacency, dtype=np.int8)
        if alphas.ndim != 1 or adj.ndim != 2 or adj.shape[0] != alphas.shape[0]:
            raise ValueError("alphas must have length m and adjacency shape (m, n)")
        if np.any(alphas <= 0):
            raise ValueError("quality factors must be strictly positive")
        alphas.setflags(write=False)
        adj.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "bundles", enumerate_bundles(adj))

    @property
    def R(self) -> int:
        return len(self.bundles)

    def check(self, setting: AuctionSetting) -> None:
        if self.adjacency.shape != (setting.m, setting.n):
            raise ValueError(
                f"instance has shape {self.adjacency.shape}, setting expects {(setting.m, setting.n)}"
            )


@dataclass(frozen=True)
class BidProfile:
    """Per-click bids (or values) of the ``m`` stores and ``n`` brands."""

    store_bids: np.ndarray
    brand_bids: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.store_bids, dtype=np.float64).reshape(-1)
        b = np.asarray(self.brand_bids, dtype=np.float64).reshape(-1)
        if np.any(s < 0) or np.any(b < 0):
            raise ValueError("bids must be non-negative")
        object.__setattr__(self, "store_bids", s)
        object.__setattr__(self, "brand_bids", b)

    @classmethod
    def from_vector(cls, vec, m: int) -> "BidProfile":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:m], vec[m:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.store_bids, self.brand_bids])

    def replace(self, agent: int, bid: float) -> "BidProfile":
        vec = self.as_vector()
        vec[agent] = bid
        return BidProfile.from_vector(vec, len(self.store_bids))


# Values share the bid layout.
ValueProfile = BidProfile


@dataclass(frozen=True)
class ExpectedBids:
    q_store: np.ndarray
    q_brand: np.ndarray
    q_store_solo: np.ndarray


def expected_bids(setting: AuctionSetting, instance: AuctionInstance, bids: BidProfile) -> ExpectedBids:
    """Per-slot expected bids: ``theta_k * b`` and, for solo stores, ``theta_k * b * alpha``."""
    instance.check(setting)
    if bids.store_bids.shape != (setting.m,) or bids.brand_bids.shape != (setting.n,):
        raise ValueError("bid profile does not match the setting's agent counts")
    theta = setting.theta_array
    q_store = np.outer(bids.store_bids, theta)
    q_brand = np.outer(bids.brand_bids, theta)
    q_solo = q_store * instance.alphas[:, None]
    return ExpectedBids(q_store, q_brand, q_solo)


def utility(value, g, payment):
    """Quasi-linear utility ``value * g - payment``; works elementwise on arrays."""
    return value * g - payment


@dataclass(frozen=True)
class MechanismOutcome:
    """Allocation ``(m+n) x K`` (stores then brands) and payments ``(m+n,)``.

    Both arrays may carry a leading batch axis.
    """

    allocation: np.ndarray
    payments: np.ndarray

    def expected_ctr(self, theta) -> np.ndarray:
        return self.allocation @ np.asarray(theta, dtype=np.float64)

    @property
    def revenue(self):
        return self.payments.sum(axis=-1)

    def __getitem__(self, idx) -> "MechanismOutcome":
        return MechanismOutcome(self.allocation[idx], self.payments[idx])

    def __len__(self) -> int:
        return len(self.payments)


@dataclass
class AuctionSamples:
    """A batch of ``L`` auctions sharing one setting.

    ``values`` holds per-click values (stores then brands), ``alphas`` the
    store quality factors and ``adjacency`` the store-brand relation of each
    sample. ``value_max`` is the upper end of every agent's value domain.
    """

    setting: AuctionSetting
    values: np.ndarray
    alphas: np.ndarray
    adjacency: np.ndarray
    value_max: float = 1.0
    ctr_overrides: np.ndarray | None = None

    def __post_init__(self):
        s = self.setting
        self.values = np.asarray(self.values, dtype=np.float64)
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.int8)
        L = self.values.shape[0] if self.values.ndim == 2 else -1
        if self.values.shape != (L, s.n_agents):
            raise ValueError(f"values must have shape (L, {s.n_agents}), got {self.values.shape}")
        if self.alphas.shape != (L, s.m):
            raise ValueError(f"alphas must have shape ({L}, {s.m}), got {self.alphas.shape}")
        if self.adjacency.shape != (L, s.m, s.n):
            raise ValueError(f"adjacency must have shape ({L}, {s.m}, {s.n}), got {self.adjacency.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def subset(self, idx) -> "AuctionSamples":
        over = None if self.ctr_overrides is None else self.ctr_overrides[idx]
        return AuctionSamples(
            self.setting, self.values[idx], self.alphas[idx], self.adjacency[idx], self.value_max, over
        )

    def instance(self, l: int) -> AuctionInstance:
        return AuctionInstance(self.alphas[l], self.adjacency[l])

    def profile(self, l: int) -> BidProfile:
        return BidProfile.from_vector(self.values[l], self.setting.m)
