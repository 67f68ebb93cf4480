"""Welfare-maximizing hybrid allocation with Clarke pivot payments.

The selection problem is "pick at most ``K`` candidates, at most ``C`` of
them bundles" and fill slots in descending CTR order. Those two budgets form
a laminar matroid, so sorting candidates by weight and taking each one whose
budget still has room is exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import AuctionInstance, AuctionSamples, AuctionSetting, BidProfile, MechanismOutcome

SOLO, BUNDLE = 0, 1


class Candidate(NamedTuple):
    kind: int
    store: int
    brand: int  # -1 for a solo store
    index: int  # store index for solo, bundle order for bundles
    weight: float

    def contains(self, agent: int, m: int) -> bool:
        if agent < m:
            return self.store == agent
        return self.kind == BUNDLE and self.brand == agent - m


def candidates(setting: AuctionSetting, instance: AuctionInstance, bids: BidProfile) -> list[Candidate]:
    """Solo stores first, then bundles in row-major order."""
    b_s, b_b, alpha = bids.store_bids, bids.brand_bids, instance.alphas
    out = [Candidate(SOLO, i, -1, i, float(alpha[i] * b_s[i])) for i in range(setting.m)]
    out += [
        Candidate(BUNDLE, i, j, r, float(b_s[i] + b_b[j])) for r, (i, j) in enumerate(instance.bundles)
    ]
    return out


def _greedy(cands, K: int, C: int, theta) -> tuple[list[Candidate], float]:
    order = sorted(cands, key=lambda c: (-c.weight, c.kind, c.index))
    chosen: list[Candidate] = []
    n_bundles = 0
    for c in order:
        if len(chosen) == K:
            break
        if c.weight <= 0:
            break
        if c.kind == BUNDLE:
            if n_bundles == C:
                continue
            n_bundles += 1
        chosen.append(c)
    welfare = float(sum(t * c.weight for t, c in zip(theta, chosen)))
    return chosen, welfare


def welfare_max_allocation(setting: AuctionSetting, instance: AuctionInstance, bids: BidProfile):
    """Return ``(assignment, welfare)``; ``assignment[k]`` is a Candidate or None."""
    chosen, welfare = _greedy(candidates(setting, instance, bids), setting.K, setting.C, setting.theta)
    assignment = chosen + [None] * (setting.K - len(chosen))
    return assignment, welfare


def agent_contributions(setting: AuctionSetting, instance: AuctionInstance, bids: BidProfile, assignment):
    """Reported welfare each agent receives under ``assignment``."""
    m = setting.m
    vec = bids.as_vector()
    contrib = np.zeros(setting.n_agents)
    for theta_k, c in zip(setting.theta, assignment):
        if c is None:
            continue
        if c.kind == SOLO:
            contrib[c.store] += theta_k * instance.alphas[c.store] * vec[c.store]
        else:
            contrib[c.store] += theta_k * vec[c.store]
            contrib[m + c.brand] += theta_k * vec[m + c.brand]
    return contrib


def clarke_payments(
    setting: AuctionSetting, instance: AuctionInstance, bids: BidProfile, assignment, pivot: str = "zero_bid"
) -> np.ndarray:
    """Clarke pivot payments ``W(-a) - W_others(a)`` for every agent.

    ``pivot`` picks the counterfactual welfare ``W(-a)``:

    * ``"zero_bid"``: optimum with agent ``a``'s bid set to 0. Its bundles stay
      available to its partners, so payments are never negative.
    * ``"remove"``: optimum after deleting every candidate containing ``a``.
      A brand whose partner store has ``alpha < 1`` can then receive a
      negative payment.
    """
    m = setting.m
    cands = candidates(setting, instance, bids)
    welfare = sum(t * c.weight for t, c in zip(setting.theta, assignment) if c is not None)
    contrib = agent_contributions(setting, instance, bids, assignment)
    winners = {a for c in assignment if c is not None for a in range(setting.n_agents) if c.contains(a, m)}
    pay = np.zeros(setting.n_agents)
    for a in sorted(winners):
        if pivot == "zero_bid":
            _, w_minus = welfare_max_allocation(setting, instance, bids.replace(a, 0.0))
        elif pivot == "remove":
            rest = [c for c in cands if not c.contains(a, m)]
            _, w_minus = _greedy(rest, setting.K, setting.C, setting.theta)
        else:
            raise ValueError(f"unknown pivot rule {pivot!r}")
        pay[a] = w_minus - (welfare - contrib[a])
    if pivot == "zero_bid":
        # nonnegative in exact arithmetic; drop rounding residue
        np.maximum(pay, 0.0, out=pay)
    return pay


def integral_allocation(setting: AuctionSetting, instance: AuctionInstance, assignment) -> np.ndarray:
    """``(m+n) x K`` allocation matrix; solo slots carry ``alpha_i``."""
    A = np.zeros((setting.n_agents, setting.K))
    for k, c in enumerate(assignment):
        if c is None:
            continue
        if c.kind == SOLO:
            A[c.store, k] += instance.alphas[c.store]
        else:
            A[c.store, k] += 1.0
            A[setting.m + c.brand, k] += 1.0
    return A


@dataclass(frozen=True)
class VcgOutcome:
    assignment: list
    welfare: float
    payments: np.ndarray
    allocation: np.ndarray

    @property
    def outcome(self) -> MechanismOutcome:
        return MechanismOutcome(self.allocation, self.payments)


def vcg_mechanism(setting, instance, bids, pivot: str = "zero_bid") -> VcgOutcome:
    assignment, welfare = welfare_max_allocation(setting, instance, bids)
    pay = clarke_payments(setting, instance, bids, assignment, pivot=pivot)
    return VcgOutcome(assignment, welfare, pay, integral_allocation(setting, instance, assignment))


def vcg_batch(samples: AuctionSamples, bids=None, pivot: str = "zero_bid") -> MechanismOutcome:
    """Run VCG on every sample; ``bids`` defaults to the true values."""
    s = samples.setting
    bids = samples.values if bids is None else np.asarray(bids, dtype=np.float64)
    alloc = np.zeros((len(samples), s.n_agents, s.K))
    pay = np.zeros((len(samples), s.n_agents))
    for l in range(len(samples)):
        out = vcg_mechanism(s, samples.instance(l), BidProfile.from_vector(bids[l], s.m), pivot=pivot)
        alloc[l], pay[l] = out.allocation, out.payments
    return MechanismOutcome(alloc, pay)
