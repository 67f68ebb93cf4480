"""Test-time metrics: revenue, welfare, ex-post regret and the ru ratio."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import substream
from .model import AuctionSamples, BidProfile, MechanismOutcome
from .network import HybridRegretNet, NetworkParams
from .training import misreport_ascent
from .vcg import clarke_payments, integral_allocation, vcg_batch, welfare_max_allocation

REPORT_COLUMNS = ("method", "C", "rev", "sw", "rgt", "ru")
REGRET_FLAG = 1e-3
RU_FLAG = 0.065


@dataclass(frozen=True)
class EvalConfig:
    restarts: int = 100
    ascent_steps: int = 200
    ascent_lr: float = 0.05
    seed: int = 0
    chunk: int = 512
    grid_points: int = 41
    vcg_regret_samples: int = 1000

    def __post_init__(self):
        for name in ("restarts", "ascent_steps", "chunk", "grid_points", "vcg_regret_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.ascent_lr <= 0:
            raise ValueError("ascent_lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def empirical_revenue(outcome: MechanismOutcome) -> float:
    if len(outcome) < 1:
        raise ValueError("need at least one sample")
    return float(np.mean(outcome.payments.sum(axis=-1)))


def empirical_welfare(outcome: MechanismOutcome, values, theta) -> float:
    per_sample = (outcome.expected_ctr(theta) * np.asarray(values)).sum(axis=-1)
    return float(np.mean(per_sample))


def truthful_utilities(outcome: MechanismOutcome, values, theta) -> np.ndarray:
    return outcome.expected_ctr(theta) * np.asarray(values) - outcome.payments


@dataclass
class RuResult:
    ru: float | None
    n_used: int
    n_skipped: int


def ru_ratio(regrets, utilities) -> RuResult:
    """Mean over samples of (sum of regrets) / (sum of truthful utilities).

    Samples whose utility sum is not positive are skipped and counted; if all
    are skipped the ratio is undefined (``None``).
    """
    num = np.asarray(regrets, dtype=np.float64).sum(axis=-1)
    den = np.asarray(utilities, dtype=np.float64).sum(axis=-1)
    ok = den > 0
    if not ok.any():
        return RuResult(None, 0, int(len(den)))
    return RuResult(float(np.mean(num[ok] / den[ok])), int(ok.sum()), int((~ok).sum()))


# mechanisms ------------------------------------------------------------------
class LearnedMechanism:
    """A trained network bound to its parameters."""

    name = "hregnet"

    def __init__(self, net: HybridRegretNet, params: NetworkParams):
        net.check_params(params)
        self.net, self.params = net, params

    def outcome(self, samples: AuctionSamples, bids=None, chunk: int = 4096) -> MechanismOutcome:
        bids = samples.values if bids is None else np.asarray(bids, dtype=np.float64)
        allocs, pays = [], []
        for lo in range(0, len(samples), chunk):
            sl = slice(lo, lo + chunk)
            res = self.net.forward(self.params, bids[sl], samples.alphas[sl], samples.adjacency[sl])
            allocs.append(res.outcome.allocation)
            pays.append(res.outcome.payments)
        s = samples.setting
        if not allocs:
            return MechanismOutcome(np.zeros((0, s.n_agents, s.K)), np.zeros((0, s.n_agents)))
        return MechanismOutcome(np.concatenate(allocs), np.concatenate(pays))


class VcgMechanism:
    name = "vcg"

    def __init__(self, pivot: str = "zero_bid"):
        self.pivot = pivot

    def outcome(self, samples: AuctionSamples, bids=None, chunk: int = 0) -> MechanismOutcome:
        return vcg_batch(samples, bids, pivot=self.pivot)


# regret ---------------------------------------------------------------------
@dataclass
class RegretResult:
    gains: np.ndarray          # (L, m+n) best utility gain, clamped at 0
    truthful: np.ndarray       # (L, m+n) truthful utilities

    @property
    def per_agent(self) -> np.ndarray:
        return self.gains.mean(axis=0)

    @property
    def average(self) -> float:
        return float(self.per_agent.mean()) if self.gains.size else 0.0


def _regret_cache_key(mech: LearnedMechanism, samples: AuctionSamples, cfg: EvalConfig, lo: int, hi: int) -> str:
    h = hashlib.sha256()
    for k, w in mech.params.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(w).tobytes())
    h.update(json.dumps([cfg.restarts, cfg.ascent_steps, cfg.ascent_lr, cfg.seed, lo, hi]).encode())
    h.update(np.ascontiguousarray(samples.values[lo:hi]).tobytes())
    return h.hexdigest()[:20]


def learned_regret(mech: LearnedMechanism, samples: AuctionSamples, cfg: EvalConfig, cache_dir=None) -> RegretResult:
    """Best misreport gain per sample and agent over ``restarts`` gradient-ascent runs.

    Restart ``r`` starts from draw ``r`` of the evaluation stream for every
    sample, so a larger restart count or step count never reports less regret.
    """
    L, N = samples.values.shape
    vmax = samples.value_max
    inits = [substream(cfg.seed, "eval", r).uniform(0.0, vmax, (L, N)) for r in range(cfg.restarts)]
    truth = truthful_utilities(mech.outcome(samples), samples.values, samples.setting.theta)
    gains = np.zeros((L, N))
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    for lo in range(0, L, cfg.chunk):
        hi = min(lo + cfg.chunk, L)
        path = cache / f"regret_{_regret_cache_key(mech, samples, cfg, lo, hi)}.npy" if cache is not None else None
        if path is not None and path.exists():
            gains[lo:hi] = np.load(path)
            continue
        best = np.full((hi - lo, N), -np.inf)
        for init in inits:
            _, u = misreport_ascent(mech.net, mech.params, samples.values[lo:hi], samples.alphas[lo:hi],
                                    samples.adjacency[lo:hi], init[lo:hi], cfg.ascent_steps, cfg.ascent_lr, vmax)
            best = np.maximum(best, u)
        gains[lo:hi] = np.maximum(best - truth[lo:hi], 0.0)
        if path is not None:
            np.save(path, gains[lo:hi])
    return RegretResult(gains, truth)


def _vcg_own_utility(setting, instance, bids: BidProfile, agent: int, value: float, pivot: str) -> float:
    assignment, _ = welfare_max_allocation(setting, instance, bids)
    A = integral_allocation(setting, instance, assignment)
    if not A[agent].any():
        return 0.0
    pay = clarke_payments(setting, instance, bids, assignment, pivot=pivot)
    return float(value * (A[agent] @ setting.theta_array) - pay[agent])


def vcg_regret(samples: AuctionSamples, cfg: EvalConfig, pivot: str = "zero_bid") -> RegretResult:
    """Grid-search regret of VCG on the first ``vcg_regret_samples`` samples."""
    s = samples.setting
    L = min(len(samples), cfg.vcg_regret_samples)
    grid = np.linspace(0.0, samples.value_max, cfg.grid_points)
    truth = truthful_utilities(vcg_batch(samples.subset(slice(0, L)), pivot=pivot), samples.values[:L], s.theta)
    gains = np.zeros((L, s.n_agents))
    for l in range(L):
        inst, prof = samples.instance(l), samples.profile(l)
        vec = samples.values[l]
        for a in range(s.n_agents):
            best = max(_vcg_own_utility(s, inst, prof.replace(a, b), a, vec[a], pivot) for b in grid)
            gains[l, a] = max(best - truth[l, a], 0.0)
    return RegretResult(gains, truth)


def test_regret(mechanism, samples: AuctionSamples, cfg: EvalConfig, cache_dir=None) -> RegretResult:
    if isinstance(mechanism, VcgMechanism):
        return vcg_regret(samples, cfg, mechanism.pivot)
    return learned_regret(mechanism, samples, cfg, cache_dir)


test_regret.__test__ = False  # not a pytest test despite the name


# reports --------------------------------------------------------------------
def _fmt(x) -> str:
    return "" if x is None else f"{x:.3f}"


@dataclass
class EvalReport:
    method: str
    C: int
    n_samples: int
    revenue: float
    welfare: float
    regret: float | None = None
    ru: float | None = None
    ru_skipped: int = 0
    per_agent_regret: list | None = None
    per_agent_payment: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def regret_flag(self) -> bool:
        return self.regret is not None and self.regret >= REGRET_FLAG

    @property
    def ru_flag(self) -> bool:
        return self.ru is not None and self.ru >= RU_FLAG

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def csv_row(self) -> list:
        return [self.method, self.C, repr(self.revenue), repr(self.welfare),
                "" if self.regret is None else repr(self.regret), "" if self.ru is None else repr(self.ru)]

    def table_row(self) -> list:
        return [self.method, str(self.C), _fmt(self.revenue), _fmt(self.welfare), _fmt(self.regret), _fmt(self.ru)]


def evaluate(mechanism, samples: AuctionSamples, cfg: EvalConfig, with_regret: bool = True, cache_dir=None,
             meta=None) -> EvalReport:
    if len(samples) < 1:
        raise ValueError("need at least one test sample")
    theta = samples.setting.theta
    out = mechanism.outcome(samples)
    rep = EvalReport(mechanism.name, samples.setting.C, len(samples), empirical_revenue(out),
                     empirical_welfare(out, samples.values, theta),
                     per_agent_payment=out.payments.mean(axis=0).tolist(), meta=dict(meta or {}))
    if with_regret:
        res = test_regret(mechanism, samples, cfg, cache_dir)
        ru = ru_ratio(res.gains, res.truthful)
        rep.regret, rep.ru, rep.ru_skipped = res.average, ru.ru, ru.n_skipped
        rep.per_agent_regret = res.per_agent.tolist()
        rep.meta["regret_samples"] = int(len(res.gains))
    return rep


def format_table(reports, flag=True) -> str:
    """Fixed-width human table, one row per report, 3 decimals."""
    rows = [list(REPORT_COLUMNS) + (["flag"] if flag else [])]
    for r in reports:
        row = r.table_row()
        if flag:
            marks = []
            if r.regret_flag:
                marks.append("rgt>=0.001")
            if r.ru_flag:
                marks.append("ru>=0.065")
            row.append(",".join(marks))
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows) + "\n"


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def merge_reports(reports) -> list:
    """One row per ``(method, C)``; later reports replace earlier ones. Sorted by method then C."""
    merged = {}
    for r in reports:
        merged[(r.method, r.C)] = r
    return [merged[k] for k in sorted(merged)]


def paired_difference(a, b) -> tuple[float, float]:
    """Mean and standard error of per-sample differences ``a - b``."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.size < 2:
        return float(d.mean()) if d.size else math.nan, math.nan
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size))
