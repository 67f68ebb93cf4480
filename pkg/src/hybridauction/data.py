"""Synthetic auction populations, dataset files and auction-log ingestion."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import AuctionInstance, AuctionSamples, AuctionSetting

PRESETS = {
    "A": (2, 2, 1, (0.5,)),
    "B": (3, 4, 3, (0.5, 0.3, 0.2)),
    "C": (3, 4, 4, (0.5, 0.3, 0.2, 0.1)),
    "D": (4, 4, 3, (0.5, 0.3, 0.2)),
}
VALUE_LAWS = ("uniform", "normal", "lognormal")
NORMAL_MEAN, NORMAL_VAR = 0.5, 0.16
LOGNORMAL_MU, LOGNORMAL_PARAM = 0.1, 1.69
STREAMS = {"data": 1, "init": 2, "misreports": 3, "eval": 4, "batches": 5}


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named purpose under one root seed."""
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, keys)])


def setting_from_preset(name: str, C: int) -> AuctionSetting:
    if name not in PRESETS:
        raise ValueError(f"unknown setting {name!r}; choose from {sorted(PRESETS)}")
    m, n, K, theta = PRESETS[name]
    return AuctionSetting(m, n, K, C, theta)


def _truncated(draw, size: int, rng, lo=0.0, hi=1.0, accept_hint=0.5) -> np.ndarray:
    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        x = draw(rng, int(need / accept_hint) + 16)
        x = x[(x >= lo) & (x <= hi)][:need]
        out[filled:filled + len(x)] = x
        filled += len(x)
    return out


def lognormal_sigma(param_is_variance: bool = True) -> float:
    return float(np.sqrt(LOGNORMAL_PARAM)) if param_is_variance else LOGNORMAL_PARAM


def sample_value(law: str, size, rng, lognormal_variance: bool = True) -> np.ndarray:
    """Per-click values on ``[0, 1]``.

    ``normal`` is N(0.5, variance 0.16) and ``lognormal`` is LN(0.1, 1.69),
    both truncated to ``[0, 1]`` by rejection. ``lognormal_variance`` reads
    1.69 as the variance (True) or the standard deviation of the log.
    """
    shape = (size,) if np.isscalar(size) else tuple(size)
    total = int(np.prod(shape))
    if law == "uniform":
        flat = rng.random(total)
    elif law == "normal":
        sd = np.sqrt(NORMAL_VAR)
        flat = _truncated(lambda r, k: r.normal(NORMAL_MEAN, sd, k), total, rng, accept_hint=0.7)
    elif law == "lognormal":
        sigma = lognormal_sigma(lognormal_variance)
        flat = _truncated(lambda r, k: r.lognormal(LOGNORMAL_MU, sigma, k), total, rng, accept_hint=0.4)
    else:
        raise ValueError(f"unknown value law {law!r}; choose from {VALUE_LAWS}")
    return flat.reshape(shape)


@dataclass(frozen=True)
class PopulationSpec:
    setting: str = "A"
    C: int = 1
    value_law: str = "uniform"
    density: float = 0.5
    alpha_low: float = 0.5
    alpha_high: float = 1.5
    lognormal_variance: bool = True

    def __post_init__(self):
        if not 0 < self.density <= 1:
            raise ValueError("adjacency density must lie in (0, 1]")
        if self.value_law not in VALUE_LAWS:
            raise ValueError(f"unknown value law {self.value_law!r}")
        if not 0 < self.alpha_low <= self.alpha_high:
            raise ValueError("quality factor range must be positive")
        setting_from_preset(self.setting, self.C)

    @property
    def auction_setting(self) -> AuctionSetting:
        return setting_from_preset(self.setting, self.C)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_instance(spec: PopulationSpec, rng) -> AuctionInstance:
    s = spec.auction_setting
    adj = (rng.random((s.m, s.n)) < spec.density).astype(np.int8)
    alphas = rng.uniform(spec.alpha_low, spec.alpha_high, s.m)
    return AuctionInstance(alphas, adj)


def generate(spec: PopulationSpec, size: int, seed: int, split: int = 0) -> AuctionSamples:
    """``size`` i.i.d. auctions; ``split`` selects a disjoint substream (0 train, 1 test)."""
    s = spec.auction_setting
    vals = sample_value(spec.value_law, (size, s.n_agents), substream(seed, "data", split, 0), spec.lognormal_variance)
    alphas = substream(seed, "data", split, 1).uniform(spec.alpha_low, spec.alpha_high, (size, s.m))
    adj = (substream(seed, "data", split, 2).random((size, s.m, s.n)) < spec.density).astype(np.int8)
    return AuctionSamples(s, vals, alphas, adj)


# dataset files --------------------------------------------------------------
def content_hash(samples: AuctionSamples) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(samples.setting.to_dict(), sort_keys=True).encode())
    for arr in (samples.values, samples.alphas, samples.adjacency):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(repr(float(samples.value_max)).encode())
    if samples.ctr_overrides is not None:
        h.update(np.ascontiguousarray(samples.ctr_overrides).tobytes())
    return h.hexdigest()


def save_samples(path, samples: AuctionSamples) -> None:
    arrays = dict(values=samples.values, alphas=samples.alphas, adjacency=samples.adjacency,
                  setting=np.frombuffer(json.dumps(samples.setting.to_dict()).encode(), dtype=np.uint8),
                  value_max=np.array(samples.value_max))
    if samples.ctr_overrides is not None:
        arrays["ctr_overrides"] = samples.ctr_overrides
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_samples(path) -> AuctionSamples:
    try:
        with np.load(Path(path)) as data:
            st = json.loads(bytes(data["setting"]).decode())
            setting = AuctionSetting(st["m"], st["n"], st["K"], st["C"], tuple(st["theta"]))
            over = np.array(data["ctr_overrides"]) if "ctr_overrides" in data.files else None
            return AuctionSamples(setting, np.array(data["values"]), np.array(data["alphas"]),
                                  np.array(data["adjacency"]), float(data["value_max"]), over)
    except (OSError, KeyError, ValueError, zlib.error) as exc:
        raise DataError(f"{path}: cannot read sample file ({exc})") from exc


# auction logs ---------------------------------------------------------------
@dataclass
class _LogAuction:
    line: int
    auction_id: str
    K: int
    theta: tuple
    stores: dict = field(default_factory=dict)   # id -> (bid, alpha)
    brands: dict = field(default_factory=dict)   # id -> bid
    pairs: list = field(default_factory=list)    # (store id, brand id, ctr factor, line)


def _parse_float(text: str, lineno: int, what: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise DataError(f"line {lineno}: {what} {text!r} is not a number") from None
    if not np.isfinite(x):
        raise DataError(f"line {lineno}: {what} must be finite")
    return x


def parse_log(text: str) -> list[_LogAuction]:
    """Parse the comma-delimited log format (see :func:`ingest_log`)."""
    auctions: list[_LogAuction] = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        row = [c.strip() for c in row]
        if not row or not row[0] or row[0].startswith("#"):
            continue
        kind = row[0]
        if kind == "auction":
            if len(row) != 4:
                raise DataError(f"line {lineno}: expected 'auction,id,K,theta1;theta2;...'")
            try:
                K = int(row[2])
            except ValueError:
                raise DataError(f"line {lineno}: slot count {row[2]!r} is not an integer") from None
            theta = tuple(_parse_float(t, lineno, "CTR") for t in row[3].split(";") if t)
            if len(theta) != K:
                raise DataError(f"line {lineno}: {len(theta)} CTRs given for K={K}")
            auctions.append(_LogAuction(lineno, row[1], K, theta))
            continue
        if not auctions:
            raise DataError(f"line {lineno}: {kind!r} record before any auction header")
        cur = auctions[-1]
        if kind == "store":
            if len(row) not in (3, 4):
                raise DataError(f"line {lineno}: expected 'store,id,bid[,alpha]'")
            bid = _parse_float(row[2], lineno, "bid")
            alpha = _parse_float(row[3], lineno, "alpha") if len(row) == 4 else 1.0
            if bid < 0 or alpha <= 0:
                raise DataError(f"line {lineno}: bids must be >= 0 and alpha > 0")
            if row[1] in cur.stores:
                raise DataError(f"line {lineno}: duplicate store id {row[1]!r}")
            cur.stores[row[1]] = (bid, alpha)
        elif kind == "brand":
            if len(row) != 3:
                raise DataError(f"line {lineno}: expected 'brand,id,bid'")
            bid = _parse_float(row[2], lineno, "bid")
            if bid < 0:
                raise DataError(f"line {lineno}: bids must be >= 0")
            if row[1] in cur.brands:
                raise DataError(f"line {lineno}: duplicate brand id {row[1]!r}")
            cur.brands[row[1]] = bid
        elif kind == "pair":
            if len(row) not in (3, 4):
                raise DataError(f"line {lineno}: expected 'pair,store id,brand id[,ctr factor]'")
            factor = _parse_float(row[3], lineno, "CTR factor") if len(row) == 4 else 1.0
            cur.pairs.append((row[1], row[2], factor, lineno))
        else:
            raise DataError(f"line {lineno}: unknown record type {kind!r}")
    for a in auctions:
        for sid, bid_, _, lineno in a.pairs:
            if sid not in a.stores or bid_ not in a.brands:
                raise DataError(f"line {lineno}: pair ({sid}, {bid_}) references an unknown store or brand")
    return auctions


def ingest_log(path, C: int, m: int = 10, n: int = 10, K: int = 5) -> AuctionSamples:
    """Read an auction log and pad or trim every auction to ``m`` stores and ``n`` brands.

    Format, one comma-separated record per line, ``#`` starts a comment::

        auction,<id>,<K>,<theta_1;...;theta_K>
        store,<id>,<bid>[,<alpha>]
        brand,<id>,<bid>
        pair,<store id>,<brand id>[,<bundle ctr factor>]

    Bids are read as per-click values. Over-full auctions keep their highest
    bidders (stable on ties); padding agents have value 0 and no bundles.
    """
    text = Path(path).read_text()
    auctions = parse_log(text)
    setting = AuctionSetting(m, n, K, C, auctions[0].theta if auctions else tuple(np.linspace(0.5, 0.1, K)))
    L = len(auctions)
    values = np.zeros((L, m + n))
    alphas = np.ones((L, m))
    adj = np.zeros((L, m, n), dtype=np.int8)
    over = np.ones((L, m, n))
    for l, a in enumerate(auctions):
        if a.K != K:
            raise DataError(f"line {a.line}: auction {a.auction_id} has K={a.K}, expected {K}")
        if a.theta != setting.theta:
            raise DataError(f"line {a.line}: auction {a.auction_id} uses different slot CTRs")
        stores = sorted(a.stores.items(), key=lambda kv: -kv[1][0])[:m]
        brands = sorted(a.brands.items(), key=lambda kv: -kv[1])[:n]
        s_idx = {sid: i for i, (sid, _) in enumerate(stores)}
        b_idx = {bid: j for j, (bid, _) in enumerate(brands)}
        for sid, (bid, alpha) in stores:
            values[l, s_idx[sid]] = bid
            alphas[l, s_idx[sid]] = alpha
        for bid_id, bid in brands:
            values[l, m + b_idx[bid_id]] = bid
        for sid, bid_id, factor, _ in a.pairs:
            if sid in s_idx and bid_id in b_idx:
                adj[l, s_idx[sid], b_idx[bid_id]] = 1
                over[l, s_idx[sid], b_idx[bid_id]] = factor
    vmax = float(values.max()) if L and values.max() > 0 else 1.0
    return AuctionSamples(setting, values, alphas, adj, value_max=vmax, ctr_overrides=over)


def write_log(path, samples: AuctionSamples, ids=None) -> None:
    """Inverse of :func:`ingest_log` for padded samples (zero-value padding agents are dropped)."""
    s = samples.setting
    theta = ";".join(repr(t) for t in s.theta)
    lines = []
    for l in range(len(samples)):
        lines.append(f"auction,{l if ids is None else ids[l]},{s.K},{theta}")
        live_s = [i for i in range(s.m) if samples.values[l, i] > 0 or samples.adjacency[l, i].any()]
        live_b = [j for j in range(s.n) if samples.values[l, s.m + j] > 0 or samples.adjacency[l, :, j].any()]
        for i in live_s:
            lines.append(f"store,s{i},{float(samples.values[l, i])!r},{float(samples.alphas[l, i])!r}")
        for j in live_b:
            lines.append(f"brand,b{j},{float(samples.values[l, s.m + j])!r}")
        for i, j in zip(*np.nonzero(samples.adjacency[l])):
            factor = 1.0 if samples.ctr_overrides is None else float(samples.ctr_overrides[l, i, j])
            lines.append(f"pair,s{i},b{j},{factor!r}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
