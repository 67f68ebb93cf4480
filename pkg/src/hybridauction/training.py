"""Augmented-Lagrangian training with inner misreport ascent."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .data import substream
from .model import AuctionSamples
from .network import HybridRegretNet, NetworkParams

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "loss", "revenue", "regret", "lambda_norm", "rho")
CKPT_FORMAT = "hybridauction-checkpoint"


class NumericalError(RuntimeError):
    """A gradient or loss became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 128
    ascent_steps: int = 25
    ascent_lr: float = 0.1
    lr: float = 1e-3
    multiplier_period: int = 100
    rho_init: float = 1.0
    rho_increment: float = 1.0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple = (128, 128)
    store_hidden: tuple = (64, 64)
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "store_hidden", tuple(int(h) for h in self.store_hidden))
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("batch_size", "ascent_steps", "multiplier_period", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.ascent_lr <= 0 or self.lr < 0 or self.rho_init <= 0 or self.rho_increment < 0:
            raise ValueError("step sizes and the penalty factor must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"], d["store_hidden"] = list(self.hidden), list(self.store_hidden)
        return d


@dataclass
class LagrangeState:
    lam: np.ndarray
    rho: float

    @classmethod
    def initial(cls, n_agents: int, rho: float) -> "LagrangeState":
        return cls(np.zeros(n_agents), float(rho))

    def copy(self) -> "LagrangeState":
        return LagrangeState(self.lam.copy(), self.rho)


# misreports ------------------------------------------------------------------
def _misreport_bids(values: np.ndarray, mis: np.ndarray) -> np.ndarray:
    """Rows ``(l, a)``: sample ``l`` with agent ``a``'s bid replaced by ``mis[l, a]``."""
    B, N = values.shape
    bids = np.repeat(values[:, None, :], N, axis=1)
    idx = np.arange(N)
    bids[:, idx, idx] = mis
    return bids.reshape(B * N, N)


def misreport_ascent(net: HybridRegretNet, params: NetworkParams, values, alphas, adjacency, init,
                     steps: int, lr: float, value_max: float = 1.0):
    """Projected gradient ascent on each agent's own utility over its misreport.

    Every agent of every sample is searched at once; ``init`` has the shape of
    ``values``. Returns ``(best_misreports, best_utilities)`` where "best" is the
    highest-utility iterate seen, the starting point included.
    """
    values = np.asarray(values, dtype=np.float64)
    B, N = values.shape
    al = np.repeat(np.asarray(alphas, dtype=np.float64), N, axis=0)
    adj = np.repeat(np.asarray(adjacency), N, axis=0)
    vals = np.repeat(values, N, axis=0)
    own = np.tile(np.eye(N), (B, 1))[:, :, None]
    nd = net.nodes
    mis = np.clip(np.asarray(init, dtype=np.float64), 0.0, value_max).copy()
    best_mis, best_u = mis.copy(), np.full((B, N), -np.inf)
    for step in range(steps + 1):
        ev = net.graph.forward(net.bindings(params, _misreport_bids(values, mis), al, adj, vals))
        u = (ev[nd["util"]][:, :, 0] * own[:, :, 0]).sum(axis=1).reshape(B, N)
        better = u > best_u
        best_u = np.where(better, u, best_u)
        best_mis = np.where(better, mis, best_mis)
        if step == steps:
            break
        grad = net.graph.backward(ev, {nd["util"]: own}, wrt=[nd["bids"]])[nd["bids"]]
        grad = (grad[:, :, 0] * own[:, :, 0]).sum(axis=1).reshape(B, N)
        if not np.isfinite(grad).all():
            raise NumericalError("non-finite misreport gradient")
        mis = np.clip(mis + lr * grad, 0.0, value_max)
    return best_mis, best_u


def agent_misreport_ascent(net, params, values, alphas, adjacency, agent: int, init, steps: int, lr: float,
                           value_max: float = 1.0):
    """Single-agent view of :func:`misreport_ascent` for one sample."""
    values = np.asarray(values, dtype=np.float64).reshape(1, -1)
    start = values.copy()
    start[0, agent] = init
    best, u = misreport_ascent(net, params, values, np.reshape(alphas, (1, -1)),
                               np.asarray(adjacency)[None], start, steps, lr, value_max)
    return float(best[0, agent]), float(u[0, agent])


def empirical_regret(truthful_util, misreport_util) -> np.ndarray:
    """Per-agent mean over samples of ``max(0, u(misreport) - u(truth))``."""
    gain = np.asarray(misreport_util) - np.asarray(truthful_util)
    return np.maximum(gain, 0.0).mean(axis=0)


def lagrangian_loss(payments, regrets, lam, rho: float) -> float:
    """``-mean revenue + sum(lam * rgt) + rho/2 * sum(rgt^2)``."""
    payments = np.asarray(payments)
    revenue = payments.sum(axis=-1).mean() if payments.ndim > 1 else payments.sum()
    regrets = np.asarray(regrets)
    return float(-revenue + np.dot(lam, regrets) + 0.5 * rho * np.dot(regrets, regrets))


# optimizer ------------------------------------------------------------------
@dataclass
class Optimizer:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Optimizer":
        return cls(cfg.optimizer, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def apply(self, params: NetworkParams, grads: dict) -> NetworkParams:
        self.step_count += 1
        out = {}
        if self.kind == "sgd":
            for k, w in params.items():
                out[k] = w - self.lr * grads[k]
            return NetworkParams(out)
        t = self.step_count
        c1, c2 = 1 - self.beta1 ** t, 1 - self.beta2 ** t
        for k, w in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            out[k] = w - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return NetworkParams(out)


# one step ---------------------------------------------------------------------
@dataclass
class StepStats:
    loss: float
    revenue: float
    regrets: np.ndarray


def _combined_bindings(net, params, values, alphas, adjacency, mis):
    B, N = values.shape
    bids = np.concatenate([values, _misreport_bids(values, mis)])
    vals = np.concatenate([values, np.repeat(values, N, axis=0)])
    al = np.concatenate([alphas, np.repeat(alphas, N, axis=0)])
    adj = np.concatenate([adjacency, np.repeat(adjacency, N, axis=0)])
    return net.bindings(params, bids, al, adj, vals)


def _split_utilities(util: np.ndarray, B: int, N: int):
    truth = util[:B]
    mis = util[B:].reshape(B, N, N)[:, np.arange(N), np.arange(N)]
    return truth, mis


def lagrangian_gradient(net: HybridRegretNet, params: NetworkParams, batch: AuctionSamples, mis,
                        state: LagrangeState):
    """Loss, statistics and parameter gradients with the misreports held fixed."""
    values, alphas, adj = batch.values, batch.alphas, batch.adjacency
    B, N = values.shape
    nd = net.nodes
    try:
        ev = net.graph.forward(_combined_bindings(net, params, values, alphas, adj, mis))
    except NonFiniteError as exc:
        raise NumericalError(str(exc)) from exc
    util = ev[nd["util"]][:, :, 0]
    pay = ev[nd["pay"]][:B, :, 0]
    truth, mis_u = _split_utilities(util, B, N)
    pos = (mis_u - truth > 0).astype(np.float64)
    rgt = empirical_regret(truth, mis_u)
    loss = lagrangian_loss(pay, rgt, state.lam, state.rho)
    coef = (state.lam + state.rho * rgt) / B

    seed_pay = np.zeros(ev[nd["pay"]].shape)
    seed_pay[:B] = -1.0 / B
    seed_util = np.zeros(util.shape)
    seed_util[:B] = -coef * pos
    own = seed_util[B:].reshape(B, N, N)
    own[:, np.arange(N), np.arange(N)] = coef * pos
    seeds = {nd["pay"]: seed_pay, nd["util"]: seed_util[:, :, None]}
    P = nd["params"]
    g = net.graph.backward(ev, seeds, wrt=list(P.values()))
    grads = {}
    for name, node in P.items():
        gr = g[node].reshape(params[name].shape)
        if not np.isfinite(gr).all():
            raise NumericalError(f"non-finite gradient in parameter block {name}")
        grads[name] = gr
    return StepStats(loss, float(pay.sum(axis=1).mean()), rgt), grads


def train_step(net, params, batch, mis, state, optimizer: Optimizer):
    stats, grads = lagrangian_gradient(net, params, batch, mis, state)
    return optimizer.apply(params, grads), stats


def minibatch_regret(net, params, batch: AuctionSamples, mis) -> np.ndarray:
    B, N = batch.values.shape
    ev = net.graph.forward(_combined_bindings(net, params, batch.values, batch.alphas, batch.adjacency, mis))
    truth, mis_u = _split_utilities(ev[net.nodes["util"]][:, :, 0], B, N)
    return empirical_regret(truth, mis_u)


def update_multipliers(state: LagrangeState, regrets, iteration: int, period: int, increment: float) -> LagrangeState:
    """``lam += rho * rgt`` then ``rho += increment`` on iterations divisible by ``period``."""
    if iteration % period:
        return state
    return LagrangeState(state.lam + state.rho * np.asarray(regrets), state.rho + increment)


# checkpoints ------------------------------------------------------------------
def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class TrainState:
    params: NetworkParams
    optimizer: Optimizer
    lagrange: LagrangeState
    iteration: int = 0


def save_checkpoint(path, st: TrainState, meta: dict) -> None:
    header = dict(meta, format=CKPT_FORMAT, version=1, iteration=st.iteration, rho=st.lagrange.rho,
                  opt_steps=st.optimizer.step_count)
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
              "lam": st.lagrange.lam}
    for k, w in st.params.items():
        arrays["param/" + k] = w
        if k in st.optimizer.m:
            arrays["adam_m/" + k] = st.optimizer.m[k]
            arrays["adam_v/" + k] = st.optimizer.v[k]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path, cfg: TrainConfig | None = None):
    """Return ``(TrainState, header)``."""
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != CKPT_FORMAT:
            raise ValueError(f"{path} is not a training checkpoint")
        pick = lambda prefix: {k[len(prefix):]: np.array(data[k]) for k in data.files if k.startswith(prefix)}
        params = NetworkParams(pick("param/"))
        m_, v_ = pick("adam_m/"), pick("adam_v/")
        lam = np.array(data["lam"])
    opt = Optimizer.from_config(cfg) if cfg is not None else Optimizer("adam", 1e-3)
    opt.step_count, opt.m, opt.v = header["opt_steps"], m_, v_
    return TrainState(params, opt, LagrangeState(lam, header["rho"]), header["iteration"]), header


# loop -----------------------------------------------------------------------
def _batch_indices(n_train: int, E: int, seed: int, t: int) -> np.ndarray:
    """Indices of minibatch ``t`` (0-based); each epoch is a fresh permutation."""
    per_epoch = max(n_train // E, 1)
    epoch, pos = divmod(t, per_epoch)
    perm = substream(seed, "batches", epoch).permutation(n_train)
    return perm[pos * E:(pos + 1) * E]


def _truncate_log(path: Path, iteration: int, log_every: int) -> None:
    """Drop rows past the checkpoint and the off-cadence row a finished run writes at its last iteration."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= iteration and int(r[0]) % log_every == 0] \
        if rows else []
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def _resume_view(meta: dict) -> dict:
    d = json.loads(json.dumps({k: v for k, v in meta.items() if k != "config_hash"}, default=str))
    d.get("train_config", {}).pop("iterations", None)
    return d


class Trainer:
    """Runs the training loop with periodic checkpoints and a CSV curve log."""

    def __init__(self, setting, cfg: TrainConfig, out_dir=None, meta: dict | None = None):
        self.setting = setting
        self.cfg = cfg
        self.net = HybridRegretNet(setting, cfg.hidden, cfg.store_hidden)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.meta = dict(meta or {})
        self.meta.setdefault("train_config", cfg.to_dict())
        self.meta.setdefault("setting", setting.to_dict())
        self.meta["config_hash"] = config_hash({k: self.meta[k] for k in sorted(self.meta) if k != "config_hash"})

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / "checkpoint.npz"

    @property
    def log_path(self) -> Path:
        return self.out_dir / "train_log.csv"

    def initial_state(self) -> TrainState:
        params = self.net.init_params(substream(self.cfg.seed, "init"))
        return TrainState(params, Optimizer.from_config(self.cfg),
                          LagrangeState.initial(self.setting.n_agents, self.cfg.rho_init))

    def resume_state(self) -> TrainState:
        """Load the checkpoint; only the iteration budget may differ from the stored configuration.

        Every draw is keyed by iteration, so extending a finished run equals training longer from scratch.
        """
        st, header = load_checkpoint(self.checkpoint_path, self.cfg)
        if _resume_view({k: header.get(k) for k in self.meta}) != _resume_view(self.meta):
            raise ValueError("checkpoint was written under a different configuration; refusing to resume")
        if st.iteration > self.cfg.iterations:
            raise ValueError(f"checkpoint is at iteration {st.iteration}, past the budget of {self.cfg.iterations}")
        self.net.check_params(st.params)
        return st

    def _save(self, st: TrainState) -> None:
        if self.out_dir is not None:
            save_checkpoint(self.checkpoint_path, st, dict(self.meta, seed=self.cfg.seed))

    def fit(self, train: AuctionSamples, state: TrainState | None = None, resume: bool = False,
            callback=None) -> TrainState:
        cfg = self.cfg
        if train.setting != self.setting:
            raise ValueError("training samples belong to a different setting")
        if len(train) < 1:
            raise ValueError("empty training set")
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        if state is None:
            state = self.resume_state() if resume else self.initial_state()
        writer = None
        if self.out_dir is not None:
            if resume:
                _truncate_log(self.log_path, state.iteration, cfg.log_every)
            fresh = not resume or not self.log_path.exists()
            fh = open(self.log_path, "w" if fresh else "a", newline="")
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(LOG_COLUMNS)
        try:
            if state.iteration == 0:
                self._save(state)
            while state.iteration < cfg.iterations:
                t = state.iteration
                batch = train.subset(_batch_indices(len(train), cfg.batch_size, cfg.seed, t))
                init = substream(cfg.seed, "misreports", t).uniform(0.0, train.value_max, batch.values.shape)
                mis, _ = misreport_ascent(self.net, state.params, batch.values, batch.alphas, batch.adjacency,
                                          init, cfg.ascent_steps, cfg.ascent_lr, train.value_max)
                params, stats = train_step(self.net, state.params, batch, mis, state.lagrange, state.optimizer)
                state.params = params
                state.iteration = t + 1
                if state.iteration % cfg.multiplier_period == 0:
                    rgt = minibatch_regret(self.net, params, batch, mis)
                    state.lagrange = update_multipliers(state.lagrange, rgt, state.iteration,
                                                        cfg.multiplier_period, cfg.rho_increment)
                if state.iteration % cfg.log_every == 0 or state.iteration == cfg.iterations:
                    row = (state.iteration, stats.loss, stats.revenue, float(stats.regrets.mean()),
                           float(np.linalg.norm(state.lagrange.lam)), state.lagrange.rho)
                    log.info("iter %d loss %.5f rev %.4f rgt %.5f lam %.3f rho %.1f", *row)
                    if writer is not None:
                        writer.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
                        fh.flush()
                if callback is not None:
                    callback(state, stats)
                if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.iterations:
                    self._save(state)
        finally:
            if writer is not None:
                fh.close()
        return state


def train(setting, train_samples: AuctionSamples, cfg: TrainConfig, out_dir=None, resume=False,
          meta=None) -> TrainState:
    return Trainer(setting, cfg, out_dir, meta).fit(train_samples, resume=resume)
