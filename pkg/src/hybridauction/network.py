"""Hybrid regret network: allocation and payment networks as one graph.

Pipeline per sample::

    bids -> expected bids q (bundle branch) and q' (store branch)
         -> tanh trunks -> logits S1, S2 (rows: bundle grid, then stores), H
         -> S3 = min(col-softmax S1, row-softmax S2) without the "no slot" column
         -> H' = C * softmax over all bundle cells of H
         -> Z: bundle rows min(S3, H'), store rows S3
         -> A: store i gets alpha_i * solo row + its bundle rows, brand j its bundle rows
         -> payments = sigmoid(payment logits) * bid * expected clicks

Bundles live on a fixed ``m * n`` grid (row-major over store, brand);
adjacency-0 cells are masked with a -1e9 logit offset and zeroed in Z.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node
from .model import AuctionInstance, AuctionSetting, BidProfile, ExpectedBids, MechanismOutcome, expected_bids

MASK_FILL = -1e9
FORMAT_VERSION = 1


# layer builders -----------------------------------------------------------
def min_softmax_node(g: Graph, s1: Node, s2: Node, K: int) -> Node:
    cols = slice(0, K)
    return g.minimum(g.slice(g.col_softmax(s1), cols=cols), g.slice(g.row_softmax(s2), cols=cols))


def c_cap_node(g: Graph, h: Node, C: float) -> Node:
    return g.scale(g.total_softmax(h), C)


def _eval(build, *arrays):
    g = Graph()
    ins = [g.input(f"x{i}") for i in range(len(arrays))]
    out = build(g, *ins)
    ev = g.forward({f"x{i}": a for i, a in enumerate(arrays)})
    res = ev[out]
    return res[0] if np.ndim(arrays[0]) == 2 else res


def min_softmax_layer(S1, S2):
    """Doubly sub-stochastic ``(R+m) x K`` matrix from two ``(R+m) x (K+1)`` logit matrices.

    Column-softmax of ``S1`` over rows, row-softmax of ``S2`` over the ``K+1``
    columns, elementwise minimum, last (non-allocation) column dropped.
    """
    S1 = np.asarray(S1, dtype=np.float64)
    K = S1.shape[-1] - 1
    return _eval(lambda g, a, b: min_softmax_node(g, a, b, K), S1, S2)


def c_cap_layer(H, C: float):
    """``C * softmax`` over every entry of ``H``; entries sum to ``C``."""
    if C < 0:
        raise ValueError("cap must be non-negative")
    return _eval(lambda g, h: c_cap_node(g, h, C), H)


def assemble_z(S3, H_cap):
    """Bundle rows ``min(S3, H')``, remaining (store) rows copied from ``S3``."""
    S3 = np.asarray(S3, dtype=np.float64)
    H_cap = np.asarray(H_cap, dtype=np.float64)
    R = H_cap.shape[-2]
    z = S3.copy()
    z[..., :R, :] = np.minimum(S3[..., :R, :], H_cap)
    return z


def z_to_a(Z, instance: AuctionInstance):
    """Agent allocation matrix from Z.

    ``Z`` has one row per bundle of ``instance.bundles`` followed by ``m``
    solo-store rows.
    """
    Z = np.asarray(Z, dtype=np.float64)
    m, n = instance.adjacency.shape
    R = instance.R
    if Z.shape[0] != R + m:
        raise ValueError(f"Z must have {R + m} rows, got {Z.shape[0]}")
    A = np.zeros((m + n, Z.shape[1]))
    A[:m] = instance.alphas[:, None] * Z[R:]
    for r, (i, j) in enumerate(instance.bundles):
        A[i] += Z[r]
        A[m + j] += Z[r]
    return A


def build_inputs(setting: AuctionSetting, instance: AuctionInstance, bids: BidProfile):
    """Trunk features of one sample.

    Returns ``(bundle_features, store_features, mask)``: the bundle/payment
    branch reads flattened ``q_store, q_brand`` and the adjacency indicators,
    the store branch reads flattened ``q'``, and ``mask`` has one bit per cell
    of the bundle grid.
    """
    q: ExpectedBids = expected_bids(setting, instance, bids)
    mask = instance.adjacency.reshape(-1).astype(np.float64)
    bundle = np.concatenate([q.q_store.ravel(), q.q_brand.ravel(), mask])
    return bundle, q.q_store_solo.ravel(), mask


def payment_head(ptilde_logits, A, setting: AuctionSetting, bids: BidProfile):
    """Payments ``sigmoid(logit) * bid * sum_k a_k theta_k`` and the fractions."""
    frac = 1.0 / (1.0 + np.exp(-np.asarray(ptilde_logits, dtype=np.float64)))
    g = np.asarray(A) @ setting.theta_array
    return frac * bids.as_vector() * g, frac


# parameters -----------------------------------------------------------------
@dataclass
class NetworkParams:
    """Named weight blocks; insertion order is the canonical block order."""

    arrays: dict

    def __getitem__(self, key):
        return self.arrays[key]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.arrays.items()})

    @property
    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def save(self, path, meta: dict | None = None) -> None:
        header = {"format": "hybridauction-params", "version": FORMAT_VERSION,
                  "blocks": {k: list(v.shape) for k, v in self.arrays.items()}, "meta": meta or {}}
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                     **self.arrays)

    @classmethod
    def load(cls, path) -> tuple["NetworkParams", dict]:
        with np.load(Path(path)) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            if header.get("format") != "hybridauction-params" or header.get("version") != FORMAT_VERSION:
                raise ValueError(f"{path}: not a supported parameter file")
            arrays = {k: np.array(data[k]) for k in header["blocks"]}
        for k, shape in header["blocks"].items():
            if list(arrays[k].shape) != shape:
                raise ValueError(f"{path}: block {k} has shape {arrays[k].shape}, header says {shape}")
        return cls(arrays), header["meta"]


@dataclass
class ForwardResult:
    outcome: MechanismOutcome
    utilities: np.ndarray  # (B, m+n)
    z: np.ndarray          # (B, m*n + m, K)
    evaluation: object


class HybridRegretNet:
    """Graph and parameter layout of the network for one setting.

    ``hidden`` are the bundle/payment trunk widths, ``store_hidden`` the
    independent-store trunk widths.
    """

    def __init__(self, setting: AuctionSetting, hidden=(128, 128), store_hidden=(64, 64)):
        self.setting = setting
        self.hidden = tuple(int(h) for h in hidden)
        self.store_hidden = tuple(int(h) for h in store_hidden)
        if not self.hidden or not self.store_hidden:
            raise ValueError("each trunk needs at least one hidden layer")
        self.shapes = self._param_shapes()
        self.graph, self.nodes = self._build()

    # layout ---------------------------------------------------------------
    @property
    def n_bundle_features(self) -> int:
        s = self.setting
        return (s.m + s.n) * s.K + s.m * s.n

    def _param_shapes(self) -> dict:
        s = self.setting
        R, K, A = s.max_bundles, s.K, s.n_agents
        shapes = {}

        def trunk(prefix, fan_in, widths):
            for i, w in enumerate(widths, 1):
                shapes[f"{prefix}_w{i}"] = (fan_in, w)
                shapes[f"{prefix}_b{i}"] = (1, w)
                fan_in = w
            return fan_in

        top = trunk("bundle", self.n_bundle_features, self.hidden)
        for name, width in (("s1_bundle", R * (K + 1)), ("s2_bundle", R * (K + 1)), ("h", R * K), ("pay", A)):
            shapes[f"{name}_w"] = (top, width)
            shapes[f"{name}_b"] = (1, width)
        top = trunk("store", s.m * K, self.store_hidden)
        for name in ("s1_store", "s2_store"):
            shapes[f"{name}_w"] = (top, s.m * (K + 1))
            shapes[f"{name}_b"] = (1, s.m * (K + 1))
        return shapes

    def init_params(self, rng) -> NetworkParams:
        """Weights ~ N(0, 1/fan_in), offsets 0."""
        arrays = {}
        for name, shape in self.shapes.items():
            if name.rsplit("_", 1)[1].startswith("w"):
                arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            else:
                arrays[name] = np.zeros(shape)
        return NetworkParams(arrays)

    def check_params(self, params: NetworkParams) -> None:
        for name, shape in self.shapes.items():
            if name not in params.arrays or params[name].shape != shape:
                raise ValueError(f"parameter block {name} missing or not of shape {shape}")
            if not np.isfinite(params[name]).all():
                raise ValueError(f"parameter block {name} has non-finite entries")

    # graph ------------------------------------------------------------------
    def _build(self):
        s = self.setting
        m, n, K, R = s.m, s.n, s.K, s.max_bundles
        g = Graph()
        bids = g.input("bids")          # (B, m+n, 1)
        values = g.input("values")      # (B, m+n, 1)
        alpha = g.input("alpha")        # (B, m, 1)
        adj_row = g.input("adj_row")    # (B, 1, m*n)
        adj_col = g.input("adj_col")    # (B, m*n, 1)
        P = {name: g.param(name) for name in self.shapes}

        theta_row = g.constant(s.theta_array.reshape(1, K), "theta_row")
        theta_col = g.constant(s.theta_array.reshape(K, 1), "theta_col")
        q = g.matmul(bids, theta_row)
        q_store = g.slice(q, rows=slice(0, m))
        q_brand = g.slice(q, rows=slice(m, m + n))
        q_solo = g.mul(q_store, alpha)

        feats = [g.reshape(q_store, 1, m * K)]
        if n:
            feats.append(g.reshape(q_brand, 1, n * K))
        feats.append(adj_row)
        x = g.concat(feats, "cols")
        for i in range(1, len(self.hidden) + 1):
            x = g.tanh(g.affine(x, P[f"bundle_w{i}"], P[f"bundle_b{i}"]))
        xs = g.reshape(q_solo, 1, m * K)
        for i in range(1, len(self.store_hidden) + 1):
            xs = g.tanh(g.affine(xs, P[f"store_w{i}"], P[f"store_b{i}"]))

        def head(inp, name, rows, cols):
            return g.reshape(g.affine(inp, P[f"{name}_w"], P[f"{name}_b"]), rows, cols)

        s1_b = g.mask(head(x, "s1_bundle", R, K + 1), adj_col, MASK_FILL)
        s2_b = head(x, "s2_bundle", R, K + 1)
        s1 = g.concat([s1_b, head(xs, "s1_store", m, K + 1)], "rows")
        s2 = g.concat([s2_b, head(xs, "s2_store", m, K + 1)], "rows")
        s3 = min_softmax_node(g, s1, s2, K)
        h_cap = c_cap_node(g, g.mask(head(x, "h", R, K), adj_col, MASK_FILL), s.C)

        z_bundle = g.mul(g.minimum(g.slice(s3, rows=slice(0, R)), h_cap), adj_col)
        z_solo = g.slice(s3, rows=slice(R, R + m))
        z = g.concat([z_bundle, z_solo], "rows")

        store_inc = np.zeros((m, R))
        brand_inc = np.zeros((n, R))
        for i in range(m):
            for j in range(n):
                store_inc[i, i * n + j] = 1.0
                brand_inc[j, i * n + j] = 1.0
        a_store = g.add(g.mul(z_solo, alpha), g.matmul(g.constant(store_inc, "store_incidence"), z_bundle))
        parts = [a_store]
        if n:
            parts.append(g.matmul(g.constant(brand_inc, "brand_incidence"), z_bundle))
        alloc = g.concat(parts, "rows")
        clicks = g.matmul(alloc, theta_col)
        frac = g.sigmoid(g.reshape(g.affine(x, P["pay_w"], P["pay_b"]), m + n, 1))
        pay = g.mul(frac, g.mul(clicks, bids))
        util = g.sub(g.mul(values, clicks), pay)

        nodes = dict(bids=bids, values=values, alpha=alpha, adj_row=adj_row, adj_col=adj_col,
                     s3=s3, h_cap=h_cap, z=z, alloc=alloc, clicks=clicks, frac=frac, pay=pay, util=util,
                     params=P)
        return g, nodes

    def bindings(self, params: NetworkParams, bids, alphas, adjacency, values=None) -> dict:
        """Graph bindings for a batch: ``bids``/``values`` ``(B, m+n)``, ``alphas`` ``(B, m)``,
        ``adjacency`` ``(B, m, n)``."""
        s = self.setting
        bids = np.asarray(bids, dtype=np.float64)
        B = bids.shape[0]
        if bids.shape != (B, s.n_agents):
            raise ValueError(f"bids must have shape (B, {s.n_agents})")
        adj = np.asarray(adjacency, dtype=np.float64).reshape(B, s.max_bundles)
        vals = bids if values is None else np.asarray(values, dtype=np.float64)
        out = {
            "bids": bids[:, :, None],
            "values": vals.reshape(B, s.n_agents, 1),
            "alpha": np.asarray(alphas, dtype=np.float64).reshape(B, s.m, 1),
            "adj_row": adj[:, None, :],
            "adj_col": adj[:, :, None],
        }
        out.update(params.arrays)
        return out

    def forward(self, params: NetworkParams, bids, alphas, adjacency, values=None) -> ForwardResult:
        ev = self.graph.forward(self.bindings(params, bids, alphas, adjacency, values))
        nd = self.nodes
        outcome = MechanismOutcome(ev[nd["alloc"]], ev[nd["pay"]][:, :, 0])
        return ForwardResult(outcome, ev[nd["util"]][:, :, 0], ev[nd["z"]], ev)

    def mechanism_forward(self, params: NetworkParams, instance: AuctionInstance, bids: BidProfile) -> MechanismOutcome:
        """Outcome of a single auction."""
        instance.check(self.setting)
        res = self.forward(params, bids.as_vector()[None], instance.alphas[None], instance.adjacency[None])
        return res.outcome[0]
