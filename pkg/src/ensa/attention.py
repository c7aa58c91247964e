"""Native sparse attention over a ball tree.

Three branches share one query set:

* compressed: every query attends to one pooled token per compressed ball;
* selected: every query attends to all slots of its top-k compressed balls,
  ranked by the compressed attention probabilities;
* local: every query attends to the slots of its own local ball, with a
  learned bias on the relative position of query and key.

A per-query sigmoid gate blends the branch outputs before the output
projection. All tensors here are in tree order (``n_padded`` rows).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .balltree import BallTree

BRANCHES = ("cmp", "sel", "loc")


@dataclass(frozen=True)
class HeadsConfig:
    heads: int
    head_dim: int

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    @classmethod
    def from_hidden(cls, hidden: int, heads: int) -> "HeadsConfig":
        if heads < 1 or hidden % heads:
            raise ValueError(f"hidden={hidden} is not divisible by heads={heads}")
        return cls(heads, hidden // heads)


@dataclass
class BranchOutput:
    values: dc.Tensor
    probs: np.ndarray | None = None  # n_padded x heads x keys-per-query
    keys: np.ndarray | None = None  # n_padded x keys-per-query, key ids behind probs
    score_evals: int = 0


@dataclass(frozen=True)
class Selection:
    indices: np.ndarray  # n_padded x k, ascending per row
    includes_own: bool = True


@dataclass
class Compressed:
    k: dc.Tensor
    v: dc.Tensor
    centroids: np.ndarray
    ball_mask: np.ndarray  # True where the ball holds at least one real slot


@dataclass
class NsaOutput:
    value: dc.Tensor
    branches: dict[str, BranchOutput] = field(default_factory=dict)
    selection: Selection | None = None
    gates: np.ndarray | None = None

    @property
    def score_evals(self) -> int:
        return sum(b.score_evals for b in self.branches.values())


def score_eval_count(n_padded: int, m: int, c: int, k: int) -> int:
    """Query-key dot products in one full NSA layer."""
    return n_padded * (n_padded // c) + n_padded * k * c + n_padded * m


def init_attention_params(
    store: dc.ParamStore,
    prefix: str,
    hidden: int,
    heads: int,
    rng: np.random.Generator,
    bias_hidden: int = 16,
    branches: tuple[str, ...] = BRANCHES,
) -> None:
    def w(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    for br in BRANCHES:
        if br not in branches and not (br == "cmp" and "sel" in branches):
            continue
        for name in ("wq", "wk", "wv"):
            store.add(f"{prefix}.{br}.{name}", w(hidden, hidden))
    if "cmp" in branches or "sel" in branches:
        store.add(f"{prefix}.cmp.wck", w(hidden, hidden))
        store.add(f"{prefix}.cmp.wcv", w(hidden, hidden))
    if "loc" in branches:
        store.add(f"{prefix}.loc.bias.w1", w(3, bias_hidden))
        store.add(f"{prefix}.loc.bias.b1", np.zeros((1, bias_hidden)))
        store.add(f"{prefix}.loc.bias.w2", w(bias_hidden, heads))
        store.add(f"{prefix}.loc.bias.b2", np.zeros((1, heads)))
    store.add(f"{prefix}.gate.w", w(hidden, 3))
    store.add(f"{prefix}.gate.b", np.zeros((1, 3)))
    store.add(f"{prefix}.wo", w(hidden, hidden))


def project_qkv(x: dc.Tensor, params: dc.ParamStore, prefix: str, branch: str):
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}")
    return tuple(dc.matmul(x, params[f"{prefix}.{branch}.{w}"]) for w in ("wq", "wk", "wv"))


def compress_balls(
    k: dc.Tensor,
    v: dc.Tensor,
    positions_tree: np.ndarray,
    tree: BallTree,
    params: dc.ParamStore,
    prefix: str,
) -> Compressed:
    """Masked mean of each compressed ball followed by a learned linear map."""
    c = tree.c
    if k.shape[0] % c or k.shape[0] != tree.n_padded:
        raise dc.ShapeError("compress_balls", k.shape, detail=f"c={c}, n_padded={tree.n_padded}")
    w = tree.mask.astype(np.float64)
    k_cmp = dc.matmul(dc.reduce_mean_rows(k, c, w), params[f"{prefix}.cmp.wck"])
    v_cmp = dc.matmul(dc.reduce_mean_rows(v, c, w), params[f"{prefix}.cmp.wcv"])
    counts = w.reshape(-1, c).sum(axis=1)
    pos_sum = (positions_tree * w[:, None]).reshape(-1, c, 3).sum(axis=1)
    centroids = pos_sum / np.maximum(counts, 1.0)[:, None]
    return Compressed(k_cmp, v_cmp, centroids, counts > 0)


def compressed_attention(
    q: dc.Tensor,
    k_cmp: dc.Tensor,
    v_cmp: dc.Tensor,
    mask_cmp: np.ndarray,
    heads: HeadsConfig,
) -> BranchOutput:
    mask_cmp = np.asarray(mask_cmp, dtype=bool)
    if not mask_cmp.any():
        raise ValueError("compressed attention: every compressed ball is masked")
    if k_cmp.shape != v_cmp.shape or k_cmp.shape[0] != mask_cmp.size or q.shape[1] != heads.hidden:
        raise dc.ShapeError("compressed_attention", q.shape, k_cmp.shape, v_cmp.shape)
    out, probs = dc.index_attention(q, k_cmp, v_cmp, None, mask_cmp, heads.heads)
    n, nb = q.shape[0], k_cmp.shape[0]
    return BranchOutput(out, probs, np.broadcast_to(np.arange(nb), (n, nb)), n * nb)


def select_topk(probs: np.ndarray, k: int, own_ball: np.ndarray) -> Selection:
    """Top-k compressed balls per query, summing probabilities over heads.

    Ties go to the lower ball index. A query's own ball is always kept,
    displacing the lowest-ranked pick if necessary.
    """
    scores = probs.sum(axis=1) if probs.ndim == 3 else np.asarray(probs)
    n, nb = scores.shape
    if not 1 <= k <= nb:
        raise ValueError(f"cannot select k={k} of {nb} balls")
    own_ball = np.asarray(own_ball, dtype=np.int64)
    ranked = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    missing = ~(ranked == own_ball[:, None]).any(axis=1)
    ranked[missing, k - 1] = own_ball[missing]
    return Selection(np.sort(ranked, axis=1), includes_own=True)


def selected_attention(
    q: dc.Tensor,
    k: dc.Tensor,
    v: dc.Tensor,
    selection: Selection,
    tree: BallTree,
    mask: np.ndarray,
    heads: HeadsConfig,
) -> BranchOutput:
    c = tree.c
    n = q.shape[0]
    sel = selection.indices
    if sel.shape[0] != n or (sel.size and sel.max() >= tree.n_padded // c):
        raise dc.ShapeError("selected_attention", q.shape, sel.shape, detail=f"c={c}")
    slots = (sel[:, :, None] * c + np.arange(c)).reshape(n, -1)
    out, probs = dc.index_attention(q, k, v, slots, np.asarray(mask)[slots], heads.heads)
    return BranchOutput(out, probs, slots, n * slots.shape[1])


def local_slots(n_padded: int, m: int) -> np.ndarray:
    return (np.arange(n_padded) // m * m)[:, None] + np.arange(m)


def relative_offsets(positions_tree: np.ndarray, m: int) -> np.ndarray:
    """``p_i - p_j`` for every query ``i`` and every slot ``j`` of its local ball."""
    slots = local_slots(positions_tree.shape[0], m)
    return (positions_tree[:, None, :] - positions_tree[slots]).reshape(-1, 3)


def local_attention(
    q: dc.Tensor,
    k: dc.Tensor,
    v: dc.Tensor,
    positions_tree: np.ndarray,
    tree: BallTree,
    mask: np.ndarray,
    params: dc.ParamStore,
    prefix: str,
    heads: HeadsConfig,
    offsets: np.ndarray | None = None,
) -> BranchOutput:
    m = tree.m
    n = q.shape[0]
    if n % m:
        raise dc.ShapeError("local_attention", q.shape, detail=f"m={m}")
    slots = local_slots(n, m)
    if offsets is None:
        offsets = relative_offsets(positions_tree, m)
    hid = dc.gelu(dc.add(dc.matmul(dc.constant(offsets), params[f"{prefix}.loc.bias.w1"]), params[f"{prefix}.loc.bias.b1"]))
    bias = dc.add(dc.matmul(hid, params[f"{prefix}.loc.bias.w2"]), params[f"{prefix}.loc.bias.b2"])
    out, probs = dc.index_attention(q, k, v, slots, np.asarray(mask)[slots], heads.heads, bias=bias)
    return BranchOutput(out, probs, slots, n * m)


def gate_combine(
    x: dc.Tensor,
    outputs: dict[str, dc.Tensor],
    params: dc.ParamStore,
    prefix: str,
) -> tuple[dc.Tensor, np.ndarray]:
    """Sigmoid-gated sum of branch outputs, then the output projection."""
    shapes = {o.shape for o in outputs.values()}
    if len(shapes) != 1:
        raise dc.ShapeError("gate_combine", *shapes)
    gates = dc.sigmoid(dc.add(dc.matmul(x, params[f"{prefix}.gate.w"]), params[f"{prefix}.gate.b"]))
    acc = None
    for b, name in enumerate(BRANCHES):
        if name not in outputs:
            continue
        term = dc.mul(outputs[name], dc.slice_cols(gates, b, b + 1))
        acc = term if acc is None else dc.add(acc, term)
    return dc.matmul(acc, params[f"{prefix}.wo"]), gates.value


def nsa_attention(
    x: dc.Tensor,
    tree: BallTree,
    params: dc.ParamStore,
    prefix: str,
    heads: HeadsConfig,
    k: int,
    branches: tuple[str, ...] = BRANCHES,
    use_compressed_in_sum: bool = True,
    offsets: np.ndarray | None = None,
) -> NsaOutput:
    """Full three-branch layer on tree-ordered input ``x``."""
    if x.shape[0] != tree.n_padded:
        raise dc.ShapeError("nsa_attention", x.shape, detail=f"n_padded={tree.n_padded}")
    mask = tree.mask
    result = NsaOutput(value=None)
    summed: dict[str, dc.Tensor] = {}
    if "cmp" in branches or "sel" in branches:
        q, kk, vv = project_qkv(x, params, prefix, "cmp")
        comp = compress_balls(kk, vv, tree.positions, tree, params, prefix)
        cmp_out = compressed_attention(q, comp.k, comp.v, comp.ball_mask, heads)
        result.branches["cmp"] = cmp_out
        if "cmp" in branches and use_compressed_in_sum:
            summed["cmp"] = cmp_out.values
        if "sel" in branches:
            nb = tree.n_padded // tree.c
            own = np.arange(tree.n_padded) // tree.c
            result.selection = select_topk(cmp_out.probs, min(k, nb), own)
            q, kk, vv = project_qkv(x, params, prefix, "sel")
            sel_out = selected_attention(q, kk, vv, result.selection, tree, mask, heads)
            result.branches["sel"] = sel_out
            summed["sel"] = sel_out.values
    if "loc" in branches:
        q, kk, vv = project_qkv(x, params, prefix, "loc")
        loc_out = local_attention(q, kk, vv, tree.positions, tree, mask, params, prefix, heads, offsets)
        result.branches["loc"] = loc_out
        summed["loc"] = loc_out.values
    if not summed:
        raise ValueError("no attention branch contributes to the output")
    result.value, result.gates = gate_combine(x, summed, params, prefix)
    return result
