"""Slow, loop-based oracles used by the self-test and the test suite.

Each function recomputes a quantity from its definition without sharing
code paths with the vectorised implementation it checks.
"""

from __future__ import annotations

import math

import numpy as np


def dense_attention(q, k, v, heads: int, valid=None) -> np.ndarray:
    """Per-query, per-head softmax attention over every valid key row."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    n, hidden = q.shape
    d = hidden // heads
    valid = np.ones(k.shape[0], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    keys = [j for j in range(k.shape[0]) if valid[j]]
    out = np.zeros((n, hidden))
    for i in range(n):
        for h in range(heads):
            cols = slice(h * d, (h + 1) * d)
            logits = [float(q[i, cols] @ k[j, cols]) / math.sqrt(d) for j in keys]
            top = max(logits)
            weights = [math.exp(s - top) for s in logits]
            total = sum(weights)
            for w, j in zip(weights, keys):
                out[i, cols] += (w / total) * v[j, cols]
    return out


def topk_with_own(scores_row, k: int, own: int) -> list[int]:
    """Highest ``k`` scores, ties to the lower index, own ball forced in."""
    ranked = sorted(range(len(scores_row)), key=lambda j: (-scores_row[j], j))[:k]
    if own not in ranked:
        ranked[-1] = own
    return sorted(ranked)


def knn(positions, k: int) -> np.ndarray:
    """k nearest other points, ordered by (squared distance, index)."""
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        cand = [(float(((pos[i] - pos[j]) ** 2).sum()), j) for j in range(n) if j != i]
        out[i] = [j for _, j in sorted(cand)[:k]]
    return out


def neighbor_fraction(positions, radius: float) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    out = np.zeros((n, 1))
    for i in range(n):
        count = sum(1 for j in range(n) if j != i and ((pos[i] - pos[j]) ** 2).sum() <= radius * radius)
        out[i, 0] = count / max(n - 1, 1)
    return out


def ball_tree_order(positions, m: int, c: int) -> list[int]:
    """Recursive median-split order of the padded cloud.

    Nodes larger than lcm(m, c) split at a multiple of lcm(m, c), larger half
    first; smaller nodes halve down to min(m, c). The split axis is the widest
    extent (lowest axis on ties), points sorted by (coordinate, index).
    """
    pos = [tuple(float(x) for x in p) for p in np.asarray(positions)]
    unit = math.lcm(m, c)
    total = -(-len(pos) // unit) * unit
    pos += [pos[-1]] * (total - len(pos))
    leaf = min(m, c)

    def rec(idx: list[int]) -> list[int]:
        size = len(idx)
        if size <= leaf:
            return sorted(idx)
        if size > unit:
            q = size // unit
            left = (q - q // 2) * unit
        else:
            left = size // 2
        extents = [max(pos[i][a] for i in idx) - min(pos[i][a] for i in idx) for a in range(3)]
        axis = extents.index(max(extents))
        ranked = sorted(idx, key=lambda i: (pos[i][axis], i))
        return rec(ranked[:left]) + rec(ranked[left:])

    return rec(list(range(total)))


def score_evals(n_padded: int, m: int, c: int, k: int) -> int:
    """Count query-key dot products one at a time."""
    total = 0
    for _ in range(n_padded):
        total += n_padded // c  # one per compressed ball
        total += k * c  # every slot of each selected ball
        total += m  # every slot of the local ball
    return total


def matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            out[i, j] = math.fsum(a[i, t] * b[t, j] for t in range(a.shape[1]))
    return out


def gelu(x: float) -> float:
    """tanh approximation."""
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def layernorm_row(row, gain=None, bias=None, eps: float = 1e-5) -> list[float]:
    n = len(row)
    mean = math.fsum(row) / n
    var = math.fsum((x - mean) ** 2 for x in row) / n
    out = [(x - mean) / math.sqrt(var + eps) for x in row]
    if gain is not None:
        out = [o * g for o, g in zip(out, gain)]
    if bias is not None:
        out = [o + b for o, b in zip(out, bias)]
    return out


def mlp2(x, w1, b1, w2, b2) -> np.ndarray:
    hidden = matmul(np.atleast_2d(x), w1) + b1
    hidden = np.vectorize(gelu)(hidden)
    return matmul(hidden, w2) + b2


def mpnn_embed(positions, features, neighbors, params: dict) -> np.ndarray:
    """Mean over neighbours of msg([f_j, p_j - p_i]), then upd([f_i, mean])."""
    pos = np.asarray(positions, dtype=np.float64)
    feats = np.asarray(features, dtype=np.float64)
    n = pos.shape[0]
    msg = [params[f"embed.msg.{k}"] for k in ("w1", "b1", "w2", "b2")]
    upd = [params[f"embed.upd.{k}"] for k in ("w1", "b1", "w2", "b2")]
    out = []
    for i in range(n):
        rows = [mlp2(np.concatenate([feats[j], pos[j] - pos[i]]), *msg)[0] for j in neighbors[i]]
        agg = np.sum(rows, axis=0) / len(rows)
        out.append(mlp2(np.concatenate([feats[i], agg]), *upd)[0])
    return np.array(out)


def masked_ball_mean(x, mask, c: int) -> np.ndarray:
    """Mean of the unmasked rows of each run of ``c`` rows (zero if none)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((x.shape[0] // c, x.shape[1]))
    for b in range(out.shape[0]):
        rows = [x[s] for s in range(b * c, (b + 1) * c) if mask[s]]
        if rows:
            out[b] = np.sum(rows, axis=0) / len(rows)
    return out


def gate_combine(x, outputs: dict, wg, bg, wo, order=("cmp", "sel", "loc")) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n, hidden = x.shape
    logits = matmul(x, wg) + bg
    acc = np.zeros((n, hidden))
    for i in range(n):
        for b, name in enumerate(order):
            if name in outputs:
                gate = 1.0 / (1.0 + math.exp(-logits[i, b]))
                acc[i] += gate * np.asarray(outputs[name])[i]
    return matmul(acc, wo)


def mse(pred, target) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    return math.fsum(float(d) ** 2 for d in (pred - target).ravel()) / pred.size
