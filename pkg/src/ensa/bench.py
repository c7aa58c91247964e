"""Throughput, memory, complexity scaling and influence (receptive field) measurements."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .attention import NsaOutput, nsa_attention, relative_offsets, score_eval_count
from .balltree import PointCloud, build_ball_tree
from .model import Model, NsaConfig, Prepared, TrainConfig, fit, init_params, model_forward, mse_loss, prepare

INFLUENCE_THRESHOLD = 1e-12


@dataclass
class InfluenceMap:
    target: int
    values: np.ndarray  # one entry per real input node
    slot_values: np.ndarray  # same quantity at the tree-ordered embedding, padding included
    slot_mask: np.ndarray
    threshold: float = INFLUENCE_THRESHOLD

    @property
    def influenced(self) -> int:
        return int((self.values > self.threshold).sum())

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.values > self.threshold)

    @property
    def padding_influence(self) -> np.ndarray:
        return self.slot_values[~self.slot_mask]

    def histogram(self, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
        """Counts over log10(influence) of influenced nodes."""
        v = self.values[self.values > self.threshold]
        if v.size == 0:
            return np.zeros(bins, dtype=int), np.linspace(0.0, 1.0, bins + 1)
        return np.histogram(np.log10(v), bins=bins)


def influence(
    model: Model,
    cloud: PointCloud,
    target: int,
    prep: Prepared | None = None,
    bypass_embed: bool = False,
) -> InfluenceMap:
    """Per-node L2 norm of d||y_target||^2 / d x_i over input features."""
    if not 0 <= target < cloud.n:
        raise IndexError(f"target node {target} out of range for {cloud.n} points")
    prep = prep or model.prepare(cloud)
    feats = dc.Tensor(cloud.features, requires_grad=True)
    res = model.forward(cloud, prep, features=feats, bypass_embed=bypass_embed)
    loss = dc.sum_all(dc.square(dc.gather_rows(res.pred, np.array([target]))))
    dc.backward(loss, accumulate=True)
    model.params.zero_grad()
    g = feats.grad if feats.grad is not None else np.zeros(cloud.features.shape)
    sg = res.tree_input.grad if res.tree_input.grad is not None else np.zeros(res.tree_input.shape)
    return InfluenceMap(
        target=target,
        values=np.linalg.norm(g, axis=1),
        slot_values=np.linalg.norm(sg, axis=1),
        slot_mask=prep.trees.main.mask,
    )


@dataclass
class ThroughputReport:
    steps_per_sec: float
    peak_bytes: int
    step_times: list[float]


def measure_throughput(model: Model, dataset: Sequence[PointCloud], steps: int, warmup: int = 3) -> ThroughputReport:
    """Median training-step rate and tensor-allocation high-water mark.

    Runs on a copy of the parameters so the model is left untouched.
    """
    if steps < 10:
        raise ValueError("need at least 10 timed steps")
    if not dataset:
        raise ValueError("empty dataset")
    config = model.config
    params = model.params.copy()
    prepared = [prepare(c, config) for c in dataset]

    def loss_fn(store, step):
        i = step % len(dataset)
        return mse_loss(model_forward(dataset[i], config, store, prepared[i]).pred, dataset[i].targets)

    records = fit(loss_fn, params, TrainConfig(steps=warmup + steps))[warmup:]
    times = [1.0 / r.steps_per_sec for r in records]
    return ThroughputReport(
        steps_per_sec=1.0 / float(np.median(times)),
        peak_bytes=max(r.peak_bytes for r in records),
        step_times=times,
    )


# ---------------------------------------------------------------------------
# complexity scaling


def nearest_power_of_two(x: float) -> int:
    lo = 2 ** max(0, math.floor(math.log2(x)))
    hi = lo * 2
    return lo if x - lo <= hi - x else hi


def asymptotic_count_exponent(c_exponent: Fraction = Fraction(1, 2)) -> Fraction:
    """Growth exponent of n*(n/c + k*c + m) when c ~ n**c_exponent and k, m are fixed."""
    c_exponent = Fraction(c_exponent)
    return max(2 - c_exponent, 1 + c_exponent, Fraction(1))


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)[0])


@dataclass
class ScalingReport:
    sizes: list[int]
    times: list[float]
    counts: list[int]
    c_values: list[int] = field(default_factory=list)
    label: str = "nsa"
    deterministic: bool = False

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sizes must be strictly increasing")

    @property
    def time_slope(self) -> float:
        return loglog_slope(self.sizes, self.times)

    @property
    def count_slope(self) -> float:
        return loglog_slope(self.sizes, self.counts)


def _random_cloud(n: int, rng: np.random.Generator) -> PointCloud:
    pos = rng.uniform(-1.0, 1.0, size=(n, 3))
    return PointCloud(pos, pos.copy())


def _best_time(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def scaling_sweep(template: NsaConfig, sizes: Sequence[int], repeats: int = 3, seed: int = 0) -> ScalingReport:
    """Forward time and score-evaluation count of one NSA layer per cloud size.

    ``c`` is reset to the power of two nearest sqrt(n); ``k`` and ``m`` stay
    fixed. Tree construction is excluded from the timing.
    """
    sizes = list(sizes)
    if len(sizes) < 4:
        raise ValueError("need at least 4 sizes")
    if any(n & (n - 1) or n < 1 for n in sizes):
        raise ValueError("sizes must be powers of two")
    rng = np.random.default_rng(seed)
    times, counts, cs = [], [], []
    for n in sizes:
        c = nearest_power_of_two(math.sqrt(n))
        cfg = replace(template, c=c, depth=1)
        tree = build_ball_tree(_random_cloud(n, rng), cfg.m, c)
        params = init_params(cfg, seed)
        x = dc.constant(rng.normal(size=(tree.n_padded, cfg.hidden)))
        offsets = relative_offsets(tree.positions, cfg.m)
        heads = cfg.heads_config
        k = min(cfg.k, tree.n_padded // c)
        out: list[NsaOutput] = []

        def run():
            with dc.no_grad():
                out.append(nsa_attention(x, tree, params, "blk0", heads, k, cfg.branch_tuple, cfg.use_compressed_in_sum, offsets))

        times.append(_best_time(run, repeats))
        counts.append(out[-1].score_evals)
        cs.append(c)
    return ScalingReport(sizes, times, counts, cs, label="nsa")


def dense_attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int, chunk: int = 512) -> np.ndarray:
    """Plain full softmax attention over all rows, computed in query chunks."""
    n, hidden = q.shape
    d = hidden // heads
    out = np.empty_like(q)
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        kh, vh = k[:, cols], v[:, cols]
        for s in range(0, n, chunk):
            logits = q[s : s + chunk, cols] @ kh.T / math.sqrt(d)
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            out[s : s + chunk, cols] = p @ vh
    return out


def dense_scaling_sweep(hidden: int, heads: int, sizes: Sequence[int], repeats: int = 3, seed: int = 0) -> ScalingReport:
    rng = np.random.default_rng(seed)
    times, counts = [], []
    for n in sizes:
        q, k, v = (rng.normal(size=(n, hidden)) for _ in range(3))
        times.append(_best_time(lambda: dense_attention_reference(q, k, v, heads), repeats))
        counts.append(n * n)
    return ScalingReport(list(sizes), times, counts, label="dense")


# ---------------------------------------------------------------------------
# CSV export


def write_influence_csv(path, cloud: PointCloud | None, imap: InfluenceMap | None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "x", "y", "z", "influence"])
        if cloud is None or imap is None:
            return
        for i in range(cloud.n):
            x, y, z = cloud.positions[i]
            w.writerow([i, repr(float(x)), repr(float(y)), repr(float(z)), repr(float(imap.values[i]))])


def write_scaling_csv(path, report: ScalingReport | None) -> None:
    with open(path, "w", newline="") as fh:
        if report is not None:
            fh.write(f"# label={report.label} deterministic={int(report.deterministic)}\n")
        w = csv.writer(fh)
        w.writerow(["n", "time", "count"])
        if report is None:
            return
        for n, t, c in zip(report.sizes, report.times, report.counts):
            w.writerow([n, repr(float(t)), c])


def access_pattern(out: NsaOutput, mask: np.ndarray) -> list[tuple[str, int, int, float]]:
    """(branch, query, key, weight) for every unmasked key a real query scores.

    Compressed keys are ball indices; selected and local keys are tree slots.
    Weights are attention probabilities averaged over heads.
    """
    rows = []
    for name in ("cmp", "sel", "loc"):
        br = out.branches.get(name)
        if br is None:
            continue
        weights = br.probs.mean(axis=1)
        for q in np.flatnonzero(mask):
            for j, key in enumerate(br.keys[q]):
                if name != "cmp" and not mask[key]:
                    continue
                if name == "cmp" and weights[q, j] == 0.0:
                    continue
                rows.append((name, int(q), int(key), float(weights[q, j])))
    return rows


def write_access_pattern_csv(path, rows: Sequence[tuple[str, int, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["branch", "query", "key", "weight"])
        for name, q, key, weight in rows:
            w.writerow([name, q, key, repr(weight)])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def toy_access_pattern(seed: int = 0) -> tuple[list[tuple[str, int, int, float]], NsaOutput]:
    """Key-query access of the 16-node line with c=4, m=8, k=1."""
    from .data import toy_cloud

    cloud = toy_cloud(16)
    cfg = NsaConfig(m=8, c=4, k=1, depth=1, hidden=16, heads=2, knn_k=2, seed=seed)
    model = Model.create(cfg)
    prep = model.prepare(cloud)
    with dc.no_grad():
        res = model.forward(cloud, prep)
    block = res.blocks[0]
    return access_pattern(block, prep.trees.main.mask), block


def export_figures_data(
    out_dir,
    cloud: PointCloud | None = None,
    imap: InfluenceMap | None = None,
    scaling: ScalingReport | None = None,
    access_rows: Sequence[tuple[str, int, int, float]] = (),
) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "influence": out_dir / "influence.csv",
        "scaling": out_dir / "scaling.csv",
        "access_pattern": out_dir / "access_pattern.csv",
    }
    write_influence_csv(paths["influence"], cloud, imap)
    write_scaling_csv(paths["scaling"], scaling)
    write_access_pattern_csv(paths["access_pattern"], access_rows)
    return paths

