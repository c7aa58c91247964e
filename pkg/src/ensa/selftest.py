"""Quick correctness checks: finite-difference gradients plus the loop oracles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import reference as ref
from .attention import HeadsConfig, Selection, local_attention, score_eval_count, select_topk, selected_attention
from .balltree import PointCloud, build_ball_tree
from .data import toy_cloud
from .embedder import build_knn_graph
from .model import Model, NsaConfig, model_forward, mse_loss, prepare


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def toy_grad_check(hidden: int = 16, heads: int = 2, depth: int = 2, seed: int = 0) -> dc.GradCheckReport:
    """Finite-difference check of every parameter on the 16-node toy line."""
    cloud = toy_cloud(16, seed=seed)
    cfg = NsaConfig(m=8, c=4, k=2, depth=depth, hidden=hidden, heads=heads, knn_k=3, seed=seed)
    model = Model.create(cfg)
    prep = prepare(cloud, cfg)
    return dc.grad_check(lambda store: mse_loss(model_forward(cloud, cfg, store, prep).pred, cloud.targets), model.params)


def random_attention_instance(n: int, rng: np.random.Generator, hidden: int = 8, heads: int = 2, c: int = 4):
    """Random q/k/v in tree order of a random cloud of ``n`` points."""
    pos = rng.normal(size=(n, 3))
    tree = build_ball_tree(pos, c, c)
    q, k, v = (rng.normal(size=(tree.n_padded, hidden)) for _ in range(3))
    return tree, q, k, v, HeadsConfig.from_hidden(hidden, heads)


def attention_oracle_error(n: int, rng: np.random.Generator) -> float:
    tree, q, k, v, heads = random_attention_instance(n, rng)
    nb = tree.n_padded // tree.c
    sel = Selection(np.broadcast_to(np.arange(nb), (tree.n_padded, nb)).copy())
    with dc.no_grad():
        out = selected_attention(dc.constant(q), dc.constant(k), dc.constant(v), sel, tree, tree.mask, heads)
    expect = ref.dense_attention(q, k, v, heads.heads, tree.mask)
    return float(np.abs(out.values.value - expect)[tree.mask].max())


def local_oracle_error(n: int, rng: np.random.Generator) -> float:
    """Local attention with one ball spanning the cloud and a zero bias."""
    pos = rng.normal(size=(n, 3))
    m = 1 << (n - 1).bit_length()
    tree = build_ball_tree(pos, m, m)
    hidden, nh = 8, 2
    q, k, v = (rng.normal(size=(tree.n_padded, hidden)) for _ in range(3))
    store = dc.ParamStore()
    store.add("t.loc.bias.w1", rng.normal(size=(3, 4)))
    store.add("t.loc.bias.b1", np.zeros((1, 4)))
    store.add("t.loc.bias.w2", np.zeros((4, nh)))
    store.add("t.loc.bias.b2", np.zeros((1, nh)))
    with dc.no_grad():
        out = local_attention(
            dc.constant(q), dc.constant(k), dc.constant(v), tree.positions, tree, tree.mask, store, "t", HeadsConfig.from_hidden(hidden, nh)
        )
    expect = ref.dense_attention(q, k, v, nh, tree.mask)
    return float(np.abs(out.values.value - expect)[tree.mask].max())


def selection_mismatches(trials: int, rng: np.random.Generator) -> int:
    bad = 0
    for _ in range(trials):
        n, nb = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        k = int(rng.integers(1, nb + 1))
        # coarse values force plenty of ties
        probs = rng.integers(0, 4, size=(n, 2, nb)).astype(np.float64) / 4.0
        own = rng.integers(0, nb, size=n)
        got = select_topk(probs, k, own).indices
        scores = probs.sum(axis=1)
        for i in range(n):
            if list(got[i]) != ref.topk_with_own(list(scores[i]), k, int(own[i])):
                bad += 1
    return bad


def run(report: Callable[[str], None] | None = print, quick: bool = True, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def record(name, passed, detail=""):
        results.append(CheckResult(name, bool(passed), detail))
        if report is not None:
            report(f"{'PASS' if passed else 'FAIL'} {name} {detail}".rstrip())

    gc = toy_grad_check(hidden=8 if quick else 16, depth=1 if quick else 2, seed=seed)
    record("grad_check", gc.passed, f"worst={gc.worst:.2e} params={len(gc.max_rel_error)}")

    errs = [attention_oracle_error(int(n), rng) for n in (16, 32, 64)]
    record("selected_vs_dense", max(errs) <= 1e-10, f"max_abs={max(errs):.2e}")
    errs = [local_oracle_error(int(n), rng) for n in (16, 32, 64)]
    record("local_vs_dense", max(errs) <= 1e-10, f"max_abs={max(errs):.2e}")

    bad = selection_mismatches(200, rng)
    record("select_topk", bad == 0, f"mismatched_rows={bad}")

    bad = 0
    for n in (5, 16, 37, 64):
        pos = rng.normal(size=(n, 3))
        for m, c in ((4, 4), (8, 4), (4, 8)):
            bad += list(build_ball_tree(pos, m, c).perm) != ref.ball_tree_order(pos, m, c)
    record("ball_tree", bad == 0, f"mismatched_trees={bad}")

    pos = rng.integers(0, 3, size=(40, 3)).astype(np.float64)
    ok = (build_knn_graph(PointCloud(pos, pos), 6).neighbors == ref.knn(pos, 6)).all()
    record("knn", ok)

    ok = all(score_eval_count(n, m, c, k) == ref.score_evals(n, m, c, k) for n, m, c, k in ((64, 8, 4, 2), (256, 32, 16, 4)))
    record("score_eval_count", ok)
    return results
