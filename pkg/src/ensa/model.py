"""Embedder + stacked NSA blocks + linear readout, and its training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .attention import BRANCHES, HeadsConfig, NsaOutput, init_attention_params, nsa_attention, relative_offsets
from .balltree import PointCloud, TreeSet, build_tree_set, is_power_of_two, scatter_from_tree
from .embedder import KnnGraph, build_knn_graph, init_embedder_params, mpnn_embed


@dataclass(frozen=True)
class NsaConfig:
    m: int = 128
    c: int = 32
    k: int = 16
    depth: int = 4
    hidden: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    knn_k: int = 8
    seed: int = 0
    use_compressed_in_sum: bool = True
    branches: str = "cmp,sel,loc"
    bias_hidden: int = 16
    in_features: int = 3
    out_features: int = 3

    def __post_init__(self):
        if not (is_power_of_two(self.m) and is_power_of_two(self.c)):
            raise ValueError(f"m and c must be powers of two (m={self.m}, c={self.c})")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.heads < 1 or self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        bad = set(self.branch_tuple) - set(BRANCHES)
        if bad or not self.branch_tuple:
            raise ValueError(f"branches must be a non-empty subset of {BRANCHES}, got {self.branches!r}")

    @property
    def branch_tuple(self) -> tuple[str, ...]:
        return tuple(b.strip() for b in self.branches.split(",") if b.strip())

    @property
    def heads_config(self) -> HeadsConfig:
        return HeadsConfig.from_hidden(self.hidden, self.heads)

    def local_only(self) -> "NsaConfig":
        return replace(self, branches="loc")


# Reference hyperparameters per domain; heads chosen for a head width of 16.
PRESETS: dict[str, dict] = {
    "cosmology": dict(m=128, c=32, k=16, depth=4, hidden=64, heads=4),
    "md": dict(m=32, c=32, k=16, depth=2, hidden=128, heads=8),
    "shapenet": dict(m=128, c=32, k=16, depth=6, hidden=64, heads=4),
}


def init_params(config: NsaConfig, seed: int | None = None) -> dc.ParamStore:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    store = dc.ParamStore()
    h = config.hidden
    init_embedder_params(store, config.in_features, h, rng)
    for i in range(config.depth):
        p = f"blk{i}"
        store.add(f"{p}.ln1.g", np.ones((1, h)))
        store.add(f"{p}.ln1.b", np.zeros((1, h)))
        init_attention_params(store, p, h, config.heads, rng, config.bias_hidden, config.branch_tuple)
        store.add(f"{p}.ln2.g", np.ones((1, h)))
        store.add(f"{p}.ln2.b", np.zeros((1, h)))
        wide = config.mlp_ratio * h
        store.add(f"{p}.mlp.w1", rng.normal(0.0, 1.0 / math.sqrt(h), size=(h, wide)))
        store.add(f"{p}.mlp.b1", np.zeros((1, wide)))
        store.add(f"{p}.mlp.w2", rng.normal(0.0, 1.0 / math.sqrt(wide), size=(wide, h)))
        store.add(f"{p}.mlp.b2", np.zeros((1, h)))
    store.add("readout.w", rng.normal(0.0, 1.0 / math.sqrt(h), size=(h, config.out_features)))
    store.add("readout.b", np.zeros((1, config.out_features)))
    return store


@dataclass
class Prepared:
    """Geometry derived from one cloud; independent of parameters."""

    cloud: PointCloud
    graph: KnnGraph
    trees: TreeSet
    offsets: tuple[np.ndarray, np.ndarray]
    to_rotated: np.ndarray
    from_rotated: np.ndarray


def prepare(cloud: PointCloud, config: NsaConfig, rotation: np.ndarray | None = None) -> Prepared:
    trees = build_tree_set(cloud, config.m, config.c, rotation)
    main, rot = trees.main, trees.rotated
    graph = build_knn_graph(cloud, config.knn_k)
    return Prepared(
        cloud=cloud,
        graph=graph,
        trees=trees,
        offsets=(relative_offsets(main.positions, config.m), relative_offsets(rot.positions, config.m)),
        to_rotated=main.inv_perm[rot.perm],
        from_rotated=rot.inv_perm[main.perm],
    )


def _mlp(x: dc.Tensor, params: dc.ParamStore, p: str) -> dc.Tensor:
    h = dc.gelu(dc.add(dc.matmul(x, params[f"{p}.w1"]), params[f"{p}.b1"]))
    return dc.add(dc.matmul(h, params[f"{p}.w2"]), params[f"{p}.b2"])


def block_forward(
    x: dc.Tensor,
    prep: Prepared,
    params: dc.ParamStore,
    index: int,
    config: NsaConfig,
) -> tuple[dc.Tensor, NsaOutput]:
    """Pre-norm block with exactly two residual additions.

    ``x`` is in main-tree order; odd blocks run on the rotated tree.
    """
    p = f"blk{index}"
    rotated = index % 2 == 1
    tree = prep.trees.for_block(index)
    h = dc.layernorm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
    if rotated:
        h = dc.gather_rows(h, prep.to_rotated)
    att = nsa_attention(
        h,
        tree,
        params,
        p,
        config.heads_config,
        config.k,
        branches=config.branch_tuple,
        use_compressed_in_sum=config.use_compressed_in_sum,
        offsets=prep.offsets[int(rotated)],
    )
    a = att.value
    if rotated:
        a = dc.gather_rows(a, prep.from_rotated)
    y = dc.add(x, a)
    z = dc.add(y, _mlp(dc.layernorm(y, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"]), params, f"{p}.mlp"))
    return z, att


@dataclass
class ForwardResult:
    pred: dc.Tensor
    tree_input: dc.Tensor
    blocks: list[NsaOutput] = field(default_factory=list)


def model_forward(
    cloud: PointCloud,
    config: NsaConfig,
    params: dc.ParamStore,
    prep: Prepared | None = None,
    features: dc.Tensor | None = None,
    bypass_embed: bool = False,
) -> ForwardResult:
    if cloud.features.shape[1] != config.in_features:
        raise ValueError(f"cloud has {cloud.features.shape[1]} features, config expects {config.in_features}")
    if prep is None:
        prep = prepare(cloud, config)
    emb = mpnn_embed(cloud, prep.graph, params, features=features, bypass=bypass_embed)
    main = prep.trees.main
    x = dc.gather_rows(emb, main.gather_index)
    result = ForwardResult(pred=None, tree_input=x)
    for i in range(config.depth):
        x, att = block_forward(x, prep, params, i, config)
        result.blocks.append(att)
    out = scatter_from_tree(main, x)
    result.pred = dc.add(dc.matmul(out, params["readout.w"]), params["readout.b"])
    return result


def mse_loss(pred, target) -> dc.Tensor:
    pred = pred if isinstance(pred, dc.Tensor) else dc.constant(pred)
    target = np.asarray(target.value if isinstance(target, dc.Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise dc.ShapeError("mse_loss", pred.shape, target.shape)
    return dc.mean_all(dc.square(dc.sub(pred, dc.constant(target))))


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0


class Adam:
    def __init__(self, store: dc.ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm: float | None = 1.0):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(v) for n, v in store.values.items()}
        self.v = {n: np.zeros_like(v) for n, v in store.values.items()}

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((g * g).sum()) for g in self.store.grads.values()))

    def step(self) -> float:
        norm = self.grad_norm()
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, value in self.store.values.items():
            g = self.store.grads[name] * factor
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            value -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        return norm


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class StepRecord:
    step: int
    loss: float
    steps_per_sec: float
    peak_bytes: int


def fit(
    loss_fn: Callable[[dc.ParamStore, int], dc.Tensor],
    params: dc.ParamStore,
    train: TrainConfig,
    on_step: Callable[[StepRecord], None] | None = None,
) -> list[StepRecord]:
    """Run ``train.steps`` Adam steps on ``loss_fn(params, step)``."""
    opt = Adam(params, train.lr, train.beta1, train.beta2, train.eps, train.clip_norm)
    records = []
    for step in range(train.steps):
        dc.MEMORY.reset_peak()
        t0 = time.perf_counter()
        params.zero_grad()
        try:
            loss = loss_fn(params, step)
            dc.backward(loss)
        except dc.NumericError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        value = float(loss.value[0, 0])
        if not math.isfinite(value):
            raise TrainingDiverged(f"step {step}: loss is {value}")
        del loss
        opt.step()
        dt = time.perf_counter() - t0
        rec = StepRecord(step, value, 1.0 / dt if dt > 0 else float("inf"), dc.MEMORY.peak)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    return records


@dataclass
class TrainReport:
    records: list[StepRecord]
    params: dc.ParamStore
    val_mse_init: float | None = None
    val_mse_final: float | None = None

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def steps_per_sec(self) -> float:
        rates = [r.steps_per_sec for r in self.records]
        return float(np.median(rates)) if rates else 0.0

    def to_csv(self, path) -> None:
        lines = ["step,loss,steps_per_sec,peak_bytes"]
        lines += [f"{r.step},{r.loss!r},{r.steps_per_sec:.6g},{r.peak_bytes}" for r in self.records]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def prepare_dataset(dataset: Sequence[PointCloud], config: NsaConfig) -> list[Prepared]:
    return [prepare(cloud, config) for cloud in dataset]


def evaluate(config: NsaConfig, params: dc.ParamStore, dataset: Sequence[PointCloud], prepared=None) -> float:
    """Mean per-cloud MSE without recording gradients."""
    if not dataset:
        raise ValueError("empty dataset")
    prepared = prepared or prepare_dataset(dataset, config)
    total = 0.0
    with dc.no_grad():
        for cloud, prep in zip(dataset, prepared):
            pred = model_forward(cloud, config, params, prep).pred
            total += float(mse_loss(pred, cloud.targets).value[0, 0])
    return total / len(dataset)


def train(
    config: NsaConfig,
    dataset: Sequence[PointCloud],
    settings: TrainConfig = TrainConfig(),
    params: dc.ParamStore | None = None,
    validation: Sequence[PointCloud] | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainReport:
    """Batch-size-one Adam training on per-point MSE."""
    if not dataset:
        raise ValueError("empty dataset")
    for cloud in dataset:
        if cloud.targets is None:
            raise ValueError("training clouds need targets")
    params = params if params is not None else init_params(config)
    prepared = prepare_dataset(dataset, config)
    val_prep = prepare_dataset(validation, config) if validation else None
    rng = np.random.default_rng(settings.seed)
    order: list[int] = []

    def loss_fn(store, step):
        if not order:
            order.extend(rng.permutation(len(dataset)).tolist())
        i = order.pop(0)
        pred = model_forward(dataset[i], config, store, prepared[i]).pred
        return mse_loss(pred, dataset[i].targets)

    report = TrainReport(records=[], params=params)
    if validation:
        report.val_mse_init = evaluate(config, params, validation, val_prep)
    report.records = fit(loss_fn, params, settings, on_step)
    if validation:
        report.val_mse_final = evaluate(config, params, validation, val_prep)
    return report


@dataclass
class Model:
    """A configuration bundled with its parameters."""

    config: NsaConfig
    params: dc.ParamStore

    @classmethod
    def create(cls, config: NsaConfig, seed: int | None = None) -> "Model":
        return cls(config, init_params(config, seed))

    def prepare(self, cloud: PointCloud) -> Prepared:
        return prepare(cloud, self.config)

    def forward(self, cloud: PointCloud, prep: Prepared | None = None, **kwargs) -> ForwardResult:
        return model_forward(cloud, self.config, self.params, prep, **kwargs)

    def predict(self, cloud: PointCloud, prep: Prepared | None = None) -> np.ndarray:
        with dc.no_grad():
            return self.forward(cloud, prep).pred.value
