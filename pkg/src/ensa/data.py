"""Synthetic point-cloud tasks and the CSV / EPCD file formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .balltree import PointCloud

TASKS = ("local-density", "global-centroid-offset", "mixed")


class ParseError(ValueError):
    def __init__(self, message: str, offset: int = 0, path=None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str = "global-centroid-offset"
    n: int = 256
    clusters: int = 2
    noise_sigma: float = 0.1
    seed: int = 0
    radius: float = 0.2
    box: float = 1.0
    centers: tuple | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not self.n >= self.clusters >= 1:
            raise ValueError(f"need n >= clusters >= 1, got n={self.n}, clusters={self.clusters}")
        if self.centers is not None and np.shape(self.centers) != (self.clusters, 3):
            raise ValueError(f"centers must be {self.clusters} x 3")

    @property
    def target_width(self) -> int:
        return {"local-density": 1, "global-centroid-offset": 3, "mixed": 4}[self.task]


def density_targets(positions: np.ndarray, radius: float) -> np.ndarray:
    """Fraction of the other points within ``radius`` of each point."""
    n = positions.shape[0]
    diff = positions[:, None, :] - positions[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    counts = (d2 <= radius * radius).sum(axis=1) - 1
    return (counts / max(n - 1, 1)).reshape(n, 1).astype(np.float64)


def centroid_offset_targets(positions: np.ndarray, labels: np.ndarray, clusters: int) -> np.ndarray:
    """Vector from each point to the centroid of the blob farthest from it."""
    cents = np.stack([positions[labels == b].mean(axis=0) for b in range(clusters)])
    dist = np.linalg.norm(positions[:, None, :] - cents[None, :, :], axis=2)
    far = np.argmax(dist, axis=1)  # first maximum on ties
    return cents[far] - positions


def _sample(spec: SyntheticTaskSpec, index: int) -> PointCloud:
    rng = np.random.default_rng([spec.seed, index])
    if spec.centers is not None:
        centers = np.asarray(spec.centers, dtype=np.float64)
    else:
        centers = rng.uniform(-spec.box, spec.box, size=(spec.clusters, 3))
    sizes = np.full(spec.clusters, spec.n // spec.clusters)
    sizes[: spec.n % spec.clusters] += 1
    labels = np.repeat(np.arange(spec.clusters), sizes)
    positions = centers[labels] + spec.noise_sigma * rng.normal(size=(spec.n, 3))
    order = rng.permutation(spec.n)
    positions, labels = positions[order], labels[order]
    parts = []
    if spec.task in ("local-density", "mixed"):
        parts.append(density_targets(positions, spec.radius))
    if spec.task in ("global-centroid-offset", "mixed"):
        parts.append(centroid_offset_targets(positions, labels, spec.clusters))
    return PointCloud(positions, positions.copy(), np.concatenate(parts, axis=1))


def generate(spec: SyntheticTaskSpec, count: int) -> list[PointCloud]:
    """``count`` clouds; sample ``i`` is seeded by ``(spec.seed, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [_sample(spec, i) for i in range(count)]


# ---------------------------------------------------------------------------
# CSV: header x,y,z,f1..fF[,t1..tT]


def save_cloud_csv(path, cloud: PointCloud, digits: int = 17) -> None:
    f = cloud.features.shape[1]
    t = 0 if cloud.targets is None else cloud.targets.shape[1]
    header = ["x", "y", "z"] + [f"f{i + 1}" for i in range(f)] + [f"t{i + 1}" for i in range(t)]
    blocks = [cloud.positions, cloud.features] + ([cloud.targets] if t else [])
    table = np.concatenate(blocks, axis=1)
    fmt = f"%.{digits}g"
    lines = [",".join(header)] + [",".join(fmt % v for v in row) for row in table]
    Path(path).write_text("\n".join(lines) + "\n")


def load_cloud_csv(path) -> PointCloud:
    text = Path(path).read_bytes().decode("utf-8")
    lines = text.split("\n")
    header = [h.strip() for h in lines[0].split(",")]
    nf = sum(h.startswith("f") for h in header)
    nt = sum(h.startswith("t") for h in header)
    expected = ["x", "y", "z"] + [f"f{i + 1}" for i in range(max(nf, 1))] + [f"t{i + 1}" for i in range(nt)]
    for col in expected:
        if col not in header:
            raise ParseError(f"missing column {col!r}", 0, path)
    if header != expected:
        extra = [h for h in header if h not in expected]
        raise ParseError(f"unexpected column {extra[0]!r}" if extra else "columns out of order", 0, path)
    rows = []
    offset = len(lines[0].encode()) + 1
    for line in lines[1:]:
        if line.strip():
            fields = line.split(",")
            if len(fields) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(fields)}", offset, path)
            try:
                rows.append([float(v) for v in fields])
            except ValueError as exc:
                raise ParseError(str(exc), offset, path) from None
        offset += len(line.encode()) + 1
    if not rows:
        raise ParseError("no data rows", offset, path)
    table = np.array(rows, dtype=np.float64)
    targets = table[:, 3 + nf :] if nt else None
    return PointCloud(table[:, :3], table[:, 3 : 3 + nf], targets)


# ---------------------------------------------------------------------------
# binary: "EPCD", n, F, T (u32), then positions/features/targets as LE float32

_MAGIC = b"EPCD"
_HEADER = struct.Struct("<4sIII")


def save_cloud_bin(path, cloud: PointCloud) -> None:
    t = 0 if cloud.targets is None else cloud.targets.shape[1]
    parts = [_HEADER.pack(_MAGIC, cloud.n, cloud.features.shape[1], t)]
    for arr in (cloud.positions, cloud.features) + ((cloud.targets,) if t else ()):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_cloud_bin(path) -> PointCloud:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise ParseError("truncated header", len(buf), path)
    magic, n, f, t = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0, path)
    off = _HEADER.size
    out = []
    for cols in (3, f, t):
        size = n * cols * 4
        if off + size > len(buf):
            raise ParseError(f"truncated payload: need {size} bytes", off, path)
        out.append(np.frombuffer(buf, dtype="<f4", count=n * cols, offset=off).reshape(n, cols).astype(np.float64))
        off += size
    if off != len(buf):
        raise ParseError(f"{len(buf) - off} trailing bytes", off, path)
    return PointCloud(out[0], out[1], out[2] if t else None)


def save_dataset(directory, clouds: Sequence[PointCloud], fmt: str = "epcd") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    writer = {"epcd": save_cloud_bin, "csv": save_cloud_csv}[fmt]
    paths = []
    for i, cloud in enumerate(clouds):
        p = directory / f"sample_{i:05d}.{fmt}"
        writer(p, cloud)
        paths.append(p)
    return paths


def load_dataset(directory) -> list[PointCloud]:
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix in (".epcd", ".csv"))
    if not files:
        raise FileNotFoundError(f"no .epcd or .csv files in {directory}")
    return [load_cloud_bin(p) if p.suffix == ".epcd" else load_cloud_csv(p) for p in files]


def toy_cloud(n: int = 16, targets: int = 3, seed: int = 0) -> PointCloud:
    """``n`` collinear points at x = 0..n-1 with their positions as features."""
    pos = np.zeros((n, 3))
    pos[:, 0] = np.arange(n)
    rng = np.random.default_rng(seed)
    return PointCloud(pos, pos.copy(), rng.normal(size=(n, targets)))
