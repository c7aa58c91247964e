"""Balanced ball-tree partitioning of point clouds.

Points are reordered so that every contiguous run of ``m`` (local) or ``c``
(compressed) slots in tree order is one spatial ball. Construction splits
each node at the median of its widest coordinate axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be n x 3, got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise ValueError("point cloud is empty")
        if not np.isfinite(self.positions).all():
            raise ValueError("positions must be finite")
        if self.features.ndim != 2 or self.features.shape[0] != self.n:
            raise ValueError(f"features must be {self.n} x F, got {self.features.shape}")
        if self.targets is not None and (self.targets.ndim != 2 or self.targets.shape[0] != self.n):
            raise ValueError(f"targets must be {self.n} x T, got {self.targets.shape}")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def permuted(self, order: np.ndarray) -> "PointCloud":
        t = None if self.targets is None else self.targets[order]
        return PointCloud(self.positions[order], self.features[order], t)


@dataclass(frozen=True)
class BallTree:
    """Tree order of a (padded) point cloud.

    ``perm[s]`` is the padded-cloud index stored at tree slot ``s``; values
    ``>= n`` are padding slots. ``inv_perm`` is the inverse permutation.
    """

    perm: np.ndarray
    inv_perm: np.ndarray
    n: int
    m: int
    c: int
    positions: np.ndarray  # tree order, n_padded x 3

    @property
    def n_padded(self) -> int:
        return self.perm.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return self.perm < self.n

    @property
    def gather_index(self) -> np.ndarray:
        return np.where(self.mask, self.perm, -1)

    def local_balls(self) -> np.ndarray:
        return self.perm.reshape(-1, self.m)

    def compressed_balls(self) -> np.ndarray:
        return self.perm.reshape(-1, self.c)


@dataclass(frozen=True)
class TreeSet:
    main: BallTree
    rotated: BallTree
    rotation: np.ndarray

    def for_block(self, i: int) -> BallTree:
        return self.main if i % 2 == 0 else self.rotated


def is_power_of_two(x: int) -> bool:
    return isinstance(x, (int, np.integer)) and x >= 1 and (x & (x - 1)) == 0


def padded_size(n: int, m: int, c: int) -> int:
    step = math.lcm(m, c)
    return -(-n // step) * step


def _split_sizes(size: int, unit: int, leaf: int) -> tuple[int, int] | None:
    if size <= leaf:
        return None
    if size > unit:
        q = size // unit
        left = (q - q // 2) * unit
        return left, size - left
    return size // 2, size // 2


def _order(positions: np.ndarray, unit: int, leaf: int) -> np.ndarray:
    out = np.empty(positions.shape[0], dtype=np.int64)
    stack = [(np.arange(positions.shape[0]), 0)]
    while stack:
        idx, start = stack.pop()
        sizes = _split_sizes(idx.size, unit, leaf)
        if sizes is None:
            out[start : start + idx.size] = np.sort(idx)
            continue
        pts = positions[idx]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        ranked = idx[np.lexsort((idx, pts[:, axis]))]
        left = sizes[0]
        stack.append((ranked[left:], start + left))
        stack.append((ranked[:left], start))
    return out


def build_ball_tree(cloud: PointCloud | np.ndarray, m: int, c: int) -> BallTree:
    positions = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[0] == 0:
        raise ValueError("cannot build a ball tree on an empty cloud")
    if not (is_power_of_two(m) and is_power_of_two(c)):
        raise ValueError(f"ball sizes must be powers of two, got m={m}, c={c}")
    n = positions.shape[0]
    n_pad = padded_size(n, m, c)
    padded = np.concatenate([positions, np.repeat(positions[-1:], n_pad - n, axis=0)])
    perm = _order(padded, math.lcm(m, c), min(m, c))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(n_pad)
    return BallTree(perm=perm, inv_perm=inv, n=n, m=m, c=c, positions=padded[perm])


def rotation_matrix(axis: str, degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    co, si = math.cos(a), math.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, co, -si], [0, si, co]])
    if axis == "y":
        return np.array([[co, 0, si], [0, 1, 0], [-si, 0, co]])
    if axis == "z":
        return np.array([[co, -si, 0], [si, co, 0], [0, 0, 1]])
    raise ValueError(f"unknown axis {axis!r}")


def default_rotation() -> np.ndarray:
    """45 degrees about x, then y, then z."""
    return rotation_matrix("z", 45) @ rotation_matrix("y", 45) @ rotation_matrix("x", 45)


def build_tree_set(cloud: PointCloud, m: int, c: int, rotation: np.ndarray | None = None) -> TreeSet:
    rot = default_rotation() if rotation is None else np.asarray(rotation, dtype=np.float64)
    if rot.shape != (3, 3) or np.abs(rot @ rot.T - np.eye(3)).max() > 1e-10:
        raise ValueError("rotation must be a 3x3 orthogonal matrix")
    main = build_ball_tree(cloud, m, c)
    rotated = build_ball_tree(cloud.positions @ rot.T, m, c)
    # keep rotated-tree positions in the original frame; the bias MLP sees offsets only
    rotated = BallTree(
        perm=rotated.perm,
        inv_perm=rotated.inv_perm,
        n=rotated.n,
        m=m,
        c=c,
        positions=rotated.positions @ rot,
    )
    return TreeSet(main=main, rotated=rotated, rotation=rot)


def gather_to_tree(tree: BallTree, features):
    """Reorder rows into tree order; padding slots become zero rows."""
    rows = features.shape[0]
    if rows != tree.n:
        raise ValueError(f"expected {tree.n} rows, got {rows}")
    if isinstance(features, dc.Tensor):
        return dc.gather_rows(features, tree.gather_index)
    features = np.asarray(features)
    out = np.zeros((tree.n_padded,) + features.shape[1:], dtype=features.dtype)
    out[tree.mask] = features[tree.perm[tree.mask]]
    return out


def scatter_from_tree(tree: BallTree, tree_features):
    """Inverse of :func:`gather_to_tree` on real rows; padding rows are dropped."""
    rows = tree_features.shape[0]
    if rows != tree.n_padded:
        raise ValueError(f"expected {tree.n_padded} rows, got {rows}")
    index = tree.inv_perm[: tree.n]
    if isinstance(tree_features, dc.Tensor):
        return dc.gather_rows(tree_features, index)
    return np.asarray(tree_features)[index]
