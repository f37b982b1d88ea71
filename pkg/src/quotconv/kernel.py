"""Rotation-symmetric kernel point sets and orbit-shared steerable weights.

The kernel point set is the solid's vertices at radius r plus the origin,
which is closed under the finite rotation group. Each group element then
permutes the kernel points, and the stabilizer's joint action on
(anchor, kernel-point) pairs partitions them into orbits. Storing one free
weight per orbit makes the steerability constraint hold exactly by
construction: expansion just reads the shared storage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, index_select, reshape
from .rotgroup import AnchorPermutationRep, FiniteRotationGroup, QuotientS2


class NotClosed(ValueError):
    """The kernel point set is not closed under the rotation group."""


@dataclass(frozen=True)
class KernelPoints:
    points: np.ndarray         # (K, 3)
    radius: float

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class KernelPermutationRep:
    """kperm[g][k] = index of elements[g] @ points[k]."""

    kperm: np.ndarray          # (G, K)


def build_kernel_points(quotient: QuotientS2, radius: float,
                        extra_points: np.ndarray | None = None) -> KernelPoints:
    """Vertices scaled to ``radius`` plus the origin (plus optional extras).

    Extra points allow edge/face-midpoint or multi-shell kernels; they must
    themselves be closed under the group or ``build_kernel_perm`` will raise.
    """
    if radius <= 0:
        raise ValueError(f"kernel radius must be positive, got {radius}")
    pts = [quotient.anchors * radius, np.zeros((1, 3))]
    if extra_points is not None:
        extra = np.asarray(extra_points, dtype=np.float64).reshape(-1, 3)
        pts.append(extra)
    points = np.concatenate(pts, axis=0)
    points.flags.writeable = False
    return KernelPoints(points=points, radius=float(radius))


def closure_error(points: KernelPoints, group: FiniteRotationGroup) -> float:
    """Max over elements of the set distance between rotated and original points."""
    worst = 0.0
    for m in group.elements:
        rotated = points.points @ m.T
        dists = np.linalg.norm(rotated[:, None, :] - points.points[None, :, :], axis=2)
        worst = max(worst, float(dists.min(axis=1).max()))
    return worst


def build_kernel_perm(points: KernelPoints, group: FiniteRotationGroup,
                      tol: float | None = None) -> KernelPermutationRep:
    """Match rotated kernel points back to the set; raises NotClosed otherwise."""
    if tol is None:
        tol = 1e-6 * points.radius
    order = group.order
    count = points.count
    kperm = np.empty((order, count), dtype=np.int64)
    for g in range(order):
        rotated = points.points @ group.elements[g].T
        dists = np.linalg.norm(rotated[:, None, :] - points.points[None, :, :], axis=2)
        within = dists < tol
        if not np.all(within.sum(axis=1) == 1):
            raise NotClosed(f"element {g}: rotated kernel point without a unique match")
        kperm[g] = np.argmin(dists, axis=1)
        if len(set(kperm[g])) != count:
            raise NotClosed(f"element {g}: kernel permutation is not a bijection")
    kperm.flags.writeable = False
    return KernelPermutationRep(kperm=kperm)


@dataclass(frozen=True)
class OrbitPartition:
    """Partition of (anchor, kernel-point) pairs under the stabilizer action."""

    orbit_of: np.ndarray       # (A, K) orbit id per pair
    sizes: np.ndarray          # (num_orbits,)

    @property
    def num_orbits(self) -> int:
        return len(self.sizes)


def compute_orbits(quotient: QuotientS2, anchor_perm: AnchorPermutationRep,
                   kperm_rep: KernelPermutationRep) -> OrbitPartition:
    """Union-find over the stabilizer's joint action on (anchor, kernel) pairs."""
    num_anchors = quotient.num_anchors
    count = kperm_rep.kperm.shape[1]
    total = num_anchors * count
    parent = np.arange(total)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[max(rx, ry)] = min(rx, ry)

    for h in quotient.stabilizer:
        pa = anchor_perm.perm[h]
        pk = kperm_rep.kperm[h]
        for a in range(num_anchors):
            for k in range(count):
                union(a * count + k, pa[a] * count + pk[k])

    roots = np.array([find(x) for x in range(total)])
    # Relabel orbit ids by first occurrence in flat (a, k) order.
    order_of_root: dict[int, int] = {}
    orbit_of = np.empty(total, dtype=np.int64)
    for x in range(total):
        r = roots[x]
        if r not in order_of_root:
            order_of_root[r] = len(order_of_root)
        orbit_of[x] = order_of_root[r]
    sizes = np.bincount(orbit_of)
    orbit_of = orbit_of.reshape(num_anchors, count)
    for arr in (orbit_of, sizes):
        arr.flags.writeable = False
    return OrbitPartition(orbit_of=orbit_of, sizes=sizes)


class OrbitKernel:
    """Steerable kernel stored as one free weight block per orbit.

    ``expand`` produces the full (A, K, C_in, C_out) kernel by reading the
    shared storage, so values across an orbit are bit-identical and gradients
    aggregate over orbit members automatically.
    """

    def __init__(self, orbits: OrbitPartition, c_in: int, c_out: int,
                 rng: np.random.Generator):
        self.orbits = orbits
        self.c_in = c_in
        self.c_out = c_out
        num_anchors, count = orbits.orbit_of.shape
        # Uniform init with variance 1 / (fan_in * expanded support).
        bound = np.sqrt(3.0 / (c_in * num_anchors * count))
        self.free_weights = Tensor(
            rng.uniform(-bound, bound, size=(orbits.num_orbits, c_in, c_out)),
            requires_grad=True)

    @property
    def expansion(self) -> np.ndarray:
        return self.orbits.orbit_of

    def expand(self) -> Tensor:
        """Dense kernel of shape (A, K, C_in, C_out)."""
        a, k = self.orbits.orbit_of.shape
        flat = index_select(self.free_weights, 0, self.orbits.orbit_of.reshape(-1))
        return reshape(flat, (a, k, self.c_in, self.c_out))


def expand_kernel(kernel: OrbitKernel) -> Tensor:
    return kernel.expand()
