"""Point-cloud containers, exact radius search, feature gathering, subsampling.

The radius search uses a uniform spatial hash grid with cell size equal to
the search radius, so only the 27 surrounding cells need scanning and the
result is exact. Feature gathering follows the kernel-point-convolution
pattern: features of neighboring input points are pulled to each kernel
point location with a linear distance weight w(d) = max(0, 1 - d/sigma).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .autograd import Tensor, as_tensor, reshape, sparse_gather


@dataclass
class PointCloud:
    positions: np.ndarray              # (N, 3)
    features: np.ndarray | None = None  # (N, C) raw or (N, A, C) lifted

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if len(self.positions) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")

    def __len__(self) -> int:
        return len(self.positions)


class NeighborIndex:
    """Per-query neighbor lists in CSR form, sorted by input index."""

    def __init__(self, offsets: np.ndarray, indices: np.ndarray, distances: np.ndarray):
        self.offsets = offsets
        self.indices = indices
        self.distances = distances

    @property
    def num_queries(self) -> int:
        return len(self.offsets) - 1

    def neighbors(self, q: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.offsets[q], self.offsets[q + 1]
        return self.indices[lo:hi], self.distances[lo:hi]

    def __len__(self) -> int:
        return self.num_queries


_CELL_BASE = np.int64(1) << 21


def _pack_cells(cells: np.ndarray, offset: np.ndarray) -> np.ndarray:
    c = cells + offset
    if c.min() < 0 or c.max() >= _CELL_BASE:
        raise ValueError("coordinate range too large for the hash grid")
    return (c[:, 0] * _CELL_BASE + c[:, 1]) * _CELL_BASE + c[:, 2]


def radius_neighbors(inputs: np.ndarray, queries: np.ndarray, radius: float) -> NeighborIndex:
    """Exact neighbor lists: all input points with distance <= radius.

    Uniform hash grid with cell size = radius; only the 27 surrounding cells
    of each query can contain neighbors. Fully vectorized: cells are packed
    into integer codes, candidates are pulled with ragged-range arithmetic,
    and the final lists are sorted by input index.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    inputs = np.asarray(inputs, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    n, q = len(inputs), len(queries)
    if n == 0 or q == 0:
        return NeighborIndex(offsets=np.zeros(q + 1, dtype=np.int64),
                             indices=np.empty(0, dtype=np.int64),
                             distances=np.empty(0))
    cells_in = np.floor(inputs / radius).astype(np.int64)
    cells_q = np.floor(queries / radius).astype(np.int64)
    offset = 2 - np.minimum(cells_in.min(axis=0), cells_q.min(axis=0))

    codes_in = _pack_cells(cells_in, offset)
    order = np.argsort(codes_in, kind="stable")
    sorted_codes = codes_in[order]
    uniq, starts = np.unique(sorted_codes, return_index=True)
    ends = np.append(starts[1:], n)

    shifts = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
                       for dz in (-1, 0, 1)], dtype=np.int64)
    ncodes = _pack_cells((cells_q[:, None, :] + shifts[None, :, :]).reshape(-1, 3),
                         offset)
    pos = np.searchsorted(uniq, ncodes)
    pos_safe = np.minimum(pos, len(uniq) - 1)
    found = (uniq[pos_safe] == ncodes) if len(uniq) else np.zeros(len(ncodes), bool)
    cnt = np.where(found, ends[pos_safe] - starts[pos_safe], 0)

    total = int(cnt.sum())
    first = np.where(found, starts[pos_safe], 0)
    group_start = np.concatenate([[0], np.cumsum(cnt)[:-1]])
    within = np.arange(total) - np.repeat(group_start, cnt)
    cand = order[np.repeat(first, cnt) + within]
    qrow = np.repeat(np.arange(q), cnt.reshape(q, 27).sum(axis=1))

    d = np.linalg.norm(queries[qrow] - inputs[cand], axis=1)
    keep = d <= radius
    qrow, cand, d = qrow[keep], cand[keep], d[keep]
    # per-query lists sorted by input index
    perm = np.lexsort((cand, qrow))
    qrow, cand, d = qrow[perm], cand[perm], d[perm]
    offsets = np.concatenate([[0], np.cumsum(np.bincount(qrow, minlength=q))])
    return NeighborIndex(offsets=offsets.astype(np.int64), indices=cand, distances=d)


def gather_weights(inputs: np.ndarray, locations: np.ndarray, radius: float,
                   sigma: float) -> tuple[scipy.sparse.csr_matrix, scipy.sparse.csr_matrix]:
    """Sparse (L, N) matrix of w(d) = max(0, 1 - d/sigma) plus its transpose."""
    nbr = radius_neighbors(inputs, locations, radius)
    w = np.maximum(0.0, 1.0 - nbr.distances / sigma)
    rows = np.repeat(np.arange(nbr.num_queries), np.diff(nbr.offsets))
    keep = w > 0.0
    mat = scipy.sparse.csr_matrix(
        (w[keep], (rows[keep], nbr.indices[keep])),
        shape=(len(locations), len(inputs)))
    return mat, mat.T.tocsr()


def gather_features(cloud, query_centers: np.ndarray, kernel_points: np.ndarray,
                    radius: float, sigma: float) -> Tensor:
    """Distance-weighted features at every kernel point of every center.

    ``cloud`` provides positions (N, 3) and lifted features (N, A, C); the
    result has shape (M, K, A, C). Empty neighborhoods contribute zeros.
    """
    positions = cloud.positions
    features = as_tensor(cloud.features if hasattr(cloud, "features") else cloud.values)
    if features.ndim != 3:
        raise ValueError(f"gather_features needs lifted (N, A, C) features, got {features.shape}")
    centers = np.asarray(query_centers, dtype=np.float64)
    kpts = np.asarray(kernel_points, dtype=np.float64)
    locations = (centers[:, None, :] + kpts[None, :, :]).reshape(-1, 3)
    mat, mat_t = gather_weights(positions, locations, radius, sigma)
    gathered = sparse_gather(features, mat, mat_t)
    m, k = len(centers), len(kpts)
    return reshape(gathered, (m, k) + features.shape[1:])


def grid_groups(positions: np.ndarray, cell: float) -> tuple[np.ndarray, np.ndarray]:
    """Assign each point to an occupied grid cell; cells ordered by their key.

    Returns (segment_ids (N,), centroids (S, 3)).
    """
    if cell <= 0:
        raise ValueError(f"cell must be positive, got {cell}")
    keys = np.floor(np.asarray(positions) / cell).astype(np.int64)
    uniq = sorted({tuple(k) for k in keys})
    id_of = {k: i for i, k in enumerate(uniq)}
    segment_ids = np.array([id_of[tuple(k)] for k in keys], dtype=np.int64)
    centroids = np.zeros((len(uniq), 3))
    counts = np.bincount(segment_ids, minlength=len(uniq)).astype(np.float64)
    for d in range(3):
        centroids[:, d] = np.bincount(segment_ids, weights=positions[:, d],
                                      minlength=len(uniq)) / counts
    return segment_ids, centroids


def grid_subsample(cloud: PointCloud, cell: float) -> PointCloud:
    """Per-cell centroids with per-cell mean features."""
    segment_ids, centroids = grid_groups(cloud.positions, cell)
    features = None
    if cloud.features is not None:
        feats = np.asarray(cloud.features, dtype=np.float64)
        flat = feats.reshape(len(cloud), -1)
        counts = np.bincount(segment_ids).astype(np.float64)
        summed = np.zeros((len(centroids), flat.shape[1]))
        np.add.at(summed, segment_ids, flat)
        features = (summed / counts[:, None]).reshape((len(centroids),) + feats.shape[1:])
    return PointCloud(positions=centroids, features=features)


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPE_KINDS = ("cube", "tetra", "cylinder", "torus")

CYLINDER_RADIUS = 0.35
TORUS_MAJOR = 0.35
TORUS_MINOR = 0.15


def _sample_cube(rng: np.random.Generator, n: int) -> np.ndarray:
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    side = np.where(face % 2 == 0, 0.5, -0.5)
    for i in range(n):
        others = [d for d in range(3) if d != axis[i]]
        pts[i, axis[i]] = side[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return pts


def _sample_tetra(rng: np.random.Generator, n: int) -> np.ndarray:
    verts = 0.5 * np.array([[1.0, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])
    faces = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
    face = rng.integers(0, 4, size=n)
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    fold = u + v > 1.0
    u[fold] = 1.0 - u[fold]
    v[fold] = 1.0 - v[fold]
    pts = np.empty((n, 3))
    for i in range(n):
        a, b, c = (verts[j] for j in faces[face[i]])
        pts[i] = a + u[i] * (b - a) + v[i] * (c - a)
    return pts


def _sample_cylinder(rng: np.random.Generator, n: int) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-0.5, 0.5, size=n)
    return np.stack([CYLINDER_RADIUS * np.cos(theta),
                     CYLINDER_RADIUS * np.sin(theta), z], axis=1)


def _sample_torus(rng: np.random.Generator, n: int) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    phi = np.empty(n)
    filled = 0
    # Rejection sampling makes the area density uniform in the tube angle.
    while filled < n:
        cand = rng.uniform(0.0, 2.0 * np.pi, size=n - filled)
        accept = rng.uniform(size=n - filled) < (
            (TORUS_MAJOR + TORUS_MINOR * np.cos(cand)) / (TORUS_MAJOR + TORUS_MINOR))
        taken = cand[accept]
        phi[filled:filled + len(taken)] = taken
        filled += len(taken)
    ring = TORUS_MAJOR + TORUS_MINOR * np.cos(phi)
    return np.stack([ring * np.cos(theta), ring * np.sin(theta),
                     TORUS_MINOR * np.sin(phi)], axis=1)


_SAMPLERS = {
    "cube": _sample_cube,
    "tetra": _sample_tetra,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
}


def synth_shape(kind: str, n: int, noise: float, seed) -> PointCloud:
    """Uniform surface sample of a unit-scale shape plus isotropic jitter."""
    if kind not in _SAMPLERS:
        raise ValueError(f"unknown shape {kind!r}; expected one of {SHAPE_KINDS}")
    if n < 16:
        raise ValueError(f"need at least 16 points, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = _SAMPLERS[kind](rng, n)
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    return PointCloud(positions=pts)


# ---------------------------------------------------------------------------
# file format: one "x y z" per line, optional JSON sidecar for labels


def write_xyz(path, positions: np.ndarray) -> None:
    with open(path, "w") as f:
        for p in np.asarray(positions, dtype=np.float64):
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(x) for x in line.split()])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def write_sidecar(path, metadata: dict) -> None:
    with open(path, "w") as f:
        json.dump(metadata, f, indent=2, sort_keys=True)
        f.write("\n")


def read_sidecar(path) -> dict:
    with open(path) as f:
        return json.load(f)
