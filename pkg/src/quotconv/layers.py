"""Equivariant network layers on the spherical quotient feature field.

A feature field assigns every point a (A, C) block: one C-vector per anchor
direction. The quotient convolution contracts a steerable kernel against
features gathered at kernel-point locations; with a rotation-symmetric
kernel the gathering runs once at K locations per center and rotations
become permutations of the kernel index ("fast" mode), instead of
re-gathering at A*K rotated locations ("naive" mode). Both modes produce
the same values; only the cost differs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from . import autograd as ag
from .autograd import Tensor
from .cloud import gather_weights, grid_groups
from .kernel import OrbitKernel, build_kernel_perm, build_kernel_points, compute_orbits
from .rotgroup import SolidSymmetry

CONV_MODES = ("fast", "naive")


@dataclass
class FeatureField:
    """Positions plus a dense (N, A, C) value tensor."""

    positions: np.ndarray
    values: Tensor

    @property
    def num_anchors(self) -> int:
        return self.values.shape[1]


def lift(cloud, num_anchors: int) -> FeatureField:
    """Broadcast per-point features identically across all anchors.

    The broadcast is permutation-invariant, so a rotated input lifts to the
    anchor-permuted field without any extra bookkeeping.
    """
    feats = getattr(cloud, "features", None)
    if feats is None:
        feats = np.ones((len(cloud.positions), 1))
    feats = ag.as_tensor(feats)
    if feats.ndim != 2:
        raise ag.ShapeMismatch(f"lift expects unlifted (N, C) features, got {feats.shape}")
    return FeatureField(positions=np.asarray(cloud.positions, dtype=np.float64),
                        values=ag.expand(feats, 1, num_anchors))


def _block_diag(mats: list[scipy.sparse.csr_matrix]) -> scipy.sparse.csr_matrix:
    if len(mats) == 1:
        return mats[0]
    return scipy.sparse.block_diag(mats, format="csr")


@dataclass
class ConvPlan:
    mat: scipy.sparse.csr_matrix
    mat_t: scipy.sparse.csr_matrix
    num_centers: int
    centers: list[np.ndarray]
    gather_locations_per_center: int
    mode: str


class QuotientConv:
    """Kernel point convolution on the quotient field (N, A, C).

    mode="fast" gathers once at the K kernel locations per center and reads
    rotated kernels through index permutations; mode="naive" gathers at all
    A*K rotated locations. Values agree to floating-point noise.
    """

    def __init__(self, sym: SolidSymmetry, c_in: int, c_out: int, radius: float,
                 rng: np.random.Generator, sigma: float | None = None,
                 kernel_radius: float | None = None, mode: str = "fast",
                 extra_kernel_points: np.ndarray | None = None):
        if mode not in CONV_MODES:
            raise ValueError(f"mode must be one of {CONV_MODES}, got {mode!r}")
        self.sym = sym
        self.c_in = c_in
        self.c_out = c_out
        self.radius = float(radius)
        self.kernel_radius = float(kernel_radius) if kernel_radius else 0.66 * self.radius
        self.sigma = float(sigma) if sigma else self.kernel_radius
        self.mode = mode
        self.kpoints = build_kernel_points(sym.quotient, self.kernel_radius,
                                           extra_points=extra_kernel_points)
        self.kperm = build_kernel_perm(self.kpoints, sym.group)
        self.orbits = compute_orbits(sym.quotient, sym.anchor_perm, self.kperm)
        self.kernel = OrbitKernel(self.orbits, c_in, c_out, rng)
        self._build_tables()

    def _build_tables(self):
        quotient, group = self.sym.quotient, self.sym.group
        a = quotient.num_anchors
        k = self.kpoints.count
        orbit_of = self.orbits.orbit_of
        fast = np.empty((a, k, a), dtype=np.int64)
        naive = np.empty((a, k, a), dtype=np.int64)
        rot_offsets = np.empty((a, k, 3))
        for i in range(a):
            s_inv = group.inverse[quotient.section[i]]
            pa_inv = self.sym.anchor_perm.perm[s_inv]
            pk_inv = self.kperm.kperm[s_inv]
            fast[i] = orbit_of[pa_inv, :][:, pk_inv].T      # [k', a']
            naive[i] = orbit_of[pa_inv, :].T                # [k, a']
            rot = group.elements[quotient.section[i]]
            rot_offsets[i] = self.kpoints.points @ rot.T
        self._fast_table = fast.reshape(-1)
        self._naive_table = naive.reshape(-1)
        self._rot_offsets = rot_offsets

    @property
    def gather_locations_per_center(self) -> int:
        k = self.kpoints.count
        return k if self.mode == "fast" else self.sym.num_anchors * k

    def prepare(self, positions_list: list[np.ndarray],
                centers_list: list[np.ndarray], mode: str | None = None) -> ConvPlan:
        """Neighbor search + sparse gather weights for one batch of clouds."""
        mode = mode or self.mode
        if mode == "naive":
            offsets = self._rot_offsets.reshape(-1, 3)
        else:
            offsets = self.kpoints.points
        mats, mats_t = [], []
        total_centers = 0
        # w(d) vanishes beyond sigma, so the search radius can shrink to it
        search = min(self.radius, self.sigma)
        for positions, centers in zip(positions_list, centers_list):
            locations = (centers[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
            mat, mat_t = gather_weights(positions, locations, search, self.sigma)
            mats.append(mat)
            mats_t.append(mat_t)
            total_centers += len(centers)
        return ConvPlan(mat=_block_diag(mats), mat_t=_block_diag(mats_t),
                        num_centers=total_centers, centers=list(centers_list),
                        gather_locations_per_center=len(offsets), mode=mode)

    def forward(self, values: Tensor, plan: ConvPlan) -> Tensor:
        a = self.sym.num_anchors
        k = self.kpoints.count
        if values.ndim != 3 or values.shape[1] != a or values.shape[2] != self.c_in:
            raise ag.ShapeMismatch(
                f"expected (N, {a}, {self.c_in}) field values, got {values.shape}")
        m = plan.num_centers
        gathered = ag.sparse_gather(values, plan.mat, plan.mat_t)
        free = self.kernel.free_weights
        if plan.mode == "fast":
            g = ag.reshape(gathered, (m, k * a * self.c_in))
            kt = ag.index_select(free, 0, self._fast_table)
            kt = ag.reshape(kt, (a, k, a, self.c_in, self.c_out))
            kt = ag.transpose(kt, (1, 2, 3, 0, 4))
            kt = ag.reshape(kt, (k * a * self.c_in, a * self.c_out))
            out = ag.contract(g, kt, "me,ef->mf")
            return ag.reshape(out, (m, a, self.c_out))
        g = ag.reshape(gathered, (m, a, k, a, self.c_in))
        kt = ag.index_select(free, 0, self._naive_table)
        kt = ag.reshape(kt, (a, k, a, self.c_in, self.c_out))
        return ag.contract(g, kt, "mikac,ikacd->mid")

    def params(self) -> list[Tensor]:
        return [self.kernel.free_weights]

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [("free_weights", self.kernel.free_weights)]


class GroupConv:
    """Baseline convolution on the full-group field (N, |G|, C)."""

    def __init__(self, sym: SolidSymmetry, c_in: int, c_out: int, radius: float,
                 rng: np.random.Generator, sigma: float | None = None,
                 kernel_radius: float | None = None):
        self.sym = sym
        self.c_in = c_in
        self.c_out = c_out
        self.radius = float(radius)
        self.kernel_radius = float(kernel_radius) if kernel_radius else 0.66 * self.radius
        self.sigma = float(sigma) if sigma else self.kernel_radius
        self.kpoints = build_kernel_points(sym.quotient, self.kernel_radius)
        self.kperm = build_kernel_perm(self.kpoints, sym.group)
        order = sym.order
        k = self.kpoints.count
        bound = np.sqrt(3.0 / (c_in * order * k))
        self.kernel = Tensor(rng.uniform(-bound, bound, size=(order * k, c_in, c_out)),
                             requires_grad=True)
        table = np.empty((order, k, order), dtype=np.int64)
        for v in range(order):
            v_inv = sym.group.inverse[v]
            ku = sym.group.cayley[v_inv]            # (order,) u = v^-1 w
            kk = self.kperm.kperm[v_inv]            # (k,)   k = kperm[v^-1] k'
            table[v] = ku[None, :] * k + kk[:, None]
        self._table = table.reshape(-1)

    def set_kernel(self, dense: np.ndarray) -> None:
        """Install a dense (|G|, K, C_in, C_out) kernel."""
        order, k = self.sym.order, self.kpoints.count
        dense = np.asarray(dense, dtype=np.float64)
        if dense.shape != (order, k, self.c_in, self.c_out):
            raise ag.ShapeMismatch(f"kernel must be {(order, k, self.c_in, self.c_out)}")
        self.kernel = Tensor(dense.reshape(order * k, self.c_in, self.c_out),
                             requires_grad=True)

    def prepare(self, positions_list, centers_list) -> ConvPlan:
        mats, mats_t = [], []
        total = 0
        search = min(self.radius, self.sigma)
        for positions, centers in zip(positions_list, centers_list):
            locations = (centers[:, None, :] + self.kpoints.points[None, :, :]).reshape(-1, 3)
            mat, mat_t = gather_weights(positions, locations, search, self.sigma)
            mats.append(mat)
            mats_t.append(mat_t)
            total += len(centers)
        return ConvPlan(mat=_block_diag(mats), mat_t=_block_diag(mats_t),
                        num_centers=total, centers=list(centers_list),
                        gather_locations_per_center=self.kpoints.count, mode="fast")

    def forward(self, values: Tensor, plan: ConvPlan) -> Tensor:
        order, k = self.sym.order, self.kpoints.count
        if values.ndim != 3 or values.shape[1] != order or values.shape[2] != self.c_in:
            raise ag.ShapeMismatch(
                f"expected (N, {order}, {self.c_in}) group field, got {values.shape}")
        m = plan.num_centers
        gathered = ag.sparse_gather(values, plan.mat, plan.mat_t)
        g = ag.reshape(gathered, (m, k * order * self.c_in))
        kt = ag.index_select(self.kernel, 0, self._table)
        kt = ag.reshape(kt, (order, k, order, self.c_in, self.c_out))
        kt = ag.transpose(kt, (1, 2, 3, 0, 4))
        kt = ag.reshape(kt, (k * order * self.c_in, order * self.c_out))
        out = ag.contract(g, kt, "me,ef->mf")
        return ag.reshape(out, (m, order, self.c_out))

    def params(self) -> list[Tensor]:
        return [self.kernel]

    def named_params(self):
        return [("kernel", self.kernel)]


class BatchNorm:
    """Normalize over every axis except channels (batch, points, anchors).

    The statistics are sums over a permutation-invariant set, computed in
    sorted order so they are bit-identical under any relabeling of points or
    anchors. Running statistics are updated only in training mode.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.training = True

    def _broadcast(self, vec: Tensor, shape: tuple[int, ...]) -> Tensor:
        out = vec
        for axis, n in enumerate(shape[:-1]):
            out = ag.expand(out, axis, n)
        return out

    def forward(self, values: Tensor, plan=None) -> Tensor:
        if values.shape[-1] != self.channels:
            raise ag.ShapeMismatch(
                f"expected {self.channels} channels, got shape {values.shape}")
        lead = tuple(range(values.ndim - 1))
        if self.training:
            mean = ag.reduce_mean(values, lead, stable=True)
            centered = ag.sub(values, self._broadcast(mean, values.shape))
            var = ag.reduce_mean(ag.mul(centered, centered), lead, stable=True)
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean.data)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var.data)
        else:
            mean = Tensor(self.running_mean)
            centered = ag.sub(values, self._broadcast(mean, values.shape))
            var = Tensor(self.running_var)
        inv_std = ag.reciprocal(ag.sqrt(ag.add_const(var, self.eps)))
        scaled = ag.mul(centered, self._broadcast(ag.mul(inv_std, self.gamma), values.shape))
        return ag.add_bias(scaled, self.beta)

    def params(self):
        return [self.gamma, self.beta]

    def named_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def load_buffers(self, buffers: dict):
        self.running_mean = buffers["running_mean"].copy()
        self.running_var = buffers["running_var"].copy()


class ReLULayer:
    def forward(self, values: Tensor, plan=None) -> Tensor:
        return ag.relu(values)

    def params(self):
        return []

    def named_params(self):
        return []


class LeakyReLULayer:
    def __init__(self, alpha: float = 0.1):
        self.alpha = float(alpha)

    def forward(self, values: Tensor, plan=None) -> Tensor:
        return ag.leaky_relu(values, self.alpha)

    def params(self):
        return []

    def named_params(self):
        return []


@dataclass
class PoolPlan:
    segment_ids: np.ndarray
    num_segments: int
    centroids: list[np.ndarray]


class SpatialPool:
    """Grid subsampling with per-anchor-channel max over cell members."""

    def __init__(self, cell: float):
        if cell <= 0:
            raise ValueError(f"cell must be positive, got {cell}")
        self.cell = float(cell)

    def prepare(self, positions_list: list[np.ndarray],
                frozen_groups: list[np.ndarray] | None = None) -> PoolPlan:
        ids_parts, centroids = [], []
        offset = 0
        for s, positions in enumerate(positions_list):
            if frozen_groups is not None:
                ids = frozen_groups[s]
                nseg = int(ids.max()) + 1
                cent = np.zeros((nseg, 3))
                counts = np.bincount(ids, minlength=nseg).astype(np.float64)
                for d in range(3):
                    cent[:, d] = np.bincount(ids, weights=positions[:, d],
                                             minlength=nseg) / counts
            else:
                ids, cent = grid_groups(positions, self.cell)
            ids_parts.append(ids + offset)
            offset += len(cent)
            centroids.append(cent)
        return PoolPlan(segment_ids=np.concatenate(ids_parts), num_segments=offset,
                        centroids=centroids)

    def forward(self, values: Tensor, plan: PoolPlan) -> Tensor:
        return ag.segment_max(values, plan.segment_ids, plan.num_segments)

    def params(self):
        return []

    def named_params(self):
        return []


def spatial_pool(field: FeatureField, cell: float) -> FeatureField:
    layer = SpatialPool(cell)
    plan = layer.prepare([field.positions])
    return FeatureField(positions=plan.centroids[0], values=layer.forward(field.values, plan))


# ---------------------------------------------------------------------------
# anchor-dimension heads


class GAPool:
    """Group-attentive pooling: softmax-weighted sum over anchors.

    The attention head is a single linear map to a scalar per anchor; scores
    permute with the features, so the pooled vector is invariant to anchor
    permutations.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        bound = np.sqrt(3.0 / channels)
        self.w = Tensor(rng.uniform(-bound, bound, size=channels), requires_grad=True)

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim == 2:                                    # (A, C)
            scores = ag.contract(f, self.w, "ac,c->a")
            alpha = ag.softmax(scores, 0)
            return ag.contract(alpha, f, "a,ac->c")
        if f.ndim == 3:                                    # (B, A, C)
            scores = ag.contract(f, self.w, "bac,c->ba")
            alpha = ag.softmax(scores, 1)
            return ag.contract(alpha, f, "ba,bac->bc")
        raise ag.ShapeMismatch(f"ga_pool expects (A, C) or (B, A, C), got {f.shape}")

    def params(self):
        return [self.w]

    def named_params(self):
        return [("attn_w", self.w)]


def ga_pool(f: Tensor, pool: GAPool) -> Tensor:
    return pool.forward(f)


def permutation_expand(f: Tensor, sym: SolidSymmetry) -> Tensor:
    """Expand (A, C) anchor features into (|G|, A*C) rotation-indexed rows.

    Row g concatenates f[perm[g][0]], ..., f[perm[g][A-1]]. Because the
    permutation action is faithful, rows are pairwise distinct whenever the
    anchor features are.
    """
    perm = sym.anchor_perm.perm
    order, a = perm.shape
    if f.ndim == 2:
        rows = ag.index_select(f, 0, perm.reshape(-1))
        return ag.reshape(rows, (order, a * f.shape[1]))
    if f.ndim == 3:
        rows = ag.index_select(f, 1, perm.reshape(-1))
        return ag.reshape(rows, (f.shape[0], order, a * f.shape[2]))
    raise ag.ShapeMismatch(f"expected (A, C) or (B, A, C), got {f.shape}")


def _permute_anchors_all(f: Tensor, sym: SolidSymmetry) -> Tensor:
    """(B, A, C) -> (B, |G|, A, C) with rows f[:, perm[g], :]."""
    perm = sym.anchor_perm.perm
    order, a = perm.shape
    rows = ag.index_select(f, 1, perm.reshape(-1))
    return ag.reshape(rows, (f.shape[0], order, a, f.shape[2]))


class RotationHead:
    """Pairwise anchor matching over all group rotations.

    For each candidate rotation g the second feature's anchors are permuted,
    anchor pairs are stacked and scored by a 2-layer MLP, and the rotation
    logit sums the per-anchor match logits. Prediction is the argmax row.
    """

    def __init__(self, channels: int, hidden: int, sym: SolidSymmetry,
                 rng: np.random.Generator):
        self.sym = sym
        b1 = np.sqrt(3.0 / (2 * channels))
        b2 = np.sqrt(3.0 / hidden)
        self.w1 = Tensor(rng.uniform(-b1, b1, size=(2 * channels, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.uniform(-b2, b2, size=(hidden, 1)), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    def pair_scores(self, f1: Tensor, f2: Tensor) -> Tensor:
        """(B, A, C) x (B, A, C) -> (B, |G|, A) match logits."""
        if f1.shape != f2.shape:
            raise ag.ShapeMismatch(f"feature shapes differ: {f1.shape} vs {f2.shape}")
        order = self.sym.order
        f2p = _permute_anchors_all(f2, self.sym)
        f1e = ag.expand(f1, 1, order)
        pair = ag.concat(f1e, f2p, 3)
        h = ag.relu(ag.add_bias(ag.contract(pair, self.w1, "bgax,xh->bgah"), self.b1))
        logit = ag.add_bias(ag.contract(h, self.w2, "bgah,hy->bgay"), self.b2)
        return ag.reshape(logit, logit.shape[:3])

    def rotation_logits(self, scores: Tensor) -> Tensor:
        return ag.reduce_sum(scores, (2,))

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def named_params(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


def rotation_head(f1: Tensor, f2: Tensor, head: RotationHead) -> tuple[Tensor, Tensor]:
    """Single-pair form: (A, C) features -> (|G|, A) scores, (|G|,) logits."""
    a, c = f1.shape
    scores = head.pair_scores(ag.reshape(f1, (1, a, c)), ag.reshape(f2, (1, a, c)))
    logits = head.rotation_logits(scores)
    return ag.reshape(scores, scores.shape[1:]), ag.reshape(logits, (logits.shape[1],))


class ClassHead:
    """Classification against learned per-class reference anchor features.

    score(n, g) sums anchor inner products between the g-permuted input and
    the class-n reference; the class logit takes the max over rotations, so
    it is invariant to rotations of the input within the group.
    """

    def __init__(self, num_classes: int, channels: int, sym: SolidSymmetry,
                 rng: np.random.Generator):
        self.sym = sym
        self.num_classes = num_classes
        bound = np.sqrt(3.0 / channels)
        self.reference = Tensor(
            rng.uniform(-bound, bound, size=(num_classes, sym.num_anchors, channels)),
            requires_grad=True)

    def score_table(self, f: Tensor) -> Tensor:
        """(B, A, C) -> (B, N_cls, |G|) rotation scores per class."""
        fp = _permute_anchors_all(f, self.sym)
        return ag.contract(fp, self.reference, "bgac,nac->bng")

    def class_logits(self, f: Tensor) -> Tensor:
        return ag.reduce_max(self.score_table(f), (2,))

    def anchor_scores(self, f: Tensor, labels: np.ndarray) -> Tensor:
        """Per-anchor match scores against each sample's own class reference."""
        fp = _permute_anchors_all(f, self.sym)
        ref = ag.index_select(self.reference, 0, np.asarray(labels, dtype=np.int64))
        return ag.contract(fp, ref, "bgac,bac->bga")

    def predict(self, f: Tensor) -> tuple[np.ndarray, np.ndarray]:
        table = self.score_table(f).data
        best_rot = table.argmax(axis=2)
        logits = table.max(axis=2)
        return logits.argmax(axis=1), best_rot

    def params(self):
        return [self.reference]

    def named_params(self):
        return [("reference", self.reference)]


def class_head(f: Tensor, head: ClassHead) -> tuple[Tensor, np.ndarray]:
    """Single-sample form: (A, C) -> (N_cls,) logits, (N_cls,) best rotation."""
    a, c = f.shape
    fb = ag.reshape(f, (1, a, c))
    logits = head.class_logits(fb)
    table = head.score_table(fb).data[0]
    return ag.reshape(logits, (head.num_classes,)), table.argmax(axis=1)


# ---------------------------------------------------------------------------
# backbone assembly


class Backbone:
    """Ordered layer blocks driven by a config list.

    Block dicts: {"type": "conv", "channels": int, "radius": float,
    "sigma"?, "mode"?}, {"type": "bn"}, {"type": "relu"},
    {"type": "leaky_relu", "alpha"?}, {"type": "pool", "cell": float}.
    """

    def __init__(self, sym: SolidSymmetry, blocks: list[dict], rng: np.random.Generator,
                 c_in: int = 1):
        self.sym = sym
        self.blocks: list[tuple[str, object]] = []
        channels = c_in
        for i, spec in enumerate(blocks):
            kind = spec["type"]
            if kind == "conv":
                layer = QuotientConv(sym, channels, spec["channels"], spec["radius"],
                                     rng, sigma=spec.get("sigma"),
                                     kernel_radius=spec.get("kernel_radius"),
                                     mode=spec.get("mode", "fast"))
                channels = spec["channels"]
            elif kind == "bn":
                layer = BatchNorm(channels)
            elif kind == "relu":
                layer = ReLULayer()
            elif kind == "leaky_relu":
                layer = LeakyReLULayer(spec.get("alpha", 0.1))
            elif kind == "pool":
                layer = SpatialPool(spec["cell"])
            else:
                raise ValueError(f"unknown block type {kind!r}")
            self.blocks.append((f"block{i}_{kind}", layer))
        self.out_channels = channels

    def set_training(self, flag: bool) -> None:
        for _, layer in self.blocks:
            if isinstance(layer, BatchNorm):
                layer.training = flag

    def set_mode(self, mode: str) -> None:
        for _, layer in self.blocks:
            if isinstance(layer, QuotientConv):
                layer.mode = mode

    def prepare(self, positions_list: list[np.ndarray],
                frozen_pool_groups: dict[int, list[np.ndarray]] | None = None):
        """Per-block plans for one batch; pooling may reuse frozen groups."""
        plans = []
        current = [np.asarray(p, dtype=np.float64) for p in positions_list]
        for bi, (_, layer) in enumerate(self.blocks):
            if isinstance(layer, (QuotientConv, GroupConv)):
                plans.append(layer.prepare(current, current))
            elif isinstance(layer, SpatialPool):
                frozen = None
                if frozen_pool_groups is not None and bi in frozen_pool_groups:
                    frozen = frozen_pool_groups[bi]
                plan = layer.prepare(current, frozen_groups=frozen)
                plans.append(plan)
                current = plan.centroids
            else:
                plans.append(None)
        return plans, current

    def forward(self, values: Tensor, plans: list) -> Tensor:
        for (_, layer), plan in zip(self.blocks, plans):
            values = layer.forward(values, plan)
        return values

    def params(self) -> list[Tensor]:
        out = []
        for _, layer in self.blocks:
            out.extend(layer.params())
        return out

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, layer in self.blocks:
            out.extend((f"{name}.{p}", t) for p, t in layer.named_params())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in self.blocks:
            if isinstance(layer, BatchNorm):
                out.extend((f"{name}.{b}", arr) for b, arr in layer.named_buffers())
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for name, layer in self.blocks:
            if isinstance(layer, BatchNorm):
                layer.load_buffers({
                    "running_mean": buffers[f"{name}.running_mean"],
                    "running_var": buffers[f"{name}.running_var"],
                })


def quotient_conv_forward(layer: QuotientConv, field: FeatureField,
                          query_centers: np.ndarray) -> FeatureField:
    """Single-cloud convenience wrapper around prepare + forward."""
    centers = np.asarray(query_centers, dtype=np.float64)
    plan = layer.prepare([field.positions], [centers])
    return FeatureField(positions=centers, values=layer.forward(field.values, plan))


def group_conv_forward(layer: GroupConv, field: FeatureField,
                       query_centers: np.ndarray) -> FeatureField:
    centers = np.asarray(query_centers, dtype=np.float64)
    plan = layer.prepare([field.positions], [centers])
    return FeatureField(positions=centers, values=layer.forward(field.values, plan))
