"""Named property checks: group axioms, faithfulness, kernel closure,
steerability, gather oracles, conv consistency, equivariance, gradients.

Each check returns a CheckResult; ``run_all`` aggregates them for the CLI
``check`` subcommand. The suite is the executable form of the library's
correctness contract, so the tests and the acceptance criteria call the
same functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import cloud as cl
from . import kernel as kn
from . import layers as ly
from . import rotgroup as rg
from . import train as tr
from .autograd import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_err: float
    detail: str = ""
    count: int = 0

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed),
                "max_err": float(self.max_err), "detail": self.detail,
                "count": self.count}


def _result(name, err, tol, detail="") -> CheckResult:
    return CheckResult(name=name, passed=bool(err < tol), max_err=float(err),
                       detail=detail or f"tol {tol:g}")


# ---------------------------------------------------------------------------
# group structure


def check_group_axioms(tol: float = 1e-9) -> CheckResult:
    worst = 0.0
    expected = {"tetra": 12, "octa": 24, "icosa": 60}
    for solid, order in expected.items():
        g = rg.generate_platonic_group(solid)
        if g.order != order:
            return CheckResult("group_axioms", False, np.inf,
                               f"{solid} order {g.order} != {order}")
        products = np.einsum("iab,jbc->ijac", g.elements, g.elements)
        diff = np.abs(products - g.elements[g.cayley]).max()
        worst = max(worst, float(diff))
        n = g.order
        rows_ok = all(len(set(g.cayley[i])) == n for i in range(n))
        cols_ok = all(len(set(g.cayley[:, j])) == n for j in range(n))
        e = g.identity_index
        identity_ok = (np.all(g.cayley[e] == np.arange(n))
                       and np.all(g.cayley[:, e] == np.arange(n)))
        inverse_ok = np.all(g.cayley[np.arange(n), g.inverse] == e)
        # (i j) k == i (j k) over all triples via table composition
        assoc_ok = np.array_equal(g.cayley[g.cayley, :], g.cayley[:, g.cayley])
        if not (rows_ok and cols_ok and identity_ok and inverse_ok and assoc_ok):
            return CheckResult("group_axioms", False, np.inf, f"{solid} table defect")
    return _result("group_axioms", worst, tol, "orders 12/24/60, tables exact")


def check_quotient_counts(sym: rg.SolidSymmetry) -> CheckResult:
    q = sym.quotient
    sizes = np.bincount(q.coset_of, minlength=q.num_anchors)
    stab = len(q.stabilizer)
    ok = (np.all(sizes == stab) and q.num_anchors * stab == sym.order)
    detail = f"{q.num_anchors} cosets of {stab}"
    return CheckResult("quotient_counts", bool(ok), 0.0 if ok else np.inf, detail)


def check_faithfulness(sym: rg.SolidSymmetry) -> CheckResult:
    perm = sym.anchor_perm.perm
    distinct = len({tuple(p) for p in perm}) == sym.order
    cay = sym.group.cayley
    hom = all(np.array_equal(perm[cay[i, j]], perm[i][perm[j]])
              for i in range(sym.order) for j in range(sym.order))
    ok = distinct and hom
    return CheckResult("faithfulness", ok, 0.0 if ok else np.inf,
                       f"{sym.order} distinct homomorphic permutations")


def check_section(sym: rg.SolidSymmetry, tol: float = 1e-9) -> CheckResult:
    q = sym.quotient
    if not np.array_equal(q.coset_of[q.section], np.arange(q.num_anchors)):
        return CheckResult("section_consistency", False, np.inf, "s(x)H != x")
    mapped = np.einsum("aij,j->ai", sym.group.elements[q.section], q.anchors[0])
    err = np.abs(mapped - q.anchors).max()
    return _result("section_consistency", err, tol)


# ---------------------------------------------------------------------------
# kernel


def check_kernel_closure(sym: rg.SolidSymmetry, radius: float = 1.0,
                         tol: float = 1e-9,
                         extra_points: np.ndarray | None = None) -> CheckResult:
    points = kn.build_kernel_points(sym.quotient, radius, extra_points=extra_points)
    err = kn.closure_error(points, sym.group)
    detail = f"{points.count} points x {sym.order} elements"
    if err < tol:
        try:
            kn.build_kernel_perm(points, sym.group)
        except kn.NotClosed as exc:
            return CheckResult("kernel_closure", False, np.inf, str(exc))
    return _result("kernel_closure", err, tol, detail)


def brute_force_orbits(sym: rg.SolidSymmetry, kperm: kn.KernelPermutationRep) -> list[frozenset]:
    """Independent orbit enumerator: expand each pair under the stabilizer."""
    num_anchors = sym.num_anchors
    count = kperm.kperm.shape[1]
    orbits = set()
    for a in range(num_anchors):
        for k in range(count):
            orbit = frozenset((int(sym.anchor_perm.perm[h, a]), int(kperm.kperm[h, k]))
                              for h in sym.quotient.stabilizer)
            orbits.add(orbit)
    return sorted(orbits, key=lambda o: sorted(o))


def check_steerability(sym: rg.SolidSymmetry, rng: np.random.Generator) -> CheckResult:
    points = kn.build_kernel_points(sym.quotient, 0.5)
    kperm = kn.build_kernel_perm(points, sym.group)
    orbits = kn.compute_orbits(sym.quotient, sym.anchor_perm, kperm)
    full = kn.OrbitKernel(orbits, 2, 3, rng).expand().data
    ok = int(orbits.sizes.sum()) == full.shape[0] * full.shape[1]
    # Bit-identity across each stabilizer orbit (shared storage, not approx).
    for h in sym.quotient.stabilizer:
        pa, pk = sym.anchor_perm.perm[h], kperm.kperm[h]
        ok = ok and np.array_equal(full, full[pa][:, pk])
    if sym.solid == "icosa":
        sizes = sorted(orbits.sizes.tolist())
        ok = ok and orbits.num_orbits == 36 and sizes == [1] * 6 + [5] * 30
    ok = ok and len(brute_force_orbits(sym, kperm)) == orbits.num_orbits
    return CheckResult("steerability_orbits", ok, 0.0 if ok else np.inf,
                       f"{orbits.num_orbits} orbits")


# ---------------------------------------------------------------------------
# gathering


def naive_gather_oracle(positions, features, centers, kpts, sigma) -> np.ndarray:
    """Direct per-definition double loop over centers and kernel points."""
    m, k = len(centers), len(kpts)
    n, a, c = features.shape
    out = np.zeros((m, k, a, c))
    for mi in range(m):
        for ki in range(k):
            loc = centers[mi] + kpts[ki]
            for y in range(n):
                d = np.linalg.norm(positions[y] - loc)
                w = max(0.0, 1.0 - d / sigma)
                out[mi, ki] += w * features[y]
    return out


def check_gather_oracle(sym: rg.SolidSymmetry, rng: np.random.Generator,
                        tol: float = 1e-12) -> CheckResult:
    positions = rng.uniform(-0.5, 0.5, size=(20, 3))
    features = rng.standard_normal((20, sym.num_anchors, 3))
    centers = rng.uniform(-0.5, 0.5, size=(5, 3))
    kpts = kn.build_kernel_points(sym.quotient, 0.3).points
    sigma = 0.3
    got = cl.gather_features(ly.FeatureField(positions, Tensor(features)),
                             centers, kpts, sigma, sigma).data
    want = naive_gather_oracle(positions, features, centers, kpts, sigma)
    err = np.abs(got - want).max()
    # Linearity: gather(a f + b h) = a gather(f) + b gather(h).
    h = rng.standard_normal(features.shape)
    got_lin = cl.gather_features(ly.FeatureField(positions, Tensor(2.0 * features - 0.5 * h)),
                                 centers, kpts, sigma, sigma).data
    err_lin = np.abs(got_lin - (2.0 * got - 0.5 * cl.gather_features(
        ly.FeatureField(positions, Tensor(h)), centers, kpts, sigma, sigma).data)).max()
    return _result("gather_oracle", max(err, err_lin), tol)


def check_fast_vs_naive(sym: rg.SolidSymmetry, rng: np.random.Generator,
                        trials: int = 5, n_points: int = 64, c_in: int = 4,
                        c_out: int = 8, tol: float = 1e-10) -> CheckResult:
    conv = ly.QuotientConv(sym, c_in, c_out, radius=0.45, rng=rng)
    worst = 0.0
    for _ in range(trials):
        positions = rng.uniform(-0.5, 0.5, size=(n_points, 3))
        values = Tensor(rng.standard_normal((n_points, sym.num_anchors, c_in)))
        centers = positions[: n_points // 2]
        fast_plan = conv.prepare([positions], [centers], mode="fast")
        naive_plan = conv.prepare([positions], [centers], mode="naive")
        out_fast = conv.forward(values, fast_plan)
        out_naive = conv.forward(values, naive_plan)
        worst = max(worst, float(np.abs(out_fast.data - out_naive.data).max()))
        counts_ok = (fast_plan.gather_locations_per_center == conv.kpoints.count
                     and naive_plan.gather_locations_per_center
                     == sym.num_anchors * conv.kpoints.count)
        if not counts_ok:
            return CheckResult("fast_vs_naive", False, np.inf, "gather counts wrong")
    k = conv.kpoints.count
    return _result("fast_vs_naive", worst, tol,
                   f"{trials} trials; locations {k} vs {sym.num_anchors * k}")


def check_group_conv_consistency(sym: rg.SolidSymmetry, rng: np.random.Generator,
                                 trials: int = 3, n_points: int = 24,
                                 tol: float = 1e-9) -> CheckResult:
    """Coset-constant group conv equals |stabilizer| x quotient conv."""
    c_in, c_out = 2, 3
    stab = len(sym.quotient.stabilizer)
    worst = 0.0
    for _ in range(trials):
        qconv = ly.QuotientConv(sym, c_in, c_out, radius=0.5, rng=rng)
        gconv = ly.GroupConv(sym, c_in, c_out, radius=0.5, rng=rng,
                             kernel_radius=qconv.kernel_radius, sigma=qconv.sigma)
        kq = qconv.kernel.expand().data                      # (A, K, C1, C2)
        gconv.set_kernel(kq[sym.quotient.coset_of])          # (G, K, C1, C2)
        positions = rng.uniform(-0.5, 0.5, size=(n_points, 3))
        centers = positions[: n_points // 2]
        fq = rng.standard_normal((n_points, sym.num_anchors, c_in))
        fg = fq[:, sym.quotient.coset_of, :]
        out_q = ly.quotient_conv_forward(qconv, ly.FeatureField(positions, Tensor(fq)),
                                         centers).values.data
        out_g = ly.group_conv_forward(gconv, ly.FeatureField(positions, Tensor(fg)),
                                      centers).values.data
        expected = stab * out_q[:, sym.quotient.coset_of, :]
        scale = np.abs(expected).max() + 1e-30
        worst = max(worst, float(np.abs(out_g - expected).max() / scale))
    return _result("group_conv_consistency", worst, tol,
                   f"group = {stab} x quotient on coset-constant data (relative)")


# ---------------------------------------------------------------------------
# equivariance


def make_test_backbone(sym: rg.SolidSymmetry, rng: np.random.Generator,
                       with_pool: bool = True) -> ly.Backbone:
    blocks = [
        {"type": "conv", "channels": 4, "radius": 0.45},
        {"type": "bn"},
        {"type": "relu"},
        {"type": "conv", "channels": 5, "radius": 0.6},
    ]
    if with_pool:
        blocks.append({"type": "pool", "cell": 0.4})
    return ly.Backbone(sym, blocks, rng)


def backbone_equivariance_error(sym: rg.SolidSymmetry, backbone: ly.Backbone,
                                positions: np.ndarray, g: int,
                                translation: np.ndarray) -> float:
    """Forward on (R P + t) vs anchor-permuted forward on P.

    Pool groupings are frozen from the original run so both runs aggregate
    the same member sets (query centers transformed consistently); the
    neighbor searches themselves are re-run on the transformed cloud.
    """
    n = len(positions)
    values = ly.lift(cl.PointCloud(positions), sym.num_anchors).values
    plans, _ = backbone.prepare([positions])
    out = backbone.forward(values, plans).data
    frozen = {}
    for bi, (name, layer) in enumerate(backbone.blocks):
        if isinstance(layer, ly.SpatialPool):
            frozen[bi] = [plans[bi].segment_ids.copy()]
    rot = sym.group.elements[g]
    moved = positions @ rot.T + translation
    plans_rot, _ = backbone.prepare([moved], frozen_pool_groups=frozen or None)
    out_rot = backbone.forward(values, plans_rot).data
    perm_inv = sym.anchor_perm.perm[sym.group.inverse[g]]
    return float(np.abs(out_rot - out[:, perm_inv, :]).max())


def check_end_to_end_equivariance(sym: rg.SolidSymmetry, rng: np.random.Generator,
                                  trials: int = 4, n_points: int = 48,
                                  tol: float = 1e-9) -> CheckResult:
    backbone = make_test_backbone(sym, rng)
    positions = rng.uniform(-0.5, 0.5, size=(n_points, 3))
    worst = 0.0
    for _ in range(trials):
        g = int(rng.integers(0, sym.order))
        t = rng.uniform(-1.0, 1.0, size=3)
        worst = max(worst, backbone_equivariance_error(sym, backbone, positions, g, t))
    return _result("end_to_end_equivariance", worst, tol, f"{trials} random (R, t)")


def check_group_conv_equivariance(sym: rg.SolidSymmetry, rng: np.random.Generator,
                                  n_points: int = 20, tol: float = 1e-9) -> CheckResult:
    gconv = ly.GroupConv(sym, 2, 3, radius=0.5, rng=rng)
    positions = rng.uniform(-0.5, 0.5, size=(n_points, 3))
    centers = positions[: n_points // 2]
    f = rng.standard_normal((n_points, sym.order, 2))
    out = ly.group_conv_forward(gconv, ly.FeatureField(positions, Tensor(f)),
                                centers).values.data
    worst = 0.0
    for _ in range(3):
        g = int(rng.integers(0, sym.order))
        rot = sym.group.elements[g]
        t = rng.uniform(-1.0, 1.0, size=3)
        regular = sym.group.cayley[sym.group.inverse[g]]   # v -> g^-1 v
        f_rot = f[:, regular, :]
        out_rot = ly.group_conv_forward(
            gconv, ly.FeatureField(positions @ rot.T + t, Tensor(f_rot)),
            centers @ rot.T + t).values.data
        worst = max(worst, float(np.abs(out_rot - out[:, regular, :]).max()))
    return _result("group_conv_equivariance", worst, tol)


def check_invariance(sym: rg.SolidSymmetry, rng: np.random.Generator,
                     tol: float = 1e-9) -> CheckResult:
    """ga_pool and class_head outputs are invariant under group rotations."""
    backbone = make_test_backbone(sym, rng, with_pool=False)
    gap = ly.GAPool(backbone.out_channels, rng)
    head = ly.ClassHead(3, backbone.out_channels, sym, rng)
    positions = rng.uniform(-0.5, 0.5, size=(40, 3))
    worst = 0.0
    argmax_same = True

    def descriptor(pos):
        values = ly.lift(cl.PointCloud(pos), sym.num_anchors).values
        plans, _ = backbone.prepare([pos])
        out = backbone.forward(values, plans)
        return ag.reduce_mean(out, (0,))

    f = descriptor(positions)
    pooled = gap.forward(f).data
    logits, _ = ly.class_head(f, head)
    for _ in range(4):
        g = int(rng.integers(0, sym.order))
        rot = sym.group.elements[g]
        f_rot = descriptor(positions @ rot.T)
        pooled_rot = gap.forward(f_rot).data
        logits_rot, _ = ly.class_head(f_rot, head)
        worst = max(worst, float(np.abs(pooled_rot - pooled).max()))
        worst = max(worst, float(np.abs(logits_rot.data - logits.data).max()))
        argmax_same = argmax_same and (int(np.argmax(logits_rot.data))
                                       == int(np.argmax(logits.data)))
    if not argmax_same:
        return CheckResult("invariance_heads", False, np.inf, "class argmax changed")
    return _result("invariance_heads", worst, tol)


def check_nonlinearity_equivariance(sym: rg.SolidSymmetry,
                                    rng: np.random.Generator) -> CheckResult:
    """ReLU and batch normalization commute with anchor permutation exactly."""
    x = rng.standard_normal((10, sym.num_anchors, 3))
    ok = True
    for _ in range(3):
        g = int(rng.integers(0, sym.order))
        p = sym.anchor_perm.perm[g]
        ok = ok and np.array_equal(np.maximum(x, 0)[:, p], np.maximum(x[:, p], 0))
        bn = ly.BatchNorm(3)
        out = bn.forward(Tensor(x)).data
        bn2 = ly.BatchNorm(3)
        out_perm = bn2.forward(Tensor(x[:, p])).data
        ok = ok and np.array_equal(out[:, p], out_perm)
    return CheckResult("nonlinearity_equivariance", ok, 0.0 if ok else np.inf,
                       "ReLU and BN commute with anchor permutation bit-exactly")


def check_permutation_layer(sym: rg.SolidSymmetry, rng: np.random.Generator) -> CheckResult:
    f = rng.standard_normal((sym.num_anchors, 3))
    rows = ly.permutation_expand(Tensor(f), sym).data
    distinct = len({r.tobytes() for r in rows}) == sym.order
    ok = distinct
    for _ in range(3):
        g = int(rng.integers(0, sym.order))
        f_rot = f[sym.anchor_perm.perm[sym.group.inverse[g]]]
        rows_rot = ly.permutation_expand(Tensor(f_rot), sym).data
        reindex = sym.group.cayley[sym.group.inverse[g]]
        ok = ok and np.allclose(rows_rot, rows[reindex], atol=1e-12)
    return CheckResult("permutation_layer", ok, 0.0 if ok else np.inf,
                       f"{sym.order} distinct rows; rotation = row reindexing")


# ---------------------------------------------------------------------------
# gradients


def check_gradients(sym: rg.SolidSymmetry, rng: np.random.Generator,
                    tol: float = 1e-5) -> CheckResult:
    worst = 0.0
    total_coords = 0
    details = []

    def run(name, f, params, max_coords=80):
        nonlocal worst, total_coords
        report = ag.grad_check(f, params, step=1e-5, max_coords=max_coords, rng=rng)
        worst = max(worst, report.max_rel_err)
        total_coords += report.checked
        details.append(f"{name}:{report.max_rel_err:.1e}")

    # quotient conv (both modes) wrt kernel weights and input features
    conv = ly.QuotientConv(sym, 2, 3, radius=0.5, rng=rng)
    positions = rng.uniform(-0.5, 0.5, size=(10, 3))
    centers = positions[:5]
    feats = Tensor(rng.standard_normal((10, sym.num_anchors, 2)), requires_grad=True)
    w_out = Tensor(rng.standard_normal((5, sym.num_anchors, 3)))
    for mode in ly.CONV_MODES:
        plan = conv.prepare([positions], [centers], mode=mode)
        run(f"conv_{mode}",
            lambda p=plan: ag.contract(conv.forward(feats, p), w_out, "mac,mac->"),
            [conv.kernel.free_weights, feats])

    # batch norm (training mode)
    bn = ly.BatchNorm(3)
    x_bn = Tensor(rng.standard_normal((8, sym.num_anchors, 3)), requires_grad=True)
    w_bn = Tensor(rng.standard_normal((8, sym.num_anchors, 3)))
    run("batch_norm", lambda: ag.contract(bn.forward(x_bn), w_bn, "nac,nac->"),
        [bn.gamma, bn.beta, x_bn])

    # ga_pool
    gap = ly.GAPool(4, rng)
    x_gap = Tensor(rng.standard_normal((sym.num_anchors, 4)), requires_grad=True)
    w_gap = Tensor(rng.standard_normal(4))
    run("ga_pool", lambda: ag.contract(gap.forward(x_gap), w_gap, "c,c->"),
        [gap.w, x_gap])

    # rotation head (BCE loss) and class head (CE + BCE losses)
    rhead = ly.RotationHead(4, 6, sym, rng)
    f1 = Tensor(rng.standard_normal((2, sym.num_anchors, 4)), requires_grad=True)
    f2 = Tensor(rng.standard_normal((2, sym.num_anchors, 4)), requires_grad=True)
    targets = (rng.uniform(size=(2, sym.order, sym.num_anchors)) < 0.1).astype(float)
    run("rotation_head",
        lambda: tr.binary_cross_entropy(rhead.pair_scores(f1, f2), targets),
        [rhead.w1, rhead.b1, rhead.w2, rhead.b2, f1, f2])

    chead = ly.ClassHead(3, 4, sym, rng)
    fc = Tensor(rng.standard_normal((2, sym.num_anchors, 4)), requires_grad=True)
    labels = np.array([0, 2])
    run("class_head",
        lambda: tr.cross_entropy(chead.class_logits(fc), labels),
        [chead.reference, fc])

    # group conv baseline
    gconv = ly.GroupConv(sym, 2, 2, radius=0.5, rng=rng)
    g_feats = Tensor(rng.standard_normal((8, sym.order, 2)), requires_grad=True)
    g_pos = rng.uniform(-0.5, 0.5, size=(8, 3))
    g_plan = gconv.prepare([g_pos], [g_pos[:4]])
    g_w = Tensor(rng.standard_normal((4, sym.order, 2)))
    run("group_conv",
        lambda: ag.contract(gconv.forward(g_feats, g_plan), g_w, "mvc,mvc->"),
        [gconv.kernel, g_feats], max_coords=40)

    # spatial max pooling and the nonlinearity wrappers
    pool = ly.SpatialPool(0.5)
    p_pos = rng.uniform(-0.6, 0.6, size=(14, 3))
    p_plan = pool.prepare([p_pos])
    x_pool = Tensor(rng.standard_normal((14, sym.num_anchors, 2)), requires_grad=True)
    w_pool = Tensor(rng.standard_normal((p_plan.num_segments, sym.num_anchors, 2)))
    run("spatial_pool",
        lambda: ag.contract(pool.forward(x_pool, p_plan), w_pool, "sac,sac->"),
        [x_pool])
    x_act = Tensor(rng.standard_normal((5, 6)) + 0.3, requires_grad=True)
    w_act = Tensor(rng.standard_normal((5, 6)))
    run("leaky_relu", lambda: ag.contract(ag.leaky_relu(x_act, 0.1), w_act, "ij,ij->"),
        [x_act])

    # permutation layer
    x_pe = Tensor(rng.standard_normal((sym.num_anchors, 3)), requires_grad=True)
    w_pe = Tensor(rng.standard_normal((sym.order, sym.num_anchors * 3)))
    run("permutation_expand",
        lambda: ag.contract(ly.permutation_expand(x_pe, sym), w_pe, "gk,gk->"),
        [x_pe])

    # losses standalone
    logits_ce = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    run("cross_entropy", lambda: tr.cross_entropy(logits_ce, np.array([0, 1, 2, 3, 4, 0])),
        [logits_ce])
    logits_bce = Tensor(rng.standard_normal((4, 7)), requires_grad=True)
    t_bce = (rng.uniform(size=(4, 7)) < 0.3).astype(float)
    run("binary_cross_entropy", lambda: tr.binary_cross_entropy(logits_bce, t_bce),
        [logits_bce])

    result = _result("gradient_checks", worst, tol, " ".join(details))
    result.count = total_coords
    return result


# ---------------------------------------------------------------------------
# aggregate


def run_all(solid: str = "icosa", seed: int = 0, fast: bool = False,
            extra_kernel_points: np.ndarray | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    sym = rg.build_solid_symmetry(solid)
    trials_fvn = 3 if fast else 5
    trials_gc = 2 if fast else 4
    trials_eq = 2 if fast else 4
    results = [
        check_group_axioms(),
        check_quotient_counts(sym),
        check_faithfulness(sym),
        check_section(sym),
        check_kernel_closure(sym, extra_points=extra_kernel_points),
        check_steerability(sym, rng),
        check_gather_oracle(sym, rng),
        check_fast_vs_naive(sym, rng, trials=trials_fvn),
        check_group_conv_consistency(sym, rng, trials=trials_gc),
        check_end_to_end_equivariance(sym, rng, trials=trials_eq),
        check_group_conv_equivariance(sym, rng),
        check_invariance(sym, rng),
        check_nonlinearity_equivariance(sym, rng),
        check_permutation_layer(sym, rng),
    ]
    if not fast:
        results.append(check_gradients(sym, rng))
    return results
