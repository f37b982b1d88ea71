import numpy as np
import pytest

from quotconv import autograd as ag
from quotconv import cloud as cl
from quotconv import layers as ly
from quotconv import rotgroup as rg
from quotconv.autograd import Tensor
from quotconv.checks import (backbone_equivariance_error, check_end_to_end_equivariance,
                             check_fast_vs_naive, check_group_conv_consistency,
                             check_group_conv_equivariance, make_test_backbone)

SYM = rg.build_solid_symmetry("icosa")
RNG = np.random.default_rng(0)


def random_cloud(rng, n=20):
    return rng.uniform(-0.5, 0.5, size=(n, 3))


# ---------------------------------------------------------------------------
# lift


def test_lift_broadcasts_ones():
    pc = cl.PointCloud(random_cloud(np.random.default_rng(1), 5),
                       np.ones((5, 1)))
    field = ly.lift(pc, SYM.num_anchors)
    assert field.values.shape == (5, 12, 1)
    assert np.all(field.values.data == 1.0)


def test_lift_is_anchor_permutation_invariant():
    rng = np.random.default_rng(2)
    pc = cl.PointCloud(random_cloud(rng, 6), rng.standard_normal((6, 3)))
    field = ly.lift(pc, SYM.num_anchors)
    for g in rng.integers(0, 60, size=4):
        p = SYM.anchor_perm.perm[g]
        assert np.array_equal(field.values.data[:, p, :], field.values.data)


def test_lift_rejects_lifted_features():
    pc = cl.PointCloud(random_cloud(np.random.default_rng(3), 4))
    pc.features = np.ones((4, 12, 2))
    with pytest.raises(ag.ShapeMismatch):
        ly.lift(pc, 12)


# ---------------------------------------------------------------------------
# quotient convolution


def test_conv_zero_kernel_gives_zero_output():
    rng = np.random.default_rng(4)
    conv = ly.QuotientConv(SYM, 2, 3, radius=0.5, rng=rng)
    conv.kernel.free_weights.data[:] = 0.0
    positions = random_cloud(rng)
    field = ly.FeatureField(positions, Tensor(rng.standard_normal((20, 12, 2))))
    out = ly.quotient_conv_forward(conv, field, positions[:4])
    assert np.all(out.values.data == 0.0)


def test_conv_gather_location_counts():
    rng = np.random.default_rng(5)
    conv = ly.QuotientConv(SYM, 1, 1, radius=0.5, rng=rng)
    positions = random_cloud(rng, 8)
    fast = conv.prepare([positions], [positions], mode="fast")
    naive = conv.prepare([positions], [positions], mode="naive")
    assert fast.gather_locations_per_center == 13
    assert naive.gather_locations_per_center == 156


def test_fast_equals_naive_on_random_clouds():
    result = check_fast_vs_naive(SYM, np.random.default_rng(6), trials=4)
    assert result.passed, result


def test_conv_single_point_one_hot_kernel_reads_feature():
    # Hand-computable single-term sum: one input point placed exactly at the
    # rotated kernel location R_{s_i} t_{k0}, kernel one-hot at (j0, k0), and
    # the input feature one-hot at anchor perm[s_i][j0]. Kernel points are
    # separated by more than sigma, so only this term survives and the output
    # at coset i reads the feature value with w(0) = 1.
    rng = np.random.default_rng(7)
    conv = ly.QuotientConv(SYM, 1, 1, radius=0.5, rng=rng)
    k0, j0, i = 3, 5, 0
    s_i = SYM.quotient.section[i]
    rot = SYM.group.elements[s_i]
    center = np.zeros((1, 3))
    positions = (rot @ conv.kpoints.points[k0])[None, :]
    feat_value = 2.75
    a0 = SYM.anchor_perm.perm[s_i][j0]
    features = np.zeros((1, 12, 1))
    features[0, a0, 0] = feat_value
    conv.kernel.free_weights.data[:] = 0.0
    oid = conv.orbits.orbit_of[j0, k0]
    conv.kernel.free_weights.data[oid, 0, 0] = 1.0
    out = ly.quotient_conv_forward(
        conv, ly.FeatureField(positions, Tensor(features)), center).values.data
    assert abs(out[0, i, 0] - feat_value) < 1e-12


def test_conv_equivariance_random_field():
    # Random (not just lifted) input fields transform by the anchor
    # permutation; outputs must follow.
    rng = np.random.default_rng(8)
    conv = ly.QuotientConv(SYM, 2, 2, radius=0.55, rng=rng)
    positions = random_cloud(rng, 24)
    centers = positions[:10]
    f = rng.standard_normal((24, 12, 2))
    out = ly.quotient_conv_forward(conv, ly.FeatureField(positions, Tensor(f)),
                                   centers).values.data
    for _ in range(4):
        g = int(rng.integers(0, 60))
        rot = SYM.group.elements[g]
        t = rng.uniform(-1, 1, size=3)
        perm_inv = SYM.anchor_perm.perm[SYM.group.inverse[g]]
        out_rot = ly.quotient_conv_forward(
            conv, ly.FeatureField(positions @ rot.T + t, Tensor(f[:, perm_inv, :])),
            centers @ rot.T + t).values.data
        assert np.abs(out_rot - out[:, perm_inv, :]).max() < 1e-10


def test_conv_shape_validation():
    rng = np.random.default_rng(9)
    conv = ly.QuotientConv(SYM, 2, 3, radius=0.5, rng=rng)
    positions = random_cloud(rng, 6)
    plan = conv.prepare([positions], [positions])
    with pytest.raises(ag.ShapeMismatch):
        conv.forward(Tensor(np.zeros((6, 12, 5))), plan)
    with pytest.raises(ValueError):
        ly.QuotientConv(SYM, 2, 3, radius=0.5, rng=rng, mode="fancy")


# ---------------------------------------------------------------------------
# group convolution


def test_group_conv_zero_kernel():
    rng = np.random.default_rng(10)
    gconv = ly.GroupConv(SYM, 2, 2, radius=0.5, rng=rng)
    gconv.kernel.data[:] = 0.0
    positions = random_cloud(rng, 10)
    out = ly.group_conv_forward(
        gconv, ly.FeatureField(positions, Tensor(rng.standard_normal((10, 60, 2)))),
        positions[:3])
    assert np.all(out.values.data == 0.0)


def test_group_conv_five_times_quotient_on_coset_constant_data():
    result = check_group_conv_consistency(SYM, np.random.default_rng(11), trials=3)
    assert result.passed, result


def test_group_conv_output_is_coset_constant_for_steerable_kernel():
    rng = np.random.default_rng(12)
    qconv = ly.QuotientConv(SYM, 2, 2, radius=0.5, rng=rng)
    gconv = ly.GroupConv(SYM, 2, 2, radius=0.5, rng=rng,
                         kernel_radius=qconv.kernel_radius, sigma=qconv.sigma)
    gconv.set_kernel(qconv.kernel.expand().data[SYM.quotient.coset_of])
    positions = random_cloud(rng, 16)
    f = rng.standard_normal((16, 12, 2))[:, SYM.quotient.coset_of, :]
    out = ly.group_conv_forward(gconv, ly.FeatureField(positions, Tensor(f)),
                                positions[:5]).values.data
    ref = out[:, SYM.quotient.section[SYM.quotient.coset_of], :]
    assert np.abs(out - ref).max() < 1e-9 * np.abs(out).max()


def test_group_conv_equivariance():
    result = check_group_conv_equivariance(SYM, np.random.default_rng(13))
    assert result.passed, result


# ---------------------------------------------------------------------------
# batch norm


def test_batch_norm_constant_input_returns_beta():
    bn = ly.BatchNorm(3)
    bn.beta.data[:] = [1.0, -2.0, 0.5]
    x = Tensor(np.full((6, 12, 3), 4.2))
    out = bn.forward(x).data
    assert np.abs(out - bn.beta.data).max() < 1e-6


def test_batch_norm_permuted_anchors_bit_identical():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((9, 12, 4))
    for g in rng.integers(0, 60, size=3):
        p = SYM.anchor_perm.perm[g]
        out = ly.BatchNorm(4).forward(Tensor(x)).data
        out_p = ly.BatchNorm(4).forward(Tensor(x[:, p, :])).data
        assert np.array_equal(out[:, p, :], out_p)


def test_batch_norm_matches_mean_var_oracle():
    rng = np.random.default_rng(15)
    x = rng.standard_normal((7, 12, 3))
    bn = ly.BatchNorm(3)
    bn.gamma.data[:] = rng.standard_normal(3)
    bn.beta.data[:] = rng.standard_normal(3)
    out = bn.forward(Tensor(x)).data
    mu = x.mean(axis=(0, 1))
    var = x.var(axis=(0, 1))
    want = (x - mu) / np.sqrt(var + bn.eps) * bn.gamma.data + bn.beta.data
    assert np.abs(out - want).max() < 1e-12


def test_batch_norm_running_stats_and_eval_mode():
    rng = np.random.default_rng(16)
    bn = ly.BatchNorm(2, momentum=0.5)
    x = rng.standard_normal((20, 12, 2)) * 3.0 + 1.0
    bn.forward(Tensor(x))
    assert np.abs(bn.running_mean - 0.5 * x.mean(axis=(0, 1))).max() < 1e-12
    bn.training = False
    y = rng.standard_normal((4, 12, 2))
    out = bn.forward(Tensor(y)).data
    want = (y - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    assert np.abs(out - want).max() < 1e-12


# ---------------------------------------------------------------------------
# spatial pooling


def test_spatial_pool_single_cell_is_global_max():
    rng = np.random.default_rng(17)
    f = rng.standard_normal((10, 12, 2))
    field = ly.FeatureField(rng.uniform(0, 0.1, size=(10, 3)), Tensor(f))
    out = ly.spatial_pool(field, cell=5.0)
    assert out.values.shape == (1, 12, 2)
    assert np.array_equal(out.values.data[0], f.max(axis=0))


def test_spatial_pool_commutes_with_anchor_permutation():
    rng = np.random.default_rng(18)
    pos = rng.uniform(-1, 1, size=(30, 3))
    f = rng.standard_normal((30, 12, 2))
    out = ly.spatial_pool(ly.FeatureField(pos, Tensor(f)), 0.5).values.data
    for g in rng.integers(0, 60, size=3):
        p = SYM.anchor_perm.perm[g]
        out_p = ly.spatial_pool(ly.FeatureField(pos, Tensor(f[:, p, :])), 0.5).values.data
        assert np.array_equal(out_p, out[:, p, :])


def test_spatial_pool_matches_brute_force_grouping():
    rng = np.random.default_rng(19)
    pos = rng.uniform(-1, 1, size=(25, 3))
    f = rng.standard_normal((25, 12, 2))
    cell = 0.6
    out = ly.spatial_pool(ly.FeatureField(pos, Tensor(f)), cell)
    groups: dict[tuple, list[int]] = {}
    for i, p in enumerate(pos):
        groups.setdefault(tuple(np.floor(p / cell).astype(int)), []).append(i)
    assert len(out.positions) == len(groups)
    for key, members in groups.items():
        row = np.argmin(np.linalg.norm(out.positions - pos[members].mean(axis=0), axis=1))
        assert np.array_equal(out.values.data[row], f[members].max(axis=0))


# ---------------------------------------------------------------------------
# GA pooling


def test_ga_pool_identical_anchors_returns_feature():
    rng = np.random.default_rng(20)
    gap = ly.GAPool(5, rng)
    row = rng.standard_normal(5)
    f = Tensor(np.tile(row, (12, 1)))
    out = gap.forward(f).data
    assert np.abs(out - row).max() < 1e-12


def test_ga_pool_anchor_permutation_invariance():
    rng = np.random.default_rng(21)
    gap = ly.GAPool(4, rng)
    f = rng.standard_normal((12, 4))
    base = gap.forward(Tensor(f)).data
    for g in rng.integers(0, 60, size=5):
        p = SYM.anchor_perm.perm[g]
        out = gap.forward(Tensor(f[p])).data
        assert np.abs(out - base).max() < 1e-12


def test_ga_pool_gradient():
    rng = np.random.default_rng(22)
    gap = ly.GAPool(3, rng)
    f = Tensor(rng.standard_normal((2, 12, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3)))

    def loss():
        return ag.contract(gap.forward(f), w, "bc,bc->")

    report = ag.grad_check(loss, [gap.w, f], step=1e-5)
    assert report.passed(1e-6)


# ---------------------------------------------------------------------------
# permutation layer


def test_permutation_expand_identity_row():
    rng = np.random.default_rng(23)
    f = rng.standard_normal((12, 3))
    rows = ly.permutation_expand(Tensor(f), SYM).data
    assert rows.shape == (60, 36)
    e = SYM.group.identity_index
    assert np.array_equal(rows[e], f.reshape(-1))


def test_permutation_expand_distinct_rows_for_distinct_anchors():
    rng = np.random.default_rng(24)
    f = rng.standard_normal((12, 2))      # generic: all anchor values distinct
    rows = ly.permutation_expand(Tensor(f), SYM).data
    assert len({r.tobytes() for r in rows}) == 60


def test_permutation_expand_constant_features_degenerate():
    f = np.tile(np.array([1.0, 2.0]), (12, 1))
    rows = ly.permutation_expand(Tensor(f), SYM).data
    assert len({r.tobytes() for r in rows}) == 1


def test_permutation_expand_rotation_is_row_reindexing():
    rng = np.random.default_rng(25)
    f = rng.standard_normal((12, 2))
    rows = ly.permutation_expand(Tensor(f), SYM).data
    for g in rng.integers(0, 60, size=4):
        perm_inv = SYM.anchor_perm.perm[SYM.group.inverse[g]]
        rows_rot = ly.permutation_expand(Tensor(f[perm_inv]), SYM).data
        reindex = SYM.group.cayley[SYM.group.inverse[g]]
        assert np.array_equal(rows_rot, rows[reindex])


# ---------------------------------------------------------------------------
# rotation head


def test_rotation_head_shapes():
    rng = np.random.default_rng(26)
    head = ly.RotationHead(4, 8, SYM, rng)
    f1 = Tensor(rng.standard_normal((12, 4)))
    f2 = Tensor(rng.standard_normal((12, 4)))
    scores, logits = ly.rotation_head(f1, f2, head)
    assert scores.shape == (60, 12)
    assert logits.shape == (60,)
    assert np.allclose(logits.data, scores.data.sum(axis=1), atol=1e-12)


def test_rotation_head_identity_row_compares_same_anchors():
    # For f2 = f1 and g = identity, each anchor pair stacks a feature with
    # itself; the identity row must equal scoring [f1[a]; f1[a]] directly.
    rng = np.random.default_rng(27)
    head = ly.RotationHead(3, 6, SYM, rng)
    f = rng.standard_normal((12, 3))
    scores, _ = ly.rotation_head(Tensor(f), Tensor(f), head)
    e = SYM.group.identity_index
    pair = np.concatenate([f, f], axis=1)
    h = np.maximum(pair @ head.w1.data + head.b1.data, 0.0)
    want = (h @ head.w2.data)[:, 0] + head.b2.data[0]
    assert np.abs(scores.data[e] - want).max() < 1e-12


def test_rotation_head_scores_permute_with_applied_rotation():
    # If f2 is f1 with anchors moved by g*, row g* of the score table equals
    # the identity row of the unrotated pair (structural consistency).
    rng = np.random.default_rng(28)
    head = ly.RotationHead(3, 6, SYM, rng)
    f1 = rng.standard_normal((12, 3))
    e = SYM.group.identity_index
    base, _ = ly.rotation_head(Tensor(f1), Tensor(f1), head)
    for g in rng.integers(0, 60, size=4):
        perm_inv = SYM.anchor_perm.perm[SYM.group.inverse[g]]
        f2 = f1[perm_inv]
        scores, logits = ly.rotation_head(Tensor(f1), Tensor(f2), head)
        assert np.abs(scores.data[g] - base.data[e]).max() < 1e-12
        assert int(np.argmax(logits.data)) in set(range(60))


# ---------------------------------------------------------------------------
# class head


def test_class_head_reference_copy_dominates():
    rng = np.random.default_rng(29)
    head = ly.ClassHead(4, 6, SYM, rng)
    f = rng.standard_normal((12, 6))
    head.reference.data[0] = f                      # class 0 = exact copy
    head.reference.data[1:] = rng.standard_normal((3, 12, 6)) * 0.1
    logits, best_rot = ly.class_head(Tensor(f), head)
    assert logits.shape == (4,)
    assert int(np.argmax(logits.data)) == 0
    assert best_rot[0] == SYM.group.identity_index


def test_class_head_rotation_invariance():
    rng = np.random.default_rng(30)
    head = ly.ClassHead(3, 4, SYM, rng)
    f = rng.standard_normal((12, 4))
    logits, _ = ly.class_head(Tensor(f), head)
    for g in rng.integers(0, 60, size=5):
        perm_inv = SYM.anchor_perm.perm[SYM.group.inverse[g]]
        logits_rot, _ = ly.class_head(Tensor(f[perm_inv]), head)
        assert np.abs(logits_rot.data - logits.data).max() < 1e-10
        assert int(np.argmax(logits_rot.data)) == int(np.argmax(logits.data))


def test_class_head_single_class_shape():
    rng = np.random.default_rng(31)
    head = ly.ClassHead(1, 3, SYM, rng)
    logits, best = ly.class_head(Tensor(rng.standard_normal((12, 3))), head)
    assert logits.shape == (1,)
    assert best.shape == (1,)


# ---------------------------------------------------------------------------
# end-to-end equivariance


def test_backbone_end_to_end_equivariance():
    result = check_end_to_end_equivariance(SYM, np.random.default_rng(32), trials=3)
    assert result.passed, result


def test_backbone_equivariance_with_pool_explicit():
    rng = np.random.default_rng(33)
    backbone = make_test_backbone(SYM, rng, with_pool=True)
    positions = rng.uniform(-0.5, 0.5, size=(40, 3))
    err = backbone_equivariance_error(SYM, backbone, positions, g=23,
                                      translation=np.array([0.3, -1.2, 0.7]))
    assert err < 1e-9


def test_group_conv_consistency_on_tetra():
    sym = rg.build_solid_symmetry("tetra")
    result = check_group_conv_consistency(sym, np.random.default_rng(40), trials=2)
    assert result.passed, result


def test_end_to_end_equivariance_on_octa():
    sym = rg.build_solid_symmetry("octa")
    result = check_end_to_end_equivariance(sym, np.random.default_rng(41), trials=2)
    assert result.passed, result


def test_conv_with_custom_edge_midpoint_shell():
    # A closed custom shell (edge midpoints) runs through the same orbit
    # machinery: steerability still exact, fast still equals naive.
    rng = np.random.default_rng(50)
    v = SYM.quotient.anchors
    mids = []
    for i in range(12):
        for j in range(i + 1, 12):
            if abs(v[i] @ v[j] - 1 / np.sqrt(5)) < 1e-9:
                mids.append(0.2 * (v[i] + v[j]) / np.linalg.norm(v[i] + v[j]))
    conv = ly.QuotientConv(SYM, 2, 2, radius=0.5, rng=rng,
                           extra_kernel_points=np.array(mids))
    assert conv.kpoints.count == 43
    positions = random_cloud(rng, 20)
    values = Tensor(rng.standard_normal((20, 12, 2)))
    centers = positions[:6]
    out_fast = conv.forward(values, conv.prepare([positions], [centers], mode="fast"))
    out_naive = conv.forward(values, conv.prepare([positions], [centers], mode="naive"))
    assert np.abs(out_fast.data - out_naive.data).max() < 1e-10
    # steerability of the expanded custom kernel is still bit-exact
    full = conv.kernel.expand().data
    for h in SYM.quotient.stabilizer:
        pa, pk = SYM.anchor_perm.perm[h], conv.kperm.kperm[h]
        assert np.array_equal(full, full[pa][:, pk])
