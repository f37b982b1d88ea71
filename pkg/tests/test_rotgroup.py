import numpy as np
import pytest

from quotconv import rotgroup as rg

ICOSA = rg.build_solid_symmetry("icosa")


@pytest.mark.parametrize("solid,order", [("tetra", 12), ("octa", 24), ("icosa", 60)])
def test_group_orders(solid, order):
    group = rg.generate_platonic_group(solid)
    assert group.order == order


@pytest.mark.parametrize("solid", rg.SOLIDS)
def test_identity_is_member_and_idempotent(solid):
    g = rg.generate_platonic_group(solid)
    e = g.identity_index
    assert np.allclose(g.elements[e], np.eye(3), atol=1e-12)
    assert g.cayley[e, e] == e


def test_cayley_closure_against_matrix_products():
    g = ICOSA.group
    products = np.einsum("iab,jbc->ijac", g.elements, g.elements)
    assert np.abs(products - g.elements[g.cayley]).max() < 1e-9


@pytest.mark.parametrize("solid", rg.SOLIDS)
def test_cayley_is_latin_square(solid):
    g = rg.generate_platonic_group(solid)
    n = g.order
    for i in range(n):
        assert sorted(g.cayley[i]) == list(range(n))
        assert sorted(g.cayley[:, i]) == list(range(n))


@pytest.mark.parametrize("solid", rg.SOLIDS)
def test_inverse_and_associativity(solid):
    g = rg.generate_platonic_group(solid)
    n = g.order
    e = g.identity_index
    assert np.all(g.cayley[np.arange(n), g.inverse] == e)
    assert np.all(g.cayley[g.inverse, np.arange(n)] == e)
    assert np.array_equal(g.cayley[g.cayley, :], g.cayley[:, g.cayley])


def test_icosa_element_order_histogram_matches_matrix_oracle():
    # Oracle: repeated matrix multiplication until the product returns to I.
    g = ICOSA.group
    oracle = {}
    for m in g.elements:
        cur = m.copy()
        k = 1
        while np.abs(cur - np.eye(3)).max() > 1e-9:
            cur = cur @ m
            k += 1
        oracle[k] = oracle.get(k, 0) + 1
    assert oracle == {1: 1, 2: 15, 3: 20, 5: 24}
    assert g.element_order_histogram() == oracle


def test_every_element_is_a_rotation():
    for m in ICOSA.group.elements:
        assert rg.is_rotation(m, tol=1e-9)


def test_generate_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        rg.generate_platonic_group("icosa", tol=1e-3)
    with pytest.raises(ValueError):
        rg.generate_platonic_group("icosa", tol=0.0)


def test_closure_overflow_on_non_closing_generator():
    # A rotation by 1 radian generates an infinite cyclic group.
    with pytest.raises(rg.ClosureOverflow):
        rg._close_under_multiplication([rg.rotation_z(1.0)], tol=1e-9, cap=120)


# ---------------------------------------------------------------------------
# icosahedron vertices


def test_icosa_vertices_are_unit():
    v = rg.icosa_vertices()
    assert v.shape == (12, 3)
    assert np.abs(np.linalg.norm(v, axis=1) - 1.0).max() < 1e-12


def test_icosa_vertex_zero_is_exact_pole():
    v = rg.icosa_vertices()
    assert tuple(v[0]) == (0.0, 0.0, 1.0)
    assert np.array_equal(v[11], -v[0])


def test_icosa_antipodal_closure():
    v = rg.icosa_vertices()
    for vec in v:
        assert np.linalg.norm(v + vec, axis=1).min() < 1e-9


def test_icosa_pairwise_dots_brute_force():
    # Oracle: all 144 pairwise dot products belong to {1, -1, +-1/sqrt(5)}.
    v = rg.icosa_vertices()
    allowed = np.array([1.0, -1.0, 1.0 / np.sqrt(5.0), -1.0 / np.sqrt(5.0)])
    for i in range(12):
        for j in range(12):
            d = float(v[i] @ v[j])
            assert np.abs(allowed - d).min() < 1e-9


# ---------------------------------------------------------------------------
# quotient


@pytest.mark.parametrize("solid,anchors,stab", [("tetra", 4, 3), ("octa", 6, 4),
                                                ("icosa", 12, 5)])
def test_quotient_counts(solid, anchors, stab):
    sym = rg.build_solid_symmetry(solid)
    q = sym.quotient
    assert q.num_anchors == anchors
    assert len(q.stabilizer) == stab
    assert anchors * stab == sym.order
    assert np.all(np.bincount(q.coset_of) == stab)


def test_section_maps_anchor_zero_to_each_anchor():
    q = ICOSA.quotient
    for a in range(q.num_anchors):
        mapped = ICOSA.group.elements[q.section[a]] @ q.anchors[0]
        assert np.linalg.norm(mapped - q.anchors[a]) < 1e-9
    assert np.array_equal(q.coset_of[q.section], np.arange(q.num_anchors))


def test_coset_members_reach_their_anchor():
    q = ICOSA.quotient
    for g in range(ICOSA.order):
        mapped = ICOSA.group.elements[g] @ q.anchors[0]
        assert np.linalg.norm(mapped - q.anchors[q.coset_of[g]]) < 1e-9


def test_identity_in_coset_zero_with_identity_permutation():
    e = ICOSA.group.identity_index
    assert ICOSA.quotient.coset_of[e] == 0
    assert np.array_equal(ICOSA.anchor_perm.perm[e], np.arange(12))


def test_stabilizer_brute_force_scan():
    # Oracle: scan all 60 permutations for rows fixing anchor 0; those rows
    # must also fix the antipodal anchor (z-axis rotations fix both poles).
    perm = ICOSA.anchor_perm.perm
    fixing = [g for g in range(60) if perm[g][0] == 0]
    assert sorted(ICOSA.quotient.stabilizer) == fixing
    assert len(fixing) == 5
    antipodal = 11
    for g in fixing:
        assert perm[g][antipodal] == antipodal


def test_stabilizer_is_cyclic_rotations_about_z():
    group = ICOSA.group
    stab = list(ICOSA.quotient.stabilizer)
    z = np.array([0.0, 0.0, 1.0])
    for g in stab:
        assert np.linalg.norm(group.elements[g] @ z - z) < 1e-9
    # cyclic: some member's powers enumerate the whole subgroup
    found = False
    for g in stab:
        powers = {group.identity_index}
        cur = g
        while cur not in powers:
            powers.add(cur)
            cur = group.cayley[cur, g]
        found = found or (sorted(powers) == sorted(stab))
    assert found


# ---------------------------------------------------------------------------
# permutation representation


def test_anchor_perm_rows_are_bijections():
    for row in ICOSA.anchor_perm.perm:
        assert sorted(row) == list(range(12))


def test_anchor_perm_faithful():
    rows = {tuple(r) for r in ICOSA.anchor_perm.perm}
    assert len(rows) == 60


def test_anchor_perm_homomorphism_all_pairs():
    perm = ICOSA.anchor_perm.perm
    cay = ICOSA.group.cayley
    for i in range(60):
        assert np.array_equal(perm[cay[i]], perm[i][perm])


def test_perm_matches_geometry():
    # perm[g][a] is defined as the index of R_g @ anchors[a]
    q = ICOSA.quotient
    rng = np.random.default_rng(0)
    for g in rng.integers(0, 60, size=8):
        rotated = q.anchors @ ICOSA.group.elements[g].T
        assert np.abs(rotated - q.anchors[ICOSA.anchor_perm.perm[g]]).max() < 1e-9


# ---------------------------------------------------------------------------
# SE(3) action on the quotient


def test_group_act_identity():
    q, perm = ICOSA.quotient, ICOSA.anchor_perm
    a, p = rg.group_act_se3(np.eye(3), np.zeros(3), 3, np.array([0.1, 0.2, 0.3]), q, perm)
    assert a == 3
    assert np.allclose(p, [0.1, 0.2, 0.3])


def test_group_act_pure_translation():
    q, perm = ICOSA.quotient, ICOSA.anchor_perm
    t = np.array([1.0, -2.0, 3.0])
    a, p = rg.group_act_se3(np.eye(3), t, 7, np.array([0.5, 0.0, 0.0]), q, perm)
    assert a == 7
    assert np.allclose(p, t + [0.5, 0.0, 0.0])


def test_group_act_stabilizer_fixes_origin_anchor0():
    q, perm = ICOSA.quotient, ICOSA.anchor_perm
    for h in q.stabilizer:
        a, p = rg.group_act_se3(ICOSA.group.elements[h], np.zeros(3), 0, np.zeros(3),
                                q, perm)
        assert a == 0
        assert np.allclose(p, 0.0)


def test_group_act_composition_matches_se3_product():
    q, perm = ICOSA.quotient, ICOSA.anchor_perm
    rng = np.random.default_rng(3)
    for _ in range(5):
        g1, g2 = rng.integers(0, 60, size=2)
        r1, r2 = ICOSA.group.elements[g1], ICOSA.group.elements[g2]
        t1, t2 = rng.uniform(-1, 1, size=(2, 3))
        x_anchor, x_p = int(rng.integers(0, 12)), rng.uniform(-1, 1, size=3)
        a_inner, p_inner = rg.group_act_se3(r2, t2, x_anchor, x_p, q, perm)
        a_seq, p_seq = rg.group_act_se3(r1, t1, a_inner, p_inner, q, perm)
        r12 = r1 @ r2
        t12 = t1 + r1 @ t2
        a_once, p_once = rg.group_act_se3(r12, t12, x_anchor, x_p, q, perm)
        assert a_seq == a_once
        assert np.allclose(p_seq, p_once, atol=1e-9)


def test_group_act_rejects_foreign_rotation():
    q, perm = ICOSA.quotient, ICOSA.anchor_perm
    with pytest.raises(rg.AmbiguousMatch):
        rg.group_act_se3(rg.rotation_z(0.5), np.zeros(3), 0, np.zeros(3), q, perm)
