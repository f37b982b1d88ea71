"""Finite rotation subgroups of SO(3) from Platonic-solid symmetry.

Builds the tetrahedral / octahedral / icosahedral rotation groups by closure
from two generators, the quotient by the vertex stabilizer (anchors = solid
vertices, one aligned to +z), the section map picking one representative per
coset, and the faithful permutation action on the anchors.

All tables are plain integer numpy arrays; rotation matrices are stored
directly (no quaternions) so that deduplication and matching are unambiguous.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0

SOLIDS = ("tetra", "octa", "icosa")

# vertex count, vertex valence (= stabilizer order), group order
_SOLID_SHAPE = {
    "tetra": (4, 3, 12),
    "octa": (6, 4, 24),
    "icosa": (12, 5, 60),
}

_MATCH_TOL = 1e-6  # matrices of distinct elements differ by >= ~0.38


class ClosureOverflow(RuntimeError):
    """Generator closure exceeded the largest admissible group order."""


class AmbiguousMatch(ValueError):
    """A rotated anchor did not match exactly one anchor within tolerance."""


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    c, s = math.cos(angle), math.sin(angle)
    cross = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(a, a)


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(m: np.ndarray, tol: float = 1e-12) -> bool:
    """Rotation3 invariant: orthonormal with determinant +1."""
    m = np.asarray(m)
    if m.shape != (3, 3):
        return False
    return (np.abs(m.T @ m - np.eye(3)).max() < tol
            and abs(np.linalg.det(m) - 1.0) < tol)


def _sorted_pole_aligned(raw: np.ndarray, pole_vertex: np.ndarray) -> np.ndarray:
    """Rotate ``raw`` vertices so ``pole_vertex`` lands on +z, sort, snap poles."""
    v = pole_vertex / np.linalg.norm(pole_vertex)
    z = np.array([0.0, 0.0, 1.0])
    if np.allclose(v, z):
        rot = np.eye(3)
    else:
        axis = np.cross(v, z)
        angle = math.acos(np.clip(v @ z, -1.0, 1.0))
        rot = rotation_about_axis(axis, angle)
    verts = raw @ rot.T
    # Deterministic order: descending z, then azimuth (keys rounded well above
    # double noise so mathematically equal coordinates compare equal).
    keys = [(-round(p[2] * 1e12), round(math.atan2(p[1], p[0]) * 1e12)) for p in verts]
    verts = verts[sorted(range(len(verts)), key=lambda i: keys[i])]
    if np.linalg.norm(verts[0] - z) > 1e-9:
        raise AmbiguousMatch("pole vertex did not align to +z")
    verts[0] = z
    bottom = np.linalg.norm(verts + z, axis=1)
    j = int(np.argmin(bottom))
    if bottom[j] < 1e-9:
        verts[j] = -z
    verts = np.ascontiguousarray(verts)
    verts.flags.writeable = False
    return verts


def icosa_vertices() -> np.ndarray:
    """The 12 unit icosahedron vertices with vertex 0 exactly at (0,0,1).

    Cyclic permutations of (0, +-1, +-phi), normalized, rigidly rotated so the
    vertex (0,1,phi)/|.| becomes the +z pole.
    """
    phi = GOLDEN
    base = []
    for s1 in (1.0, -1.0):
        for s2 in (1.0, -1.0):
            vec = (0.0, s1, s2 * phi)
            for shift in range(3):
                base.append(tuple(vec[(i - shift) % 3] for i in range(3)))
    raw = np.array(sorted(set(base)))
    assert raw.shape == (12, 3)
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    return _sorted_pole_aligned(raw, np.array([0.0, 1.0, phi]))


def tetra_vertices() -> np.ndarray:
    raw = np.array([[1.0, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / math.sqrt(3)
    return _sorted_pole_aligned(raw, raw[0])


def octa_vertices() -> np.ndarray:
    raw = np.concatenate([np.eye(3), -np.eye(3)])
    return _sorted_pole_aligned(raw, np.array([0.0, 0.0, 1.0]))


def solid_vertices(solid: str) -> np.ndarray:
    if solid == "tetra":
        return tetra_vertices()
    if solid == "octa":
        return octa_vertices()
    if solid == "icosa":
        return icosa_vertices()
    raise ValueError(f"unknown solid {solid!r}; expected one of {SOLIDS}")


@dataclass(frozen=True)
class FiniteRotationGroup:
    """Element list plus integer Cayley/inverse tables."""

    solid: str
    elements: np.ndarray        # (G, 3, 3)
    cayley: np.ndarray          # (G, G) element indices
    inverse: np.ndarray         # (G,) element indices
    identity_index: int

    @property
    def order(self) -> int:
        return len(self.elements)

    def element_order(self, g: int) -> int:
        k, cur = 1, g
        while cur != self.identity_index:
            cur = int(self.cayley[cur, g])
            k += 1
        return k

    def element_order_histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(self.element_order(g) for g in range(self.order)).items()))


@dataclass(frozen=True)
class QuotientS2:
    """Anchors (solid vertices), coset assignment, section, stabilizer."""

    anchors: np.ndarray         # (A, 3) unit vectors, anchor 0 = +z
    coset_of: np.ndarray        # (G,) anchor index per element
    section: np.ndarray         # (A,) element index per anchor
    stabilizer: np.ndarray      # (S,) element indices fixing anchor 0
    group: FiniteRotationGroup = field(repr=False)

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)


@dataclass(frozen=True)
class AnchorPermutationRep:
    """perm[g][a] = index of elements[g] @ anchors[a] (a faithful action)."""

    perm: np.ndarray            # (G, A) anchor indices

    def inverse_row(self, group: FiniteRotationGroup, g: int) -> np.ndarray:
        return self.perm[group.inverse[g]]


def _find_element(elements: np.ndarray, m: np.ndarray, tol: float = _MATCH_TOL) -> int:
    dists = np.abs(elements - m[None]).max(axis=(1, 2))
    idx = int(np.argmin(dists))
    if dists[idx] >= tol:
        raise AmbiguousMatch("matrix does not match any group element")
    return idx


def _close_under_multiplication(generators: list[np.ndarray], tol: float,
                                cap: int = 120) -> np.ndarray:
    elements = [np.eye(3)]
    stack = np.array(elements)

    def lookup(m):
        return np.abs(stack - m[None]).max(axis=(1, 2)).min() < tol

    frontier = []
    for g in generators:
        if not lookup(g):
            elements.append(g)
            stack = np.array(elements)
            frontier.append(g)
    while frontier:
        new_frontier = []
        for a in list(elements):
            for b in frontier:
                for p in (a @ b, b @ a):
                    if not lookup(p):
                        elements.append(p)
                        stack = np.array(elements)
                        new_frontier.append(p)
                        if len(elements) > cap:
                            raise ClosureOverflow(
                                f"closure exceeded {cap} elements; bad generators or tolerance")
        frontier = new_frontier
    return stack


def _canonical_order(elements: np.ndarray) -> np.ndarray:
    # Lexicographic order on the flattened matrix, rounded far above double
    # noise so the order is stable across runs and platforms.
    keys = [tuple(int(round(x * 1e12)) for x in m.reshape(-1)) for m in elements]
    return elements[sorted(range(len(elements)), key=lambda i: keys[i])]


def generate_platonic_group(solid: str, tol: float = 1e-9) -> FiniteRotationGroup:
    """Construct the rotation group of a Platonic solid by generator closure.

    Generators: the n-fold vertex rotation about +z (n = vertex valence) and
    the 2-fold rotation through the midpoint of an edge adjacent to vertex 0.
    """
    if not 0.0 < tol <= 1e-6:
        raise ValueError(f"tol must lie in (0, 1e-6], got {tol}")
    verts = solid_vertices(solid)
    num_vertices, valence, expected_order = _SOLID_SHAPE[solid]
    assert len(verts) == num_vertices
    g_vertex = rotation_z(2.0 * math.pi / valence)
    g_edge = rotation_about_axis(verts[0] + verts[1], math.pi)
    elements = _close_under_multiplication([g_vertex, g_edge], tol)
    if len(elements) != expected_order:
        raise ClosureOverflow(
            f"{solid} closure produced {len(elements)} elements, expected {expected_order}")
    elements = _canonical_order(elements)

    # Every element must map the vertex set onto itself.
    for m in elements:
        rotated = verts @ m.T
        dists = np.linalg.norm(rotated[:, None, :] - verts[None, :, :], axis=2)
        if np.abs(np.sort(dists.min(axis=1))).max() > 1e-9:
            raise AmbiguousMatch(f"{solid}: an element does not preserve the vertex set")

    order = len(elements)
    cayley = np.empty((order, order), dtype=np.int64)
    for i in range(order):
        products = np.einsum("ab,jbc->jac", elements[i], elements)
        for j in range(order):
            cayley[i, j] = _find_element(elements, products[j], tol=_MATCH_TOL)
    identity_index = _find_element(elements, np.eye(3))
    inverse = np.empty(order, dtype=np.int64)
    for i in range(order):
        hits = np.where(cayley[i] == identity_index)[0]
        if len(hits) != 1:
            raise AmbiguousMatch("inverse is not unique; Cayley table corrupt")
        inverse[i] = hits[0]
    for arr in (elements, cayley, inverse):
        arr.flags.writeable = False
    return FiniteRotationGroup(solid=solid, elements=elements, cayley=cayley,
                               inverse=inverse, identity_index=identity_index)


def build_quotient(group: FiniteRotationGroup, vertices: np.ndarray,
                   angular_tol: float = 1e-6) -> tuple[QuotientS2, AnchorPermutationRep]:
    """Cosets, section, stabilizer, and anchor permutation tables.

    The section picks the lowest element index in each coset (fixed by the
    canonical element order). Permutations are found by nearest-anchor
    matching; anything but a unique match raises AmbiguousMatch.
    """
    if np.linalg.norm(vertices[0] - np.array([0.0, 0.0, 1.0])) > 1e-9:
        raise AmbiguousMatch("vertex 0 must be aligned to +z")
    num_anchors = len(vertices)
    order = group.order
    perm = np.empty((order, num_anchors), dtype=np.int64)
    for g in range(order):
        rotated = vertices @ group.elements[g].T
        dists = np.linalg.norm(rotated[:, None, :] - vertices[None, :, :], axis=2)
        within = dists < angular_tol
        if not np.all(within.sum(axis=1) == 1):
            raise AmbiguousMatch(f"element {g}: rotated anchor without a unique match")
        perm[g] = np.argmin(dists, axis=1)
        if len(set(perm[g])) != num_anchors:
            raise AmbiguousMatch(f"element {g}: anchor permutation is not a bijection")
    coset_of = perm[:, 0].copy()
    section = np.empty(num_anchors, dtype=np.int64)
    for a in range(num_anchors):
        members = np.where(coset_of == a)[0]
        if len(members) == 0:
            raise AmbiguousMatch(f"anchor {a} has an empty coset")
        section[a] = members[0]
    stabilizer = np.where(coset_of == 0)[0]
    if num_anchors * len(stabilizer) != order:
        raise AmbiguousMatch("cosets do not partition the group evenly")
    for arr in (perm, coset_of, section, stabilizer):
        arr.flags.writeable = False
    quotient = QuotientS2(anchors=vertices, coset_of=coset_of, section=section,
                          stabilizer=stabilizer, group=group)
    return quotient, AnchorPermutationRep(perm=perm)


def group_act_se3(rotation: np.ndarray, translation: np.ndarray,
                  anchor_index: int, point: np.ndarray,
                  quotient: QuotientS2, perm_rep: AnchorPermutationRep
                  ) -> tuple[int, np.ndarray]:
    """Action of (R, t) on a quotient-space element (anchor, position)."""
    g = _find_element(quotient.group.elements, np.asarray(rotation, dtype=np.float64))
    new_anchor = int(perm_rep.perm[g, anchor_index])
    new_point = np.asarray(translation, dtype=np.float64) + rotation @ np.asarray(point)
    return new_anchor, new_point


@dataclass(frozen=True)
class SolidSymmetry:
    """Group + quotient + anchor permutation bundle used by the layers."""

    solid: str
    group: FiniteRotationGroup
    quotient: QuotientS2
    anchor_perm: AnchorPermutationRep

    @property
    def num_anchors(self) -> int:
        return self.quotient.num_anchors

    @property
    def order(self) -> int:
        return self.group.order

    def perm_of_inverse(self, g: int) -> np.ndarray:
        return self.anchor_perm.perm[self.group.inverse[g]]


def build_solid_symmetry(solid: str = "icosa", tol: float = 1e-9) -> SolidSymmetry:
    group = generate_platonic_group(solid, tol)
    quotient, perm_rep = build_quotient(group, solid_vertices(solid))
    return SolidSymmetry(solid=solid, group=group, quotient=quotient, anchor_perm=perm_rep)
