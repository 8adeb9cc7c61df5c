"""Geometric kernels: rigid alignment, RMSD, internal coordinates, XYZ I/O.

All functions are pure; conformations are (N, 3) coordinate matrices in
Angstrom. Dihedrals follow the IUPAC right-handed convention with values in
(-pi, pi], computed via atan2.
"""

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .molgraph import ELEMENT_SYMBOLS, SYMBOL_TO_Z, GraphError, MolGraph

# sin(angle) below this marks a collinear reference triple as degenerate
COLLINEAR_TOL = 1e-7


class GeometryError(ValueError):
    """Invalid geometric input (size mismatch, non-finite coordinates...)."""


@dataclass
class Conformation:
    """N x 3 Cartesian coordinates (Angstrom) plus free-form metadata."""

    coords: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise GeometryError(f"coords must be (N, 3), got {self.coords.shape}")
        if self.coords.shape[0] < 2:
            raise GeometryError("a conformation needs at least 2 atoms")
        if not np.all(np.isfinite(self.coords)):
            raise GeometryError("non-finite coordinates")

    @property
    def n_atoms(self):
        return self.coords.shape[0]


def coords_of(c):
    return c.coords if isinstance(c, Conformation) else np.asarray(c, dtype=np.float64)


class AlignResult(NamedTuple):
    aligned: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    degenerate: bool


def kabsch_align(ref, mov) -> AlignResult:
    """Least-RMSD proper rigid alignment of mov onto ref.

    Returns aligned coordinates, the rotation R (det +1; reflections are
    corrected by flipping the smallest singular direction) and translation t
    with aligned = mov @ R.T + t. Zero-spread inputs fall back to the
    identity rotation with the degenerate flag set.
    """
    p = coords_of(ref)
    q = coords_of(mov)
    if p.shape != q.shape:
        raise GeometryError(f"size mismatch: {p.shape} vs {q.shape}")
    if p.shape[0] < 2:
        raise GeometryError("alignment needs at least 2 atoms")
    mu_p = p.mean(axis=0)
    mu_q = q.mean(axis=0)
    qc = q - mu_q
    h = qc.T @ (p - mu_p)
    if not np.any(np.abs(h) > 0):
        t = mu_p - mu_q
        return AlignResult(q + t, np.eye(3), t, True)
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    r = (u @ np.diag([1.0, 1.0, d]) @ vt).T
    t = mu_p - mu_q @ r.T
    return AlignResult(q @ r.T + t, r, t, False)


def rmsd(a, b) -> float:
    """Plain RMSD between already-aligned coordinate sets."""
    pa, pb = coords_of(a), coords_of(b)
    if pa.shape != pb.shape:
        raise GeometryError(f"size mismatch: {pa.shape} vs {pb.shape}")
    return float(np.sqrt(np.mean(np.sum((pa - pb) ** 2, axis=1))))


def aligned_rmsd(ref, mov) -> float:
    """RMSD after Kabsch alignment of mov onto ref."""
    return rmsd(ref, kabsch_align(ref, mov).aligned)


# ------------------------------------------------------------ z-matrix plan


class ZEntry(NamedTuple):
    atom: int
    bond_ref: int | None
    angle_ref: int | None
    dihedral_ref: int | None


@dataclass(frozen=True)
class ZMatrixPlan:
    """Placement order plus per-atom reference triples from the bond graph."""

    entries: tuple

    @property
    def bond_pairs(self):
        return [(e.atom, e.bond_ref) for e in self.entries if e.bond_ref is not None]

    @property
    def angle_triples(self):
        return [
            (e.atom, e.bond_ref, e.angle_ref)
            for e in self.entries
            if e.angle_ref is not None
        ]

    @property
    def dihedral_quads(self):
        return [
            (e.atom, e.bond_ref, e.angle_ref, e.dihedral_ref)
            for e in self.entries
            if e.dihedral_ref is not None
        ]


def build_zmatrix_plan(g: MolGraph) -> ZMatrixPlan:
    """BFS spanning-tree placement order rooted at atom 0.

    Each atom references its tree parent, grandparent and great-grandparent;
    the first placed atoms use the nearest already-placed substitutes. Entry
    counts come out as N-1 bonds, N-2 angles, N-3 dihedrals.
    """
    n = g.n_atoms
    parent = {0: None}
    order = [0]
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in g.neighbors(u):
            if v not in parent:
                parent[v] = u
                order.append(v)
                queue.append(v)
    if len(order) != n:
        raise GraphError("graph is not connected")

    placed_at = {a: k for k, a in enumerate(order)}
    entries = []
    for k, a in enumerate(order):
        if k == 0:
            entries.append(ZEntry(a, None, None, None))
            continue
        b = parent[a]
        refs = [b]

        def earlier(x, taken):
            return x is not None and placed_at[x] < k and x not in taken

        for want in (parent.get(b), parent.get(parent.get(b))):
            if earlier(want, refs):
                refs.append(want)
        for cand in order[:k]:  # nearest-placed fallback for the first atoms
            if len(refs) >= min(3, k):
                break
            if cand not in refs:
                refs.append(cand)
        refs += [None] * (3 - len(refs))
        entries.append(ZEntry(a, refs[0], refs[1], refs[2]))
    return ZMatrixPlan(tuple(entries))


# -------------------------------------------------------- internal coords


def bond_length(c, i, j):
    return float(np.linalg.norm(c[i] - c[j]))


def bond_angle(c, i, j, k):
    """Angle at j in radians, [0, pi]; atan2 form, stable near the ends."""
    u = c[i] - c[j]
    w = c[k] - c[j]
    cross = np.cross(u, w)
    return float(np.arctan2(np.linalg.norm(cross), float(u @ w)))


def dihedral_angle(c, i, j, k, l):
    """Dihedral of the i-j-k-l chain, right-handed, in (-pi, pi]."""
    b1 = c[j] - c[i]
    b2 = c[k] - c[j]
    b3 = c[l] - c[k]
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    m = np.cross(n1, b2 / np.linalg.norm(b2))
    return float(np.arctan2(float(m @ n2), float(n1 @ n2)))


def _angle_ok(c, i, j, k):
    u = c[i] - c[j]
    w = c[k] - c[j]
    nu, nw = np.linalg.norm(u), np.linalg.norm(w)
    if nu < 1e-12 or nw < 1e-12:
        return False
    s = np.linalg.norm(np.cross(u / nu, w / nw))
    return s > COLLINEAR_TOL


@dataclass
class InternalCoords:
    """Bond lengths, angles, dihedrals along a plan, plus the full distance
    matrix. Degenerate (collinear-reference) entries are flagged so losses
    can mask them."""

    bond_pairs: list
    bond_values: np.ndarray
    angle_triples: list
    angle_values: np.ndarray
    angle_ok: np.ndarray
    dihedral_quads: list
    dihedral_values: np.ndarray
    dihedral_ok: np.ndarray
    dist_matrix: np.ndarray

    @property
    def bond_lengths(self):
        return list(zip(self.bond_pairs, self.bond_values))

    @property
    def bond_angles(self):
        return list(zip(self.angle_triples, self.angle_values))

    @property
    def dihedrals(self):
        return list(zip(self.dihedral_quads, self.dihedral_values))


def to_internal(g: MolGraph, c, plan: ZMatrixPlan | None = None) -> InternalCoords:
    """Internal coordinates of a conformation along a z-matrix plan."""
    x = coords_of(c)
    if x.shape[0] != g.n_atoms:
        raise GeometryError("conformation does not match graph size")
    if plan is None:
        plan = build_zmatrix_plan(g)

    pairs = plan.bond_pairs
    bv = np.array([bond_length(x, i, j) for i, j in pairs], dtype=np.float64)

    triples = plan.angle_triples
    av = np.array([bond_angle(x, i, j, k) for i, j, k in triples], dtype=np.float64)
    aok = np.array([_angle_ok(x, i, j, k) for i, j, k in triples], dtype=bool)

    quads = plan.dihedral_quads
    dv = np.zeros(len(quads), dtype=np.float64)
    dok = np.zeros(len(quads), dtype=bool)
    for n, (i, j, k, l) in enumerate(quads):
        ok = _angle_ok(x, i, j, k) and _angle_ok(x, j, k, l)
        dok[n] = ok
        if ok:
            dv[n] = dihedral_angle(x, i, j, k, l)

    return InternalCoords(
        bond_pairs=pairs,
        bond_values=bv,
        angle_triples=triples,
        angle_values=av,
        angle_ok=aok,
        dihedral_quads=quads,
        dihedral_values=dv,
        dihedral_ok=dok,
        dist_matrix=kernels.pairwise_distances(x),
    )


def place_from_internal(plan: ZMatrixPlan, bond_vals, angle_vals, dihedral_vals):
    """Rebuild Cartesian coordinates from z-matrix internal values (NeRF).

    Values are indexed like the plan's bond/angle/dihedral lists. Atoms with
    missing references get deterministic synthetic frames; a bond angle of
    pi places the atom on the extended line regardless of its dihedral.
    """
    entries = plan.entries
    n = len(entries)
    coords = np.zeros((n, 3), dtype=np.float64)
    bond_vals = list(bond_vals)
    angle_vals = list(angle_vals)
    dihedral_vals = list(dihedral_vals)
    bi = ai = di = 0

    for k, e in enumerate(entries):
        if k == 0:
            continue
        length = bond_vals[bi]
        bi += 1
        b = coords[e.bond_ref]
        if e.angle_ref is None:
            coords[e.atom] = b + np.array([length, 0.0, 0.0])
            continue
        theta = angle_vals[ai]
        ai += 1
        a = coords[e.angle_ref]
        if e.dihedral_ref is None:
            phi = 0.0
            d = a + _any_perpendicular(b - a)
        else:
            phi = dihedral_vals[di]
            di += 1
            d = coords[e.dihedral_ref]

        b1 = a - d
        b2 = b - a
        u2 = b2 / np.linalg.norm(b2)
        nvec = np.cross(b1, b2)
        nn = np.linalg.norm(nvec)
        if nn < 1e-10:
            nvec = _any_perpendicular(b2)
            nn = np.linalg.norm(nvec)
        nhat = nvec / nn
        mhat = np.cross(nhat, u2)
        # minus sin-phi keeps the placed dihedral equal to dihedral_angle()
        local = np.array(
            [
                -length * np.cos(theta),
                length * np.sin(theta) * np.cos(phi),
                -length * np.sin(theta) * np.sin(phi),
            ]
        )
        coords[e.atom] = b + local[0] * u2 + local[1] * mhat + local[2] * nhat
    return coords


def _any_perpendicular(v):
    ref = np.array([1.0, 0.0, 0.0]) if abs(v[0]) <= abs(v[2]) else np.array([0.0, 0.0, 1.0])
    w = np.cross(v, ref)
    nw = np.linalg.norm(w)
    if nw < 1e-12:
        w = np.cross(v, np.array([0.0, 1.0, 0.0]))
        nw = np.linalg.norm(w)
    return w / nw


# ----------------------------------------------------------------- XYZ I/O


def write_xyz(path, elements, coords, comment=""):
    """Write an XYZ file (count + comment header, %.6f coordinates)."""
    coords = coords_of(coords)
    lines = [str(len(elements)), comment.replace("\n", " ")]
    for z, (x, y, zz) in zip(elements, coords):
        sym = ELEMENT_SYMBOLS[z] if isinstance(z, (int, np.integer)) else str(z)
        lines.append(f"{sym} {x:.6f} {y:.6f} {zz:.6f}")
    data = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(data)


def read_xyz(path):
    """Read an XYZ file; returns (elements, coords, comment)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise GeometryError(f"empty XYZ file: {path}")
    try:
        n = int(lines[0].split()[0])
    except (IndexError, ValueError) as exc:
        raise GeometryError(f"bad XYZ count line in {path}") from exc
    if len(lines) < 2 + n:
        raise GeometryError(f"truncated XYZ file: {path}")
    comment = lines[1]
    elements = []
    coords = np.zeros((n, 3), dtype=np.float64)
    for k in range(n):
        fields = lines[2 + k].split()
        if len(fields) < 4:
            raise GeometryError(f"bad XYZ atom line {2 + k + 1} in {path}")
        sym = fields[0]
        if sym not in SYMBOL_TO_Z:
            raise GeometryError(f"unknown element symbol {sym!r} at line {2 + k + 1}")
        elements.append(SYMBOL_TO_Z[sym])
        coords[k] = [float(fields[1]), float(fields[2]), float(fields[3])]
    return elements, coords, comment
