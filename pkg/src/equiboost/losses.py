"""Training objective: symmetry-aware RMSD plus internal-coordinate terms.

Two lanes share the same math: plain numpy functions for evaluation, and a
graph-building lane (loss_graph) for training. In the differentiable lane
the alignment rotation and the symmetry permutation are constants captured
from the forward pass; centroids stay differentiable.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from . import kernels
from .geometry import (
    GeometryError,
    ZMatrixPlan,
    build_zmatrix_plan,
    coords_of,
    kabsch_align,
    rmsd,
    to_internal,
)


@dataclass
class LossBreakdown:
    pirmsd: float
    bond_length: float
    bond_angle: float
    dihedral: float
    edist: float

    @property
    def total(self):
        return self.pirmsd + self.bond_length + self.bond_angle + self.dihedral + self.edist

    def to_dict(self):
        return {
            "pirmsd": self.pirmsd,
            "bond_length": self.bond_length,
            "bond_angle": self.bond_angle,
            "dihedral": self.dihedral,
            "edist": self.edist,
            "total": self.total,
        }


class PiRmsdResult(NamedTuple):
    value: float
    permutation: np.ndarray  # gather array: relabeled[i] = gen[permutation[i]]


def _sorted_schemes(schemes):
    return sorted(schemes, key=lambda s: (-s.n_atoms, s.tuples))


def _check_schemes(schemes, n):
    for s in schemes:
        for t in s.tuples:
            for a in t:
                if not 0 <= a < n:
                    raise GeometryError(f"symmetry scheme index {a} out of range for N={n}")


def pirmsd(ref, gen, schemes) -> PiRmsdResult:
    """Permutation-invariant RMSD via greedy per-group centroid assignment.

    Aligns gen onto ref, then per swap group (largest first) matches tuple
    centroids with the Hungarian algorithm and relabels, and finally
    re-aligns the relabeled conformation. The result never beats the exact
    minimum over admissible relabelings and never exceeds the naive aligned
    RMSD.
    """
    p = coords_of(ref)
    q = coords_of(gen)
    if p.shape != q.shape:
        raise GeometryError(f"size mismatch: {p.shape} vs {q.shape}")
    n = p.shape[0]
    _check_schemes(schemes, n)

    x = kabsch_align(p, q).aligned
    perm = np.arange(n, dtype=np.int64)
    for scheme in _sorted_schemes(schemes):
        ref_cents = np.array([p[list(t)].mean(axis=0) for t in scheme.tuples])
        gen_cents = np.array([x[list(t)].mean(axis=0) for t in scheme.tuples])
        cost = np.linalg.norm(ref_cents[:, None, :] - gen_cents[None, :, :], axis=2)
        rows, cols = linear_sum_assignment(cost)
        assignment = [int(cols[list(rows).index(a)]) for a in range(len(scheme.tuples))]
        g_perm = scheme.permutation(assignment, n)
        x = x[g_perm]
        perm = perm[g_perm]

    # The admissible set contains the identity, so never return worse than
    # the naive aligned RMSD even if the greedy assignment misfires.
    identity = np.arange(n, dtype=np.int64)
    best = None
    for cand in (perm, identity):
        value = rmsd(p, kabsch_align(p, q[cand]).aligned)
        if best is None or value < best[0] - 1e-15:
            best = (value, cand)
    return PiRmsdResult(*best)


def exhaustive_pirmsd(ref, gen, schemes) -> float:
    """Exact minimum aligned RMSD over all admissible relabelings.

    Enumerates the product of within-group tuple permutations in the same
    group order the greedy algorithm uses. Exponential; small inputs only.
    """
    from itertools import permutations, product

    p = coords_of(ref)
    q = coords_of(gen)
    n = p.shape[0]
    ordered = _sorted_schemes(schemes)
    choices = [list(permutations(range(len(s.tuples)))) for s in ordered]
    best = np.inf
    for combo in product(*choices):
        perm = np.arange(n, dtype=np.int64)
        for scheme, assignment in zip(ordered, combo):
            perm = perm[scheme.permutation(list(assignment), n)]
        value = rmsd(p, kabsch_align(p, q[perm]).aligned)
        best = min(best, value)
    return float(best)


# ------------------------------------------------------------------ IC loss


def _wrap_abs(delta):
    """Absolute angular error folded into [0, pi]."""
    d = np.abs(delta)
    return np.where(d > np.pi, 2.0 * np.pi - d, d)


def ic_loss(g, ref, gen, plan: ZMatrixPlan | None = None) -> LossBreakdown:
    """Internal-coordinate loss components between two conformations.

    Bond/angle/dihedral terms are squared-error sums over the plan entries;
    the inter-atomic distance term is the mean squared error over the full
    N x N matrices. Entries with collinear references in either conformation
    are excluded; dihedral errors above pi wrap around.
    """
    if plan is None:
        plan = build_zmatrix_plan(g)
    icr = to_internal(g, ref, plan)
    icg = to_internal(g, gen, plan)

    bond = float(np.sum((icg.bond_values - icr.bond_values) ** 2))

    amask = icr.angle_ok & icg.angle_ok
    angle = float(np.sum((icg.angle_values[amask] - icr.angle_values[amask]) ** 2))

    dmask = icr.dihedral_ok & icg.dihedral_ok
    wrapped = _wrap_abs(icg.dihedral_values[dmask] - icr.dihedral_values[dmask])
    dih = float(np.sum(wrapped**2))

    edist = float(np.mean((icg.dist_matrix - icr.dist_matrix) ** 2))

    return LossBreakdown(0.0, bond, angle, dih, edist)


def total_loss(g, ref, gen, schemes, plan: ZMatrixPlan | None = None) -> LossBreakdown:
    """Unweighted sum of piRMSD and the internal-coordinate components."""
    ic = ic_loss(g, ref, gen, plan)
    pi = pirmsd(ref, gen, schemes).value
    return LossBreakdown(pi, ic.bond_length, ic.bond_angle, ic.dihedral, ic.edist)


# -------------------------------------------------------- differentiable lane


@dataclass
class FrozenLossState:
    """Forward-pass constants for the differentiable loss: the symmetry
    permutation, the alignment rotation, degeneracy masks and the reference
    internal values."""

    perm: np.ndarray
    rotation: np.ndarray
    ref_coords: np.ndarray
    bonds_idx: np.ndarray  # (K, 2)
    bond_ref: np.ndarray
    angles_idx: np.ndarray  # (K, 3) after masking
    angle_ref: np.ndarray
    dihedrals_idx: np.ndarray  # (K, 4) after masking
    dihedral_ref: np.ndarray
    dist_ref: np.ndarray


def freeze_loss_state(g, ref, gen_coords, schemes, plan: ZMatrixPlan) -> FrozenLossState:
    p = coords_of(ref)
    res = pirmsd(p, gen_coords, schemes)
    relabeled = gen_coords[res.permutation]
    rot = kabsch_align(p, relabeled).rotation

    icr = to_internal(g, p, plan)
    icg = to_internal(g, gen_coords, plan)
    amask = icr.angle_ok & icg.angle_ok
    dmask = icr.dihedral_ok & icg.dihedral_ok

    return FrozenLossState(
        perm=res.permutation,
        rotation=rot,
        ref_coords=p,
        bonds_idx=np.asarray(icr.bond_pairs, dtype=np.int64).reshape(-1, 2),
        bond_ref=icr.bond_values,
        angles_idx=np.asarray(icr.angle_triples, dtype=np.int64).reshape(-1, 3)[amask],
        angle_ref=icr.angle_values[amask],
        dihedrals_idx=np.asarray(icr.dihedral_quads, dtype=np.int64).reshape(-1, 4)[dmask],
        dihedral_ref=icr.dihedral_values[dmask],
        dist_ref=icr.dist_matrix,
    )


def loss_graph(g, ref, gen, schemes, plan: ZMatrixPlan | None = None, frozen=None):
    """Differentiable total loss on a gen-coordinate Tensor.

    Returns (total Tensor, LossBreakdown of floats, FrozenLossState). Pass
    `frozen` to reuse forward-pass constants, e.g. for finite-difference
    checks against the analytic gradient.
    """
    if plan is None:
        plan = build_zmatrix_plan(g)
    if not isinstance(gen, ad.Tensor):
        gen = ad.Tensor(np.asarray(gen, dtype=np.float64))
    if frozen is None:
        frozen = freeze_loss_state(g, ref, gen.data, schemes, plan)

    dtype = gen.data.dtype
    p = frozen.ref_coords.astype(dtype)
    n = p.shape[0]

    # piRMSD with frozen permutation and rotation; centroids differentiable
    genp = ad.gather0(gen, frozen.perm)
    mu = ad.tmean(genp, axis=0, keepdims=True)
    aligned = ad.add(ad.matmul(ad.sub(genp, mu), frozen.rotation.T.astype(dtype)), p.mean(axis=0))
    diff = ad.sub(aligned, p)
    pir = ad.sqrt(ad.tmean(ad.tsum(ad.square(diff), axis=1)))

    # bond lengths
    bi = ad.gather0(gen, frozen.bonds_idx[:, 0])
    bj = ad.gather0(gen, frozen.bonds_idx[:, 1])
    blen = ad.norm_last(ad.sub(bi, bj))
    bond = ad.tsum(ad.square(ad.sub(blen, frozen.bond_ref.astype(dtype))))

    # bond angles (atan2 form)
    if len(frozen.angles_idx):
        ai = ad.gather0(gen, frozen.angles_idx[:, 0])
        aj = ad.gather0(gen, frozen.angles_idx[:, 1])
        ak = ad.gather0(gen, frozen.angles_idx[:, 2])
        u = ad.sub(ai, aj)
        w = ad.sub(ak, aj)
        ang = ad.atan2(ad.norm_last(ad.cross3(u, w)), ad.dot_last(u, w))
        angle = ad.tsum(ad.square(ad.sub(ang, frozen.angle_ref.astype(dtype))))
    else:
        angle = ad.Tensor(np.zeros((), dtype=dtype))

    # dihedrals with wrap via atan2(sin, cos)
    if len(frozen.dihedrals_idx):
        di = ad.gather0(gen, frozen.dihedrals_idx[:, 0])
        dj = ad.gather0(gen, frozen.dihedrals_idx[:, 1])
        dk = ad.gather0(gen, frozen.dihedrals_idx[:, 2])
        dl = ad.gather0(gen, frozen.dihedrals_idx[:, 3])
        b1 = ad.sub(dj, di)
        b2 = ad.sub(dk, dj)
        b3 = ad.sub(dl, dk)
        n1 = ad.cross3(b1, b2)
        n2 = ad.cross3(b2, b3)
        b2n = ad.div(b2, ad.reshape(ad.norm_last(b2), (-1, 1)))
        m = ad.cross3(n1, b2n)
        phi = ad.atan2(ad.dot_last(m, n2), ad.dot_last(n1, n2))
        delta = ad.sub(phi, frozen.dihedral_ref.astype(dtype))
        wrapped = ad.atan2(ad.sin(delta), ad.cos(delta))
        dih = ad.tsum(ad.square(wrapped))
    else:
        dih = ad.Tensor(np.zeros((), dtype=dtype))

    # inter-atomic distance matrix, MSE over all N^2 entries
    dmat = ad.pairwise_distances(gen)
    edist = ad.mul(ad.tsum(ad.square(ad.sub(dmat, frozen.dist_ref.astype(dtype)))), 1.0 / (n * n))

    total = ad.add(ad.add(ad.add(ad.add(pir, bond), angle), dih), edist)
    breakdown = LossBreakdown(
        float(pir.data), float(bond.data), float(angle.data), float(dih.data), float(edist.data)
    )
    return total, breakdown, frozen
