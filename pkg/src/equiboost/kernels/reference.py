"""Pure numpy implementations of the hot numeric kernels.

These are the fallback lane; equiboost.kernels re-exports either these or
the compiled _fastcore versions. Both lanes implement the same contracts
and are tested against each other.
"""

import numpy as np

# Real spherical harmonic prefactors, standard table normalization for l=2.
SH2_K_XY = 0.5 * np.sqrt(15.0 / np.pi)
SH2_K_Z2 = 0.25 * np.sqrt(5.0 / np.pi)
SH2_K_X2Y2 = 0.25 * np.sqrt(15.0 / np.pi)

_MIN_EDGE_NORM = 1e-12


def pairwise_distances(x):
    """All-pairs Euclidean distance matrix of an (N, 3) coordinate array."""
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def pairwise_distances_backward(x, grad):
    """Gradient of sum(grad * pairwise_distances(x)) w.r.t. x.

    Diagonal entries of the distance matrix are constant zero, so their
    cotangent is ignored.
    """
    d = pairwise_distances(x)
    np.fill_diagonal(d, 1.0)  # avoid 0/0; diagonal diff is zero anyway
    g = (grad + grad.T) / d
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ij,ijk->ik", g, diff)


def sh2(r):
    """Real spherical harmonics of normalized directions, degrees 0..2.

    Input is an (E, 3) array of (unnormalized) edge vectors; output is
    (E, 9) laid out as [Y00, x, y, z, Y2(-2..2)]. Degree 0 is the constant
    1, degree 1 is the unit vector itself, degree 2 follows the standard
    real-harmonic table: (xy, yz, 3z^2-1, zx, x^2-y^2) with sqrt(15/pi)
    style prefactors.

    Raises ValueError on (near-)zero-length input vectors.
    """
    r = np.asarray(r)
    n = np.sqrt(np.einsum("ij,ij->i", r, r))
    if np.any(n < _MIN_EDGE_NORM):
        raise ValueError("zero-length direction vector in spherical harmonics")
    u = r / n[:, None]
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    out = np.empty((r.shape[0], 9), dtype=r.dtype)
    out[:, 0] = 1.0
    out[:, 1:4] = u
    out[:, 4] = SH2_K_XY * ux * uy
    out[:, 5] = SH2_K_XY * uy * uz
    out[:, 6] = SH2_K_Z2 * (3.0 * uz * uz - 1.0)
    out[:, 7] = SH2_K_XY * uz * ux
    out[:, 8] = SH2_K_X2Y2 * (ux * ux - uy * uy)
    return out


def sh2_backward(r, grad):
    """Gradient of sum(grad * sh2(r)) w.r.t. the raw edge vectors r."""
    r = np.asarray(r)
    n = np.sqrt(np.einsum("ij,ij->i", r, r))
    u = r / n[:, None]
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]

    # d(out)/d(u): rows match the sh2 layout; degree 0 is constant.
    gu = np.zeros_like(u)
    gu += grad[:, 1:4]
    gu[:, 0] += SH2_K_XY * (grad[:, 4] * uy + grad[:, 7] * uz)
    gu[:, 1] += SH2_K_XY * (grad[:, 4] * ux + grad[:, 5] * uz)
    gu[:, 2] += SH2_K_XY * (grad[:, 5] * uy + grad[:, 7] * ux)
    gu[:, 2] += SH2_K_Z2 * 6.0 * uz * grad[:, 6]
    gu[:, 0] += SH2_K_X2Y2 * 2.0 * ux * grad[:, 8]
    gu[:, 1] -= SH2_K_X2Y2 * 2.0 * uy * grad[:, 8]

    # du/dr = (I - u u^T) / n
    proj = np.einsum("ij,ij->i", gu, u)
    return (gu - proj[:, None] * u) / n[:, None]


def segment_sum(values, segments, num_segments):
    """Sum rows of `values` (E, F) into `num_segments` buckets."""
    out = np.zeros((num_segments,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, segments, values)
    return out


def segment_max(values, segments, num_segments):
    """Per-segment maximum of a 1-D array; empty segments get -inf."""
    out = np.full(num_segments, -np.inf, dtype=values.dtype)
    np.maximum.at(out, segments, values)
    return out
