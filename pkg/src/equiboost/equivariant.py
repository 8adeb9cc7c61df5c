"""The weak learner: an L-block equivariant graph attention transformer.

Node features are irreps: invariant scalar channels plus equivariant
3-vector channels (and internal degree-2 channels). Geometry enters only
through relative positions, embedded by real spherical harmonics and a
Gaussian radial basis; the depth-wise tensor product uses scalar x l -> l
paths only, so every block is SE(3)-equivariant by construction. Per-atom
displacements are read off the vector channels by a linear head.

Gradients come from the autodiff tape; see equiboost.autodiff.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .molgraph import MAX_ELEMENT, HigherOrderAdjacency, MolGraph, build_higher_order

LN_EPS = 1e-6
NORM_EPS = 1e-12


@dataclass(frozen=True)
class LearnerConfig:
    d_scalar: int = 32
    d_vector: int = 16
    d_tensor2: int = 8
    d_message: int = 32
    n_blocks: int = 4
    n_radial: int = 16
    radial_hidden: int = 32
    ffn_hidden: int = 64
    cutoff: float = 10.0
    max_hop: int = 3
    n_steps: int = 5
    max_element: int = MAX_ELEMENT
    leaky_slope: float = 0.2
    dtype: str = "float32"
    # "table": discrete boosting-step embedding of size n_steps.
    # "sigma": continuous noise-level embedding (log-RBF), for the
    # diffusion baseline, fed through the same input slot.
    step_mode: str = "table"
    n_sigma_basis: int = 16
    sigma_min: float = 0.002
    sigma_max: float = 10.0

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def n_edge_types(self):
        return 4 + (self.max_hop - 1)

    def hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class IrrepsFeature:
    """Per-node equivariant feature: invariant scalars, 3-vectors, and
    optional internal degree-2 channels."""

    scalar: object
    vector: object
    l2: object = None


@dataclass
class GraphContext:
    """Static per-molecule arrays the learner consumes."""

    src: np.ndarray
    dst: np.ndarray
    etype: np.ndarray
    elements: np.ndarray
    n_atoms: int

    @classmethod
    def build(cls, g: MolGraph, hoa: HigherOrderAdjacency | None = None, max_hop: int | None = None):
        if hoa is None:
            hoa = build_higher_order(g, max_hop if max_hop is not None else g.h)
        etype = np.empty(hoa.n_edges, dtype=np.int64)
        for n, (i, j, k) in enumerate(zip(hoa.dst, hoa.src, hoa.hop)):
            if k == 1:
                etype[n] = int(g.bond_order(int(i), int(j))) - 1
            else:
                etype[n] = 4 + int(k) - 2
        return cls(hoa.src, hoa.dst, etype, g.elements(), g.n_atoms)


def spherical_harmonics(r_hat, l_max=2):
    """Per-degree real spherical harmonic blocks of unit direction vectors.

    Degree 0 is the constant 1, degree 1 is the unit vector in (x, y, z)
    order, degree 2 follows the standard real-harmonic table. Input must be
    normalized to 1e-9.
    """
    if not 0 <= l_max <= 2:
        raise ValueError("l_max must be 0, 1 or 2")
    r = np.atleast_2d(np.asarray(r_hat, dtype=np.float64))
    norms = np.linalg.norm(r, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError("spherical_harmonics expects unit vectors")
    from . import kernels

    full = kernels.sh2(r)
    blocks = [full[:, 0:1], full[:, 1:4], full[:, 4:9]]
    return blocks[: l_max + 1]


# ------------------------------------------------------------------- params


def _xavier(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_params(config: LearnerConfig, rng, zero_head=True):
    """Deterministic parameter initialization from a numpy Generator.

    The displacement head defaults to zeros so a fresh model is the
    identity refiner; step embeddings start at zero so untrained step slots
    stay neutral.
    """
    dt = config.np_dtype
    d0, d1, d2, dm = config.d_scalar, config.d_vector, config.d_tensor2, config.d_message
    p = {}
    p["atom_embed"] = (0.5 * rng.standard_normal((config.max_element + 1, d0))).astype(dt)
    if config.step_mode == "table":
        p["step_embed"] = np.zeros((config.n_steps, d0), dtype=dt)
    else:
        p["sigma_w"] = np.zeros((config.n_sigma_basis, d0), dtype=dt)
    n_paths = 8 * dm
    for b in range(config.n_blocks):
        pre = f"blocks.{b}."
        p[pre + "w_src"] = _xavier(rng, d0, dm, dt)
        p[pre + "w_dst"] = _xavier(rng, d0, dm, dt)
        p[pre + "b_msg"] = np.zeros(dm, dtype=dt)
        p[pre + "edge_embed"] = (0.5 * rng.standard_normal((config.n_edge_types, dm))).astype(dt)
        p[pre + "rad_w1"] = _xavier(rng, config.n_radial, config.radial_hidden, dt)
        p[pre + "rad_b1"] = np.zeros(config.radial_hidden, dtype=dt)
        p[pre + "rad_w2"] = _xavier(rng, config.radial_hidden, n_paths, dt)
        p[pre + "rad_b2"] = np.zeros(n_paths, dtype=dt)
        p[pre + "att_vec"] = (rng.standard_normal(dm) / np.sqrt(dm)).astype(dt)
        p[pre + "gate_w1"] = _xavier(rng, dm, dm, dt)
        p[pre + "gate_b1"] = np.ones(dm, dtype=dt)
        p[pre + "gate_w2"] = _xavier(rng, dm, dm, dt)
        p[pre + "gate_b2"] = np.ones(dm, dtype=dt)
        p[pre + "val_w0"] = _xavier(rng, dm, d0, dt)
        p[pre + "val_b0"] = np.zeros(d0, dtype=dt)
        p[pre + "val_w1"] = _xavier(rng, 2 * dm, d1, dt)
        p[pre + "val_w2"] = _xavier(rng, 2 * dm, d2, dt)
        p[pre + "ln_s_gamma"] = np.ones(d0, dtype=dt)
        p[pre + "ln_s_beta"] = np.zeros(d0, dtype=dt)
        p[pre + "ln_v_gamma"] = np.ones(d1, dtype=dt)
        p[pre + "ln_t_gamma"] = np.ones(d2, dtype=dt)
        d_inv = d0 + d1 + d2
        p[pre + "ffn_w1"] = _xavier(rng, d_inv, config.ffn_hidden, dt)
        p[pre + "ffn_b1"] = np.zeros(config.ffn_hidden, dtype=dt)
        p[pre + "ffn_w2"] = _xavier(rng, config.ffn_hidden, d_inv, dt)
        p[pre + "ffn_b2"] = np.zeros(d_inv, dtype=dt)
        p[pre + "ffn_vmix"] = _xavier(rng, d1, d1, dt)
        p[pre + "ffn_tmix"] = _xavier(rng, d2, d2, dt)
    if zero_head:
        p["out_w"] = np.zeros((d1, 1), dtype=dt)
    else:
        p["out_w"] = _xavier(rng, d1, 1, dt)
    return {k: ad.Tensor(v, requires_grad=True) for k, v in p.items()}


def _ln_scalar(x, gamma, beta):
    mu = ad.tmean(x, axis=1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.tmean(ad.square(xc), axis=1, keepdims=True)
    xn = ad.div(xc, ad.sqrt(ad.add(var, LN_EPS)))
    return ad.add(ad.mul(xn, gamma), beta)


def _ln_irreps(x, gamma):
    """Norm-based normalization for non-scalar channels: divide by the RMS
    channel norm (no mean subtraction, which would break equivariance)."""
    ms = ad.tmean(ad.tsum(ad.square(x), axis=2), axis=1)  # (N,)
    scale = ad.sqrt(ad.add(ms, LN_EPS))
    xn = ad.scale_rows(x, ad.div(1.0, scale))
    return ad.mul(xn, ad.reshape(gamma, (1, -1, 1)))


class Learner:
    """Weight-shared weak learner mapping (graph, conformation, step) to
    per-atom displacements, with reverse-mode gradients via the tape."""

    def __init__(self, config: LearnerConfig, params=None, rng=None, zero_head=True):
        self.config = config
        if params is None:
            params = init_params(config, rng or np.random.default_rng(0), zero_head=zero_head)
        self.params = params
        self.n_forward_calls = 0
        dt = config.np_dtype
        self._rbf_centers = np.linspace(0.0, config.cutoff, config.n_radial).astype(dt)
        self._rbf_gamma = (config.n_radial / config.cutoff) ** 2
        if config.step_mode == "sigma":
            self._sig_centers = np.linspace(
                np.log(config.sigma_min), np.log(config.sigma_max), config.n_sigma_basis
            )
            span = np.log(config.sigma_max) - np.log(config.sigma_min)
            self._sig_gamma = (config.n_sigma_basis / span) ** 2

    @property
    def dtype(self):
        return self.config.np_dtype

    def parameter_count(self):
        return sum(int(np.prod(t.data.shape)) for t in self.params.values())

    def param_arrays(self):
        return {k: t.data for k, t in self.params.items()}

    # ------------------------------------------------------------- forward

    def _step_row(self, step):
        cfg = self.config
        if cfg.step_mode == "table":
            m = int(step)
            if not 0 <= m < cfg.n_steps:
                raise ValueError(f"step {m} out of range [0, {cfg.n_steps})")
            return ad.gather0(self.params["step_embed"], np.array([m]))
        sigma = float(step)
        basis = np.exp(-self._sig_gamma * (np.log(sigma) - self._sig_centers) ** 2)
        basis = basis.reshape(1, -1).astype(self.dtype)
        return ad.matmul(ad.Tensor(basis), self.params["sigma_w"])

    def forward(self, ctx: GraphContext, coords, step):
        """Displacement field for one learner application.

        coords may be a numpy array or a Tensor (to chain gradients through
        unrolled boosting); step is the boost index (table mode) or the
        noise level sigma (sigma mode).
        """
        self.n_forward_calls += 1
        cfg = self.config
        dt = self.dtype
        if not isinstance(coords, ad.Tensor):
            coords = ad.Tensor(np.asarray(coords, dtype=dt))
        n = ctx.n_atoms

        ci = ad.gather0(coords, ctx.dst)
        cj = ad.gather0(coords, ctx.src)
        r = ad.sub(ci, cj)
        dist = ad.norm_last(r)
        rb = ad.exp(
            ad.mul(
                ad.square(ad.sub(ad.reshape(dist, (-1, 1)), self._rbf_centers.reshape(1, -1))),
                -self._rbf_gamma,
            )
        )
        sh = ad.sh2(r)

        s = ad.add(ad.gather0(self.params["atom_embed"], ctx.elements), self._step_row(step))
        v = ad.Tensor(np.zeros((n, cfg.d_vector, 3), dtype=dt))
        t2 = ad.Tensor(np.zeros((n, cfg.d_tensor2, 5), dtype=dt))
        for b in range(cfg.n_blocks):
            s, v, t2, _ = self._block(b, s, v, t2, ctx, sh, rb)
        delta = ad.einsum2("ncd,cf->nfd", v, self.params["out_w"])
        return ad.reshape(delta, (n, 3))

    def _block(self, b, s, v, t2, ctx, sh, rb, return_attention=False):
        cfg = self.config
        p = self.params
        pre = f"blocks.{b}."
        dm = cfg.d_message
        n = ctx.n_atoms
        e = len(ctx.src)

        m = ad.add(
            ad.add(
                ad.matmul(ad.gather0(s, ctx.src), p[pre + "w_src"]),
                ad.matmul(ad.gather0(s, ctx.dst), p[pre + "w_dst"]),
            ),
            ad.add(ad.gather0(p[pre + "edge_embed"], ctx.etype), p[pre + "b_msg"]),
        )
        hid = ad.silu(ad.add(ad.matmul(rb, p[pre + "rad_w1"]), p[pre + "rad_b1"]))
        wp = ad.add(ad.matmul(hid, p[pre + "rad_w2"]), p[pre + "rad_b2"])

        y1 = sh[:, 1:4]
        y2 = sh[:, 4:9]

        # depth-wise tensor product #1: message scalars spread over degrees
        f0 = ad.mul(m, wp[:, 0 * dm : 1 * dm])
        f1 = ad.mul(
            ad.reshape(ad.mul(m, wp[:, 1 * dm : 2 * dm]), (e, dm, 1)), ad.reshape(y1, (e, 1, 3))
        )
        f2 = ad.mul(
            ad.reshape(ad.mul(m, wp[:, 2 * dm : 3 * dm]), (e, dm, 1)), ad.reshape(y2, (e, 1, 5))
        )

        # attention from invariant scalars only
        z = ad.reshape(
            ad.matmul(ad.leaky_relu(f0, cfg.leaky_slope), ad.reshape(p[pre + "att_vec"], (dm, 1))),
            (e,),
        )
        alpha = ad.segment_softmax(z, ctx.dst, n)

        # gate, then depth-wise tensor product #2 and the value linear
        sg = ad.silu(f0)
        g1 = ad.sigmoid(ad.add(ad.matmul(f0, p[pre + "gate_w1"]), p[pre + "gate_b1"]))
        g2 = ad.sigmoid(ad.add(ad.matmul(f0, p[pre + "gate_w2"]), p[pre + "gate_b2"]))
        f1g = ad.mul(f1, ad.reshape(g1, (e, dm, 1)))
        f2g = ad.mul(f2, ad.reshape(g2, (e, dm, 1)))

        p0 = ad.mul(sg, wp[:, 3 * dm : 4 * dm])
        p1a = ad.mul(
            ad.reshape(ad.mul(sg, wp[:, 4 * dm : 5 * dm]), (e, dm, 1)), ad.reshape(y1, (e, 1, 3))
        )
        p1b = ad.mul(f1g, ad.reshape(wp[:, 5 * dm : 6 * dm], (e, dm, 1)))
        p2a = ad.mul(
            ad.reshape(ad.mul(sg, wp[:, 6 * dm : 7 * dm]), (e, dm, 1)), ad.reshape(y2, (e, 1, 5))
        )
        p2b = ad.mul(f2g, ad.reshape(wp[:, 7 * dm : 8 * dm], (e, dm, 1)))

        v0 = ad.add(ad.matmul(p0, p[pre + "val_w0"]), p[pre + "val_b0"])
        v1 = ad.einsum2("ecd,cf->efd", ad.concat([p1a, p1b], axis=1), p[pre + "val_w1"])
        v2 = ad.einsum2("ecd,cf->efd", ad.concat([p2a, p2b], axis=1), p[pre + "val_w2"])

        s_agg = ad.segment_sum(ad.mul(v0, ad.reshape(alpha, (e, 1))), ctx.dst, n)
        v_agg = ad.segment_sum(ad.mul(v1, ad.reshape(alpha, (e, 1, 1))), ctx.dst, n)
        t_agg = ad.segment_sum(ad.mul(v2, ad.reshape(alpha, (e, 1, 1))), ctx.dst, n)

        s1 = _ln_scalar(ad.add(s, s_agg), p[pre + "ln_s_gamma"], p[pre + "ln_s_beta"])
        v1n = _ln_irreps(ad.add(v, v_agg), p[pre + "ln_v_gamma"])
        t1n = _ln_irreps(ad.add(t2, t_agg), p[pre + "ln_t_gamma"])

        # feed-forward on invariants; vectors mix channels under learned gates
        vn = ad.sqrt(ad.add(ad.tsum(ad.square(v1n), axis=2), NORM_EPS))
        tn = ad.sqrt(ad.add(ad.tsum(ad.square(t1n), axis=2), NORM_EPS))
        inv = ad.concat([s1, vn, tn], axis=1)
        mid = ad.silu(ad.add(ad.matmul(inv, p[pre + "ffn_w1"]), p[pre + "ffn_b1"]))
        out = ad.add(ad.matmul(mid, p[pre + "ffn_w2"]), p[pre + "ffn_b2"])
        d0, d1 = cfg.d_scalar, cfg.d_vector
        ds = out[:, :d0]
        gv = ad.sigmoid(out[:, d0 : d0 + d1])
        gt = ad.sigmoid(out[:, d0 + d1 :])
        s2 = ad.add(s1, ds)
        v2o = ad.add(
            v1n,
            ad.mul(ad.einsum2("ncd,cf->nfd", v1n, p[pre + "ffn_vmix"]), ad.reshape(gv, (-1, d1, 1))),
        )
        t2o = ad.add(
            t1n,
            ad.mul(
                ad.einsum2("ncd,cf->nfd", t1n, p[pre + "ffn_tmix"]),
                ad.reshape(gt, (-1, cfg.d_tensor2, 1)),
            ),
        )
        if return_attention:
            return s2, v2o, t2o, alpha
        return s2, v2o, t2o, None


def ega_layer(feats: IrrepsFeature, ctx: GraphContext, coords, learner: Learner, block=0, return_attention=False):
    """Run one equivariant graph attention block on explicit features.

    Exposed for tests and inspection; forward() chains all blocks.
    """
    dt = learner.dtype
    coords_t = coords if isinstance(coords, ad.Tensor) else ad.Tensor(np.asarray(coords, dtype=dt))
    ci = ad.gather0(coords_t, ctx.dst)
    cj = ad.gather0(coords_t, ctx.src)
    r = ad.sub(ci, cj)
    dist = ad.norm_last(r)
    rb = ad.exp(
        ad.mul(
            ad.square(ad.sub(ad.reshape(dist, (-1, 1)), learner._rbf_centers.reshape(1, -1))),
            -learner._rbf_gamma,
        )
    )
    sh = ad.sh2(r)

    def wrap(x, shape):
        if isinstance(x, ad.Tensor):
            return x
        if x is None:
            return ad.Tensor(np.zeros(shape, dtype=dt))
        return ad.Tensor(np.asarray(x, dtype=dt))

    n = ctx.n_atoms
    cfg = learner.config
    s = wrap(feats.scalar, (n, cfg.d_scalar))
    v = wrap(feats.vector, (n, cfg.d_vector, 3))
    t2 = wrap(feats.l2, (n, cfg.d_tensor2, 5))
    s2, v2, t2o, alpha = learner._block(block, s, v, t2, ctx, sh, rb, return_attention=return_attention)
    out = IrrepsFeature(s2, v2, t2o)
    return (out, alpha) if return_attention else out


# --------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = "equiboost-checkpoint-v1"


def save_checkpoint(path, config: LearnerConfig, params, extras=None, meta=None):
    """Write params (+ optional optimizer extras) as a JSON header line
    followed by flat little-endian float payload."""
    extras = extras or {}
    arrays = {k: (t.data if isinstance(t, ad.Tensor) else np.asarray(t)) for k, t in params.items()}
    extra_arrays = {k: np.asarray(v) for k, v in extras.items()}
    wire = "<f4" if config.dtype == "float32" else "<f8"
    header = {
        "format": CHECKPOINT_MAGIC,
        "dtype": config.dtype,
        "config": asdict(config),
        "config_hash": config.hash(),
        "tensors": [{"name": k, "shape": list(arrays[k].shape)} for k in sorted(arrays)],
        "extra_tensors": [
            {"name": k, "shape": list(extra_arrays[k].shape)} for k in sorted(extra_arrays)
        ],
        "meta": meta or {},
    }
    payload = b"".join(
        [arrays[k].astype(wire).tobytes() for k in sorted(arrays)]
        + [extra_arrays[k].astype(wire).tobytes() for k in sorted(extra_arrays)]
    )
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path):
    """Read a checkpoint; returns (config, params dict, extras dict, meta)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        payload = fh.read()
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"not an equiboost checkpoint: {path}")
    config = LearnerConfig(**header["config"])
    wire = "<f4" if header["dtype"] == "float32" else "<f8"
    itemsize = np.dtype(wire).itemsize
    offset = 0
    out = {}
    for table, sink in ((header["tensors"], out), (header["extra_tensors"], extras := {})):
        for row in table:
            size = int(np.prod(row["shape"])) if row["shape"] else 1
            raw = np.frombuffer(payload, dtype=wire, count=size, offset=offset)
            sink[row["name"]] = raw.reshape(row["shape"]).astype(config.np_dtype)
            offset += size * itemsize
    return config, out, extras, header.get("meta", {})
