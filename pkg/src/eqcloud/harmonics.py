"""Real spherical harmonics, irrep bookkeeping, Clebsch-Gordan couplings,
gated nonlinearities and Wigner rotation blocks for degrees l <= 2.

Conventions (fixed throughout the package):

* Real orthonormal spherical harmonics with the integral norm,
  int_{S^2} Y_{lm}^2 dOmega = 1.  Components are ordered m = -l..l, so the
  l=1 block of ``spherical_harmonics`` is proportional to (y, z, x).
* Clebsch-Gordan blocks are orthonormal: sum_{m1,m2} C[m1,m2,m3] C[m1,m2,m3']
  = delta_{m3,m3'}.  The Gaunt integral of three harmonics equals the CG
  block times sqrt((2l1+1)(2l2+1) / (4 pi (2l3+1))) <l1 0 l2 0|l3 0>; in
  particular the (0,0,0) Gaunt value is 1/(2 sqrt(pi)) while C[0,0,0] = 1.
* The overall sign of each CG block is fixed by making its first nonzero
  entry (in lexicographic m-order) positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

LMAX_SUPPORTED = 2

_SQRT_PI = math.sqrt(math.pi)


# ---------------------------------------------------------------------------
# Irrep bookkeeping


@dataclass(frozen=True)
class Irreps:
    """Ordered list of (degree, multiplicity, parity) blocks.

    Parity defaults to (-1)^l (the natural parity of spherical-harmonic
    features and of true vectors such as velocities).
    """

    blocks: tuple = ()

    def __post_init__(self):
        norm = []
        for b in self.blocks:
            if len(b) == 2:
                l, mult = b
                parity = (-1) ** l
            else:
                l, mult, parity = b
            if l < 0 or l > LMAX_SUPPORTED:
                raise ValueError(f"degree {l} outside supported range 0..{LMAX_SUPPORTED}")
            if mult < 0:
                raise ValueError("multiplicity must be nonnegative")
            if mult > 0:
                norm.append((int(l), int(mult), int(parity)))
        object.__setattr__(self, "blocks", tuple(norm))

    @property
    def dim(self):
        return sum(mult * (2 * l + 1) for l, mult, _ in self.blocks)

    @property
    def lmax(self):
        return max((l for l, _, _ in self.blocks), default=0)

    def slices(self):
        """Yield (l, mult, parity, slice) for each block in layout order."""
        off = 0
        for l, mult, parity in self.blocks:
            d = mult * (2 * l + 1)
            yield l, mult, parity, slice(off, off + d)
            off += d

    def mult_of(self, l):
        return sum(m for ll, m, _ in self.blocks if ll == l)

    def __add__(self, other):
        return Irreps(self.blocks + other.blocks)

    def __repr__(self):
        return "+".join(f"{m}x{l}{'e' if p == 1 else 'o'}" for l, m, p in self.blocks)


def scalar_irreps(mult):
    return Irreps(((0, mult),))


@dataclass
class SteerableFeature:
    """A flat feature vector laid out block-by-block in irreps order.

    ``data`` may carry leading batch axes; the last axis is the irrep axis.
    """

    irreps: Irreps
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape[-1] != self.irreps.dim:
            raise ValueError(
                f"data last axis {self.data.shape[-1]} != irreps dim {self.irreps.dim}"
            )

    def block(self, index):
        """Return block ``index`` shaped (..., mult, 2l+1)."""
        l, mult, _, sl = list(self.irreps.slices())[index]
        return self.data[..., sl].reshape(self.data.shape[:-1] + (mult, 2 * l + 1))


# ---------------------------------------------------------------------------
# Real spherical harmonics, closed forms for l <= 2


def _sh_blocks(vec):
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    c0 = 0.5 / _SQRT_PI
    y0 = np.broadcast_to(c0, x.shape)[..., None]

    c1 = math.sqrt(3.0 / (4.0 * math.pi))
    y1 = np.stack([c1 * y, c1 * z, c1 * x], axis=-1)

    c2a = math.sqrt(15.0 / (4.0 * math.pi))
    c2b = math.sqrt(5.0 / (16.0 * math.pi))
    c2c = math.sqrt(15.0 / (16.0 * math.pi))
    r2 = x * x + y * y + z * z
    y2 = np.stack(
        [
            c2a * x * y,
            c2a * y * z,
            c2b * (3.0 * z * z - r2),
            c2a * x * z,
            c2c * (x * x - y * y),
        ],
        axis=-1,
    )
    return [y0, y1, y2]


def spherical_harmonics(direction, lmax, normalize_check=True):
    """Real spherical harmonics of a unit direction, degrees 0..lmax.

    Returns a SteerableFeature with irreps 1x0 + 1x1 + ... + 1xlmax.
    Raises on (near-)zero input vectors.
    """
    if lmax > LMAX_SUPPORTED:
        raise ValueError(f"lmax {lmax} > {LMAX_SUPPORTED}")
    direction = np.asarray(direction, dtype=np.float64)
    norms = np.linalg.norm(direction, axis=-1)
    if np.any(norms < 1e-12):
        raise ValueError("zero direction vector has no angular part")
    if normalize_check and np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError("direction vectors must be unit length")
    blocks = _sh_blocks(direction)[: lmax + 1]
    irreps = Irreps(tuple((l, 1) for l in range(lmax + 1)))
    return SteerableFeature(irreps, np.concatenate(blocks, axis=-1))


def sh_block_values(vectors, lmax):
    """Raw concatenated SH values (no unit-norm check; callers pre-normalize)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    return np.concatenate(_sh_blocks(vectors)[: lmax + 1], axis=-1)


# ---------------------------------------------------------------------------
# Clebsch-Gordan coefficients


def _cg_complex(j1, m1, j2, m2, j3, m3):
    """<j1 m1 j2 m2 | j3 m3> for integer angular momenta (Racah formula)."""
    if m1 + m2 != m3:
        return 0.0
    if j3 < abs(j1 - j2) or j3 > j1 + j2:
        return 0.0
    f = math.factorial
    pref = math.sqrt(
        (2 * j3 + 1)
        * f(j1 + j2 - j3)
        * f(j1 - j2 + j3)
        * f(-j1 + j2 + j3)
        / f(j1 + j2 + j3 + 1)
    )
    pref *= math.sqrt(
        f(j3 + m3) * f(j3 - m3) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2)
    )
    total = 0.0
    for k in range(0, j1 + j2 - j3 + 1):
        denoms = (
            k,
            j1 + j2 - j3 - k,
            j1 - m1 - k,
            j2 + m2 - k,
            j3 - j2 + m1 + k,
            j3 - j1 - m2 + k,
        )
        if any(d < 0 for d in denoms):
            continue
        total += (-1.0) ** k / math.prod(f(d) for d in denoms)
    return pref * total


@lru_cache(maxsize=None)
def _real_basis_matrix(l):
    """A with Y_real = A @ Y_complex (Condon-Shortley complex harmonics)."""
    dim = 2 * l + 1
    a = np.zeros((dim, dim), dtype=np.complex128)
    a[l, l] = 1.0
    for m in range(1, l + 1):
        a[l + m, l + m] = (-1.0) ** m / math.sqrt(2.0)
        a[l + m, l - m] = 1.0 / math.sqrt(2.0)
        a[l - m, l + m] = -1j * (-1.0) ** m / math.sqrt(2.0)
        a[l - m, l - m] = 1j / math.sqrt(2.0)
    return a


@lru_cache(maxsize=None)
def clebsch_gordan(l1, l2, l3):
    """Real-basis CG block of shape (2l1+1, 2l2+1, 2l3+1).

    Returns an all-zero block when the triangle rule is violated.  Blocks are
    orthonormal over (m1, m2); see the module docstring for the relation to
    Gaunt integrals.
    """
    for l in (l1, l2, l3):
        if l < 0 or l > LMAX_SUPPORTED:
            raise ValueError(f"degree {l} outside supported range")
    shape = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1)
    if l3 < abs(l1 - l2) or l3 > l1 + l2:
        return np.zeros(shape)

    cplx = np.zeros(shape, dtype=np.complex128)
    for i1, m1 in enumerate(range(-l1, l1 + 1)):
        for i2, m2 in enumerate(range(-l2, l2 + 1)):
            for i3, m3 in enumerate(range(-l3, l3 + 1)):
                cplx[i1, i2, i3] = _cg_complex(l1, m1, l2, m2, l3, m3)

    a1 = _real_basis_matrix(l1)
    a2 = _real_basis_matrix(l2)
    a3 = _real_basis_matrix(l3)
    # Change each complex index to the real basis; conjugate on the bra side.
    s = np.einsum("au,bv,cw,uvw->abc", a1.conj(), a2.conj(), a3, cplx)

    re, im = np.real(s), np.imag(s)
    nr, ni = np.linalg.norm(re), np.linalg.norm(im)
    # The coupling space has multiplicity one, so s is purely real or purely
    # imaginary depending on the parity of l1+l2+l3.
    block = re if nr >= ni else im
    if min(nr, ni) > 1e-10 * max(nr, ni):
        raise RuntimeError("CG basis change produced a mixed-phase block")
    flat = block.ravel()
    first = flat[np.nonzero(np.abs(flat) > 1e-12)[0][0]]
    if first < 0:
        block = -block
    block = block.copy()
    block.setflags(write=False)
    return block


def allowed_paths(l1, l2):
    """Output degrees reachable from l1 x l2 within the supported cap."""
    return [l3 for l3 in range(abs(l1 - l2), l1 + l2 + 1) if l3 <= LMAX_SUPPORTED]


# ---------------------------------------------------------------------------
# Wigner rotation blocks


@lru_cache(maxsize=None)
def _sample_directions(l):
    # Deterministic well-conditioned sample set for the linear solve.
    rng = np.random.default_rng(20240517 + l)
    v = rng.normal(size=(4 * l + 6, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def wigner_d_block(l, rotation):
    """D^l(R) with Y_l(R rhat) = D^l(R) Y_l(rhat), for any orthogonal R."""
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3) or not np.allclose(
        rotation @ rotation.T, np.eye(3), atol=1e-9
    ):
        raise ValueError("rotation must be a 3x3 orthogonal matrix")
    if l == 0:
        return np.ones((1, 1))
    dirs = _sample_directions(l)
    ya = sh_block_values(dirs, l)[:, l * l :]
    yb = sh_block_values(dirs @ rotation.T, l)[:, l * l :]
    # Solve D @ ya.T = yb.T in the least-squares sense (exact relation).
    d, *_ = np.linalg.lstsq(ya, yb, rcond=None)
    return d.T


def wigner_d(lmax, rotation):
    """Block-diagonal rotation matrix for irreps 1x0 + ... + 1xlmax."""
    blocks = [wigner_d_block(l, rotation) for l in range(lmax + 1)]
    dim = sum(b.shape[0] for b in blocks)
    out = np.zeros((dim, dim))
    off = 0
    for b in blocks:
        n = b.shape[0]
        out[off : off + n, off : off + n] = b
        off += n
    return out


def wigner_d_irreps(irreps, rotation):
    """Block-diagonal rotation matrix matching an arbitrary irreps layout."""
    rotation = np.asarray(rotation, dtype=np.float64)
    det = np.linalg.det(rotation)
    per_l = {}
    out = np.zeros((irreps.dim, irreps.dim))
    for l, mult, parity, sl in irreps.slices():
        if l not in per_l:
            per_l[l] = wigner_d_block(l, rotation)
        block = per_l[l]
        # wigner_d_block already carries (-1)^l under improper rotations;
        # correct for blocks whose declared parity differs from (-1)^l.
        if det < 0 and parity != (-1) ** l:
            block = -block
        d = 2 * l + 1
        for u in range(mult):
            a = sl.start + u * d
            out[a : a + d, a : a + d] = block
    return out


def rotate_feature(feature, rotation):
    d = wigner_d_irreps(feature.irreps, rotation)
    return SteerableFeature(feature.irreps, feature.data @ d.T)


# ---------------------------------------------------------------------------
# Weighted tensor product


@dataclass(frozen=True)
class TensorProductPlan:
    """Enumerated CG paths between two irreps layouts and an output layout.

    Each path couples input block i1 with input block i2 into output block
    i3 and owns a weight array of shape (mult3, mult1, mult2).
    """

    irreps_in1: Irreps
    irreps_in2: Irreps
    irreps_out: Irreps
    paths: tuple = field(default=())

    @staticmethod
    def build(irreps_in1, irreps_in2, irreps_out):
        b1 = list(irreps_in1.slices())
        b2 = list(irreps_in2.slices())
        b3 = list(irreps_out.slices())
        paths = []
        for i3, (l3, _, p3, _) in enumerate(b3):
            found = False
            for i1, (l1, _, p1, _) in enumerate(b1):
                for i2, (l2, _, p2, _) in enumerate(b2):
                    if l3 in allowed_paths(l1, l2) and p1 * p2 == p3:
                        paths.append((i1, i2, i3))
                        found = True
            if not found:
                raise ValueError(
                    f"no CG path produces output block {i3} (l={l3}, parity={p3})"
                )
        return TensorProductPlan(irreps_in1, irreps_in2, irreps_out, tuple(paths))

    def weight_shapes(self):
        b1 = list(self.irreps_in1.slices())
        b2 = list(self.irreps_in2.slices())
        b3 = list(self.irreps_out.slices())
        return [
            (b3[i3][1], b1[i1][1], b2[i2][1]) for i1, i2, i3 in self.paths
        ]

    def n_weights(self):
        return sum(int(np.prod(s)) for s in self.weight_shapes())


def tensor_product(a, b, weights, irreps_out, plan=None):
    """Weighted Clebsch-Gordan tensor product of two steerable features.

    ``weights`` is a list of arrays, one per path of the plan, each shaped
    (mult_out, mult_in1, mult_in2).  Linear in a, b and the weights.
    """
    if plan is None:
        plan = TensorProductPlan.build(a.irreps, b.irreps, irreps_out)
    b1 = list(a.irreps.slices())
    b2 = list(b.irreps.slices())
    b3 = list(irreps_out.slices())
    batch = np.broadcast_shapes(a.data.shape[:-1], b.data.shape[:-1])
    out = np.zeros(batch + (irreps_out.dim,))
    for (i1, i2, i3), w in zip(plan.paths, weights):
        l1, m1, _, s1 = b1[i1]
        l2, m2, _, s2 = b2[i2]
        l3, m3, _, s3 = b3[i3]
        cg = clebsch_gordan(l1, l2, l3)
        xa = a.data[..., s1].reshape(a.data.shape[:-1] + (m1, 2 * l1 + 1))
        xb = b.data[..., s2].reshape(b.data.shape[:-1] + (m2, 2 * l2 + 1))
        res = np.einsum("tuv,...um,...vn,mnp->...tp", w, xa, xb, cg)
        out[..., s3] += res.reshape(batch + (m3 * (2 * l3 + 1),))
    return SteerableFeature(irreps_out, out)


# ---------------------------------------------------------------------------
# Gated nonlinearity


def _gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gate_split(irreps):
    """Number of gate scalars consumed and the output irreps after gating.

    The last n_gates scalar channels act as gates, one per nonscalar channel;
    they are consumed and do not appear in the output.
    """
    n_gates = sum(m for l, m, _ in irreps.blocks if l > 0)
    n_scalars = sum(m for l, m, _ in irreps.blocks if l == 0)
    if n_gates > 0 and n_scalars < n_gates + 0:
        raise ValueError(
            f"need at least {n_gates} scalar gate channels, have {n_scalars}"
        )
    out_blocks = []
    remaining = n_scalars - n_gates
    if remaining > 0:
        out_blocks.append((0, remaining, 1))
    for l, m, p in irreps.blocks:
        if l > 0:
            out_blocks.append((l, m, p))
    return n_gates, Irreps(tuple(out_blocks))


def gated_nonlinearity(feature):
    """GELU on passthrough scalars, sigmoid-gated scaling on l>0 blocks."""
    irreps = feature.irreps
    n_gates, irreps_out = gate_split(irreps)

    scalars = []
    nonscalars = []
    for l, mult, parity, sl in irreps.slices():
        part = feature.data[..., sl]
        if l == 0:
            scalars.append(part)
        else:
            nonscalars.append((l, mult, part))
    flat_scalars = (
        np.concatenate(scalars, axis=-1) if scalars else feature.data[..., :0]
    )
    n_pass = flat_scalars.shape[-1] - n_gates
    passthrough = flat_scalars[..., :n_pass]
    gates = flat_scalars[..., n_pass:]

    pieces = []
    if n_pass > 0:
        pieces.append(_gelu(passthrough))
    g = _sigmoid(gates)
    gi = 0
    for l, mult, part in nonscalars:
        blk = part.reshape(part.shape[:-1] + (mult, 2 * l + 1))
        blk = blk * g[..., gi : gi + mult, None]
        gi += mult
        pieces.append(blk.reshape(part.shape))
    out = np.concatenate(pieces, axis=-1) if pieces else feature.data[..., :0]
    return SteerableFeature(irreps_out, out)
