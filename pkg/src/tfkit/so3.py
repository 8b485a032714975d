"""Exact SO(3) machinery: real spherical harmonics, rotation representations,
and Clebsch-Gordan couplings for orders 0..2.

Conventions, fixed once and used everywhere in the package:

* Spherical harmonics are the orthonormal *real* harmonics without the
  Condon-Shortley phase, components ordered m = -l..l.  At l = 1 this makes
  ``Y_1(u) = sqrt(3/4pi) * (y, z, x)`` a pure axis permutation of the
  Cartesian vector.
* Rotation representations are defined by the commutation rule
  ``Y_l(R u) = D_l(R) Y_l(u)`` and computed in closed form: conjugation by
  the axis permutation at l = 1, conjugation by the symmetric-square action
  on quadratic monomials at l = 2.
* Clebsch-Gordan tensors are the intertwiners ``V_l1 x V_l2 -> V_l3`` in
  this real basis (unique up to sign for admissible triples).  They are
  found once, at first use, as the null space of the equivariance
  constraint stacked over a fixed set of random rotations, normalized to
  unit Frobenius norm with a deterministic sign fix.

All functions are pure; coupling tables are cached and immutable.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

MAX_ORDER = 2

# Orthonormal real-SH prefactors.
_C00 = 0.5 / math.sqrt(math.pi)
_C1 = math.sqrt(3.0 / (4.0 * math.pi))
_C2A = 0.5 * math.sqrt(15.0 / math.pi)
_C20 = 0.25 * math.sqrt(5.0 / math.pi)
_C2B = 0.25 * math.sqrt(15.0 / math.pi)

# Permutation sending a Cartesian vector (x, y, z) to SH component order
# (y, z, x), i.e. m = -1, 0, +1.
_P_CART_TO_SH = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])

# Symmetric 3x3 matrices in the monomial basis (xx, yy, zz, xy, xz, yz).
_SYM_PAIRS = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]

# Y_2 as a linear map on quadratic monomials; traceless rows, so the
# pseudo-inverse lands in the traceless subspace and the conjugation below
# is an exact representation.
_F2 = np.zeros((5, 6))
_F2[0, 3] = _C2A
_F2[1, 5] = _C2A
_F2[2, :3] = (-_C20, -_C20, 2.0 * _C20)
_F2[3, 4] = _C2A
_F2[4, 0] = _C2B
_F2[4, 1] = -_C2B
_G2 = np.linalg.pinv(_F2)

# Seed of the fixed rotation set used to solve for coupling tensors.  Part
# of the numerical convention: changing it may flip coupling signs.
_CG_SOLVER_SEED = 20260301


def _check_order(l: int) -> None:
    if not isinstance(l, (int, np.integer)) or l < 0:
        raise ValueError(f"order must be a non-negative integer, got {l!r}")
    if l > MAX_ORDER:
        raise ValueError(f"unsupported order l={l} (maximum is {MAX_ORDER})")


@dataclass(frozen=True)
class Rotation:
    """A proper rotation of 3-space: orthogonal matrix with det = +1."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if not np.allclose(m.T @ m, np.eye(3), rtol=0.0, atol=1e-12):
            raise ValueError("matrix is not orthogonal")
        if abs(np.linalg.det(m) - 1.0) > 1e-12:
            raise ValueError("matrix is not a proper rotation (det != +1)")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def about_z(cls, angle: float) -> "Rotation":
        c, s = math.cos(angle), math.sin(angle)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))

    def compose(self, other: "Rotation") -> "Rotation":
        """Rotation equal to applying ``other`` first, then ``self``."""
        return Rotation(self.matrix @ other.matrix)

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T.copy())

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Rotate one or many 3-vectors (shape (..., 3))."""
        return np.asarray(points, dtype=float) @ self.matrix.T


@dataclass(frozen=True)
class IrrepMatrix:
    """Action of one rotation on the (2l+1)-dimensional order-l component."""

    order: int
    matrix: np.ndarray

    def __post_init__(self) -> None:
        _check_order(self.order)
        d = 2 * self.order + 1
        m = np.array(self.matrix, dtype=float)
        if m.shape != (d, d):
            raise ValueError(f"order-{self.order} matrix must be {d}x{d}, got {m.shape}")
        if not np.allclose(m.T @ m, np.eye(d), rtol=0.0, atol=1e-10):
            raise ValueError("representation matrix is not orthogonal")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class CGTensor:
    """Coupling coefficients for order l1 x order l2 -> order l3."""

    l1: int
    l2: int
    l3: int
    coefficients: np.ndarray

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coefficients)


def _sh_unchecked(l: int, u: np.ndarray) -> np.ndarray:
    """Real spherical harmonics of unit directions, no input validation."""
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    if l == 0:
        return np.full(u.shape[:-1] + (1,), _C00)
    if l == 1:
        return _C1 * np.stack([y, z, x], axis=-1)
    return np.stack(
        [
            _C2A * x * y,
            _C2A * y * z,
            _C20 * (3.0 * z * z - 1.0),
            _C2A * x * z,
            _C2B * (x * x - y * y),
        ],
        axis=-1,
    )


def real_spherical_harmonics(l: int, u: np.ndarray) -> np.ndarray:
    """Evaluate the order-l real spherical harmonics at unit direction(s) ``u``.

    ``u`` has shape (..., 3) and every row must be unit length within 1e-9.
    Returns an array of shape (..., 2l+1) with components ordered m = -l..l.
    """
    _check_order(l)
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != 3:
        raise ValueError(f"direction must have 3 components, got shape {u.shape}")
    norms = np.linalg.norm(u, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError("non-unit direction")
    return _sh_unchecked(l, u)


def _sym_square(r: np.ndarray) -> np.ndarray:
    """6x6 action of S -> R S R^T on symmetric matrices, monomial basis."""
    m = np.empty((6, 6))
    for k, (i, j) in enumerate(_SYM_PAIRS):
        e = np.zeros((3, 3))
        e[i, j] = 1.0
        e[j, i] = 1.0
        s = r @ e @ r.T
        m[:, k] = (s[0, 0], s[1, 1], s[2, 2], s[0, 1], s[0, 2], s[1, 2])
    return m


def _wigner_block(l: int, r: np.ndarray) -> np.ndarray:
    if l == 0:
        return np.ones((1, 1))
    if l == 1:
        return _P_CART_TO_SH @ r @ _P_CART_TO_SH.T
    return _F2 @ _sym_square(r) @ _G2


def wigner_matrix(l: int, g: Rotation | np.ndarray) -> IrrepMatrix:
    """Rotation matrix on the order-l component: Y_l(g u) = D_l(g) Y_l(u)."""
    _check_order(l)
    rot = g if isinstance(g, Rotation) else Rotation(np.asarray(g, dtype=float))
    return IrrepMatrix(l, _wigner_block(l, rot.matrix))


def _random_rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation matrix via a uniform unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(seed: int | np.random.Generator) -> Rotation:
    """Haar-uniform random rotation, deterministic per seed.

    Accepts either an integer seed or a ``numpy.random.Generator`` (so a
    stream of rotations can be drawn from one generator).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Rotation(_random_rotation_matrix(rng))


@functools.lru_cache(maxsize=None)
def _cg_coefficients(l1: int, l2: int, l3: int) -> np.ndarray:
    d1, d2, d3 = 2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1
    if l3 < abs(l1 - l2) or l3 > l1 + l2:
        zero = np.zeros((d1, d2, d3))
        zero.flags.writeable = False
        return zero

    # Equivariance constraint for 20 fixed random rotations; the coupling
    # tensor spans the (one-dimensional) common null space.
    rng = np.random.default_rng(_CG_SOLVER_SEED)
    rows = []
    eye1, eye2, eye3 = np.eye(d1), np.eye(d2), np.eye(d3)
    for _ in range(20):
        r = _random_rotation_matrix(rng)
        m1 = _wigner_block(l1, r)
        m2 = _wigner_block(l2, r)
        m3 = _wigner_block(l3, r)
        lhs = np.kron(m1.T, np.kron(m2.T, eye3))
        rhs = np.kron(eye1, np.kron(eye2, m3))
        rows.append(lhs - rhs)
    stacked = np.concatenate(rows, axis=0)
    if d1 == d2 == d3 == 1:
        one = np.ones((1, 1, 1))
        one.flags.writeable = False
        return one
    _, svals, vh = np.linalg.svd(stacked)
    if svals[-1] > 1e-8 or svals[-2] < 1e-3:
        raise RuntimeError(
            f"coupling solve failed for ({l1},{l2},{l3}): "
            f"singular values {svals[-2]:.3e}, {svals[-1]:.3e}"
        )
    coeffs = vh[-1]
    pivot = np.argmax(np.abs(coeffs))
    if coeffs[pivot] < 0:
        coeffs = -coeffs
    coeffs = coeffs.reshape(d1, d2, d3)
    coeffs.flags.writeable = False
    return coeffs


def clebsch_gordan(l1: int, l2: int, l3: int) -> CGTensor:
    """Real-basis coupling tensor for l1 x l2 -> l3, unit Frobenius norm.

    Triples violating the selection rule |l1-l2| <= l3 <= l1+l2 return the
    zero tensor.
    """
    for l in (l1, l2, l3):
        _check_order(l)
    return CGTensor(l1, l2, l3, _cg_coefficients(l1, l2, l3))
