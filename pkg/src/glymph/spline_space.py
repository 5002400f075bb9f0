"""Tensor-product quadratic B-spline spaces on an axis-aligned box.

Basis functions are indexed x-fastest: global index ``ix + nx*(iy + ny*iz)``
where ``n_a = elements_a + 2``. A space may be *restricted* to a subset of
active basis functions; fields then carry one coefficient per active function.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DomainError
from .linalg import cg_solve
from .volume_io import VoxelVolume

DEGREE = 2
NLOC = (DEGREE + 1) ** 3


def open_uniform_knots(a, b, n_elements, degree=DEGREE):
    inner = np.linspace(a, b, n_elements + 1)
    return np.concatenate([np.full(degree, a), inner, np.full(degree, b)])


def basis_ders_1d(knots, p, span, x, nder=2):
    """Nonzero B-spline values and derivatives on knot span ``span``.

    Vectorized version of the classic triangular-table algorithm.
    ``span`` and ``x`` have shape (Q,); returns (nder+1, Q, p+1).
    """
    x = np.asarray(x, dtype=float)
    span = np.asarray(span)
    Q = x.size
    ndu = np.zeros((p + 1, p + 1, Q))
    left = np.zeros((p + 1, Q))
    right = np.zeros((p + 1, Q))
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = x - knots[span + 1 - j]
        right[j] = knots[span + j] - x
        saved = np.zeros(Q)
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    ders = np.zeros((nder + 1, Q, p + 1))
    for j in range(p + 1):
        ders[0, :, j] = ndu[j, p]
    a = np.zeros((2, p + 1, Q))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, nder + 1):
            d = np.zeros(Q)
            rk, pk = r - k, p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d = d + a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d = d + a[s2, k] * ndu[r, pk]
            ders[k, :, r] = d
            s1, s2 = s2, s1
    fac = p
    for k in range(1, nder + 1):
        ders[k] *= fac
        fac *= p - k
    return ders


@dataclass(eq=False)
class PointBasis:
    """Basis data at a set of points.

    ``idx`` holds active indices (-1 for inactive functions) in local order
    ``a + 3 b + 9 c``; ``grad`` is (Q, 27, 3) and ``lap`` is (Q, 27).
    """

    points: np.ndarray
    elem: np.ndarray
    glob: np.ndarray
    idx: np.ndarray
    val: np.ndarray
    grad: np.ndarray
    lap: np.ndarray
    n_cp: int

    def __len__(self):
        return len(self.points)

    def _gather(self, coef):
        ext = np.append(np.asarray(coef, dtype=float), 0.0)
        return ext[self.idx]

    def values(self, coef):
        return np.einsum("qa,qa->q", self.val, self._gather(coef))

    def gradients(self, coef):
        return np.einsum("qak,qa->qk", self.grad, self._gather(coef))

    def laplacians(self, coef):
        return np.einsum("qa,qa->q", self.lap, self._gather(coef))

    def matrix(self, data=None):
        """Sparse (Q, n_cp) evaluation matrix for ``data`` (defaults to values)."""
        data = self.val if data is None else data
        keep = self.idx >= 0
        rows = np.broadcast_to(np.arange(len(self))[:, None], self.idx.shape)[keep]
        return sp.csr_matrix((data[keep], (rows, self.idx[keep])), shape=(len(self), self.n_cp))


class SplineSpace:
    """Quadratic tensor-product B-spline basis over ``[lower, upper]``.

    Args:
        lower, upper: box corners in mm.
        shape: number of elements per axis.
        active: optional sorted global indices of the active basis functions.
    """

    degree = DEGREE

    def __init__(self, lower, upper, shape, active=None):
        self.lower = np.asarray(lower, dtype=float).reshape(3)
        self.upper = np.asarray(upper, dtype=float).reshape(3)
        self.shape = tuple(int(n) for n in np.broadcast_to(shape, (3,)))
        if np.any(self.upper <= self.lower):
            raise ConfigurationError("box upper corner must exceed lower corner")
        if min(self.shape) < 1:
            raise ConfigurationError(f"need at least one element per axis, got {self.shape}")
        self.h = (self.upper - self.lower) / np.asarray(self.shape)
        self.knots = tuple(open_uniform_knots(self.lower[a], self.upper[a], self.shape[a]) for a in range(3))
        self.n_basis = tuple(n + DEGREE for n in self.shape)
        self.n_total = int(np.prod(self.n_basis))
        if active is None:
            active = np.arange(self.n_total)
        active = np.unique(np.asarray(active, dtype=np.int64))
        if active.size and (active[0] < 0 or active[-1] >= self.n_total):
            raise ConfigurationError("active basis indices out of range")
        self.active = active
        self.active.setflags(write=False)
        self._g2a = np.full(self.n_total, -1, dtype=np.int64)
        self._g2a[active] = np.arange(active.size)

    def __repr__(self):
        return (f"SplineSpace(lower={self.lower.tolist()}, upper={self.upper.tolist()}, "
                f"shape={self.shape}, n_cp={self.n_cp})")

    @property
    def n_cp(self):
        return int(self.active.size)

    @property
    def n_elements(self):
        return int(np.prod(self.shape))

    @property
    def h_char(self):
        """Characteristic element length: geometric mean of the axis sizes."""
        return float(np.prod(self.h) ** (1.0 / 3.0))

    def restrict(self, active):
        return SplineSpace(self.lower, self.upper, self.shape, active)

    def compatible(self, other):
        return (other is self or (self.shape == other.shape and np.allclose(self.lower, other.lower)
                and np.allclose(self.upper, other.upper) and np.array_equal(self.active, other.active)))

    def global_to_active(self, glob):
        return self._g2a[glob]

    def element_index(self, ijk):
        ijk = np.asarray(ijk)
        return ijk[..., 0] + self.shape[0] * (ijk[..., 1] + self.shape[1] * ijk[..., 2])

    def element_ijk(self, eid):
        eid = np.asarray(eid)
        nx, ny = self.shape[0], self.shape[1]
        return np.stack([eid % nx, (eid // nx) % ny, eid // (nx * ny)], axis=-1)

    def element_lower(self, eid):
        return self.lower + self.element_ijk(eid) * self.h

    def basis_ijk(self, glob):
        glob = np.asarray(glob)
        nx, ny = self.n_basis[0], self.n_basis[1]
        return np.stack([glob % nx, (glob // nx) % ny, glob // (nx * ny)], axis=-1)

    def greville_points(self):
        """Greville abscissae (knot averages) of the active basis functions, shape (n_cp, 3)."""
        ijk = self.basis_ijk(self.active)
        g = [0.5 * (k[1:1 + nb] + k[2:2 + nb]) for k, nb in
             ((np.asarray(kn), nb) for kn, nb in zip(self.knots, self.n_basis))]
        return np.stack([g[a][ijk[:, a]] for a in range(3)], axis=1)

    def support_box(self, glob):
        """Lower/upper corners of the knot-support box of basis functions ``glob``."""
        ijk = self.basis_ijk(glob)
        lo = np.clip(ijk - DEGREE, 0, None)
        hi = np.minimum(ijk + 1, np.asarray(self.shape))
        return self.lower + lo * self.h, self.lower + hi * self.h

    def contains(self, points, tol=1e-12):
        pts = np.atleast_2d(points)
        pad = tol * (self.upper - self.lower)
        return np.all((pts >= self.lower - pad) & (pts <= self.upper + pad), axis=1)

    def locate(self, points):
        """Element index triples (Q, 3) containing ``points``; DomainError outside the box."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if not np.all(self.contains(pts)):
            bad = pts[~self.contains(pts)][0]
            raise DomainError(f"point {bad.tolist()} lies outside the box [{self.lower}, {self.upper}]")
        ijk = np.floor((pts - self.lower) / self.h).astype(np.int64)
        return np.clip(ijk, 0, np.asarray(self.shape) - 1)

    def basis(self, points, elem=None):
        """Evaluate the 27 supported basis functions at ``points``.

        ``elem`` (flat element ids) may be supplied when the caller knows the
        element, which avoids ambiguity for points on element faces.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if elem is None:
            ijk = self.locate(pts)
        else:
            ijk = self.element_ijk(np.asarray(elem))
        Q = len(pts)
        per_axis = []
        for a in range(3):
            span = ijk[:, a] + DEGREE
            per_axis.append(basis_ders_1d(self.knots[a], DEGREE, span, pts[:, a], 2))
        # shapes (Q, c, b, a) so that flattening gives local index a + 3b + 9c
        X = [d[:, None, None, :] for d in per_axis[0]]
        Y = [d[:, None, :, None] for d in per_axis[1]]
        Z = [d[:, :, None, None] for d in per_axis[2]]
        val = (X[0] * Y[0] * Z[0]).reshape(Q, NLOC)
        grad = np.stack([(X[1] * Y[0] * Z[0]).reshape(Q, NLOC),
                         (X[0] * Y[1] * Z[0]).reshape(Q, NLOC),
                         (X[0] * Y[0] * Z[1]).reshape(Q, NLOC)], axis=-1)
        lap = (X[2] * Y[0] * Z[0] + X[0] * Y[2] * Z[0] + X[0] * Y[0] * Z[2]).reshape(Q, NLOC)
        loc = np.arange(DEGREE + 1)
        ga = ijk[:, 0][:, None, None, None] + loc[None, None, None, :]
        gb = ijk[:, 1][:, None, None, None] + loc[None, None, :, None]
        gc = ijk[:, 2][:, None, None, None] + loc[None, :, None, None]
        glob = (ga + self.n_basis[0] * (gb + self.n_basis[1] * gc)).reshape(Q, NLOC)
        return PointBasis(points=pts, elem=self.element_index(ijk), glob=glob, idx=self._g2a[glob],
                          val=val, grad=grad, lap=lap, n_cp=self.n_cp)


@dataclass(frozen=True, eq=False)
class Field:
    """Scalar spline field: one coefficient per active basis function."""

    space: SplineSpace
    coef: np.ndarray

    def __post_init__(self):
        coef = np.array(self.coef, dtype=float).reshape(-1)
        if coef.size != self.space.n_cp:
            raise ConfigurationError(f"field has {coef.size} coefficients, space has n_cp={self.space.n_cp}")
        if not np.all(np.isfinite(coef)):
            raise ConfigurationError("field coefficients must be finite")
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)

    @classmethod
    def zeros(cls, space):
        return cls(space, np.zeros(space.n_cp))

    @classmethod
    def constant(cls, space, value):
        return cls(space, np.full(space.n_cp, float(value)))

    def __call__(self, points):
        return self.space.basis(points).values(self.coef)

    def gradient(self, points):
        return self.space.basis(points).gradients(self.coef)

    def _coerce(self, other):
        if isinstance(other, Field):
            if not self.space.compatible(other.space):
                raise ConfigurationError("fields live on different spaces")
            return other.coef
        return float(other)

    def __add__(self, other):
        return Field(self.space, self.coef + self._coerce(other))

    def __sub__(self, other):
        return Field(self.space, self.coef - self._coerce(other))

    def __mul__(self, scalar):
        return Field(self.space, self.coef * float(scalar))

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class VectorField:
    """Three scalar components on one space, stored component-major.

    ``coef[k*n_cp:(k+1)*n_cp]`` holds component k.
    """

    space: SplineSpace
    coef: np.ndarray

    def __post_init__(self):
        coef = np.array(self.coef, dtype=float).reshape(-1)
        if coef.size != 3 * self.space.n_cp:
            raise ConfigurationError(
                f"vector field has {coef.size} coefficients, expected 3*n_cp={3 * self.space.n_cp}")
        if not np.all(np.isfinite(coef)):
            raise ConfigurationError("field coefficients must be finite")
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)

    @classmethod
    def from_components(cls, components):
        comps = list(components)
        if len(comps) != 3:
            raise ConfigurationError("need exactly three components")
        space = comps[0].space
        if not all(space.compatible(c.space) for c in comps):
            raise ConfigurationError("components live on different spaces")
        return cls(space, np.concatenate([c.coef for c in comps]))

    @classmethod
    def zeros(cls, space):
        return cls(space, np.zeros(3 * space.n_cp))

    @property
    def components(self):
        return self.coef.reshape(3, self.space.n_cp)

    def component(self, k):
        return Field(self.space, self.components[k])

    def __call__(self, points):
        pb = self.space.basis(points)
        return np.stack([pb.values(c) for c in self.components], axis=1)

    def divergence(self, points):
        pb = self.space.basis(points)
        return sum(pb.gradients(self.components[k])[:, k] for k in range(3))


def eval_basis(space, point):
    """Active basis functions supported at ``point``.

    Returns a list of ``(active_index, value, gradient, laplacian)``; inactive
    functions are omitted, so a full space always yields 27 entries.
    """
    pb = space.basis(np.asarray(point, dtype=float).reshape(1, 3))
    out = []
    for a in range(NLOC):
        i = int(pb.idx[0, a])
        if i >= 0:
            out.append((i, float(pb.val[0, a]), pb.grad[0, a].copy(), float(pb.lap[0, a])))
    return out


def eval_field(field, point, gradient=False):
    """Evaluate a Field at one or many points; optionally return the gradient too."""
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    pb = field.space.basis(pts.reshape(-1, 3))
    v = pb.values(field.coef)
    if not gradient:
        return float(v[0]) if single else v
    g = pb.gradients(field.coef)
    return (float(v[0]), g[0]) if single else (v, g)


def quasi_interpolate(space, func):
    """Field whose coefficients are ``func`` sampled at the Greville points.

    Exact for linear functions, preserves bounds and sign of ``func`` and keeps
    coefficients of basis functions barely touching a cut domain well scaled.
    ``func`` maps (Q, 3) points to (Q,) values or (Q, 3) vectors; vectors give
    a VectorField.
    """
    vals = np.asarray(func(space.greville_points()), dtype=float)
    if vals.ndim == 2:
        return VectorField(space, vals.T.ravel())
    return Field(space, vals)


# weight of the fictitious-domain term in projections
PROJECTION_ALPHA = 1e-8


def l2_project(space, domain, samples, rtol=1e-10, method="direct", alpha=PROJECTION_ALPHA):
    """Galerkin L2 projection over the immersed domain.

    ``samples`` is a VoxelVolume (trilinearly interpolated to quadrature points),
    a callable mapping (Q, 3) points to values, or an array of values at the
    domain's bulk quadrature points. ``method`` is "direct"
    (cached sparse factorization with refinement) or "cg".

    Basis functions whose support barely intersects Omega have Gram rows near
    1e-40 and their coefficients are otherwise fixed by round-off. ``alpha``
    adds ``alpha * int_{cut cells} (c - f) N_i`` over the whole cut elements
    (the finite cell method's fictitious domain), so those coefficients follow
    the data's extension; for array samples, which carry no exterior values,
    the extension is zero. Data lying in the spline space is still reproduced
    exactly. Raises ConfigurationError when the space has no active basis.
    """
    if space.n_cp == 0:
        raise ConfigurationError("cannot project onto a space with no active basis functions")
    if not space.compatible(domain.space):
        raise ConfigurationError("projection space differs from the domain's space")
    pb = domain.bulk_basis
    pts = pb.points
    xpts, xw, _, xb = domain.exterior_rule if alpha > 0 else (None, np.zeros(0), None, None)
    fx = None
    if isinstance(samples, VoxelVolume):
        lo, hi = samples.lower, samples.upper
        pad = 1e-9 * (hi - lo)
        if np.any(space.lower < lo - pad) or np.any(space.upper > hi + pad):
            raise ConfigurationError("sample volume does not cover the spline box")
        f = samples.interpolate(pts)
        if len(xw):
            fx = samples.interpolate(xpts)
    elif callable(samples):
        f = np.asarray(samples(pts), dtype=float)
        if len(xw):
            fx = np.asarray(samples(xpts), dtype=float)
    else:
        f = np.asarray(samples, dtype=float)
        if f.shape != (len(pts),):
            raise ConfigurationError(f"sample array must have shape ({len(pts)},), got {f.shape}")
    from .assembly import assemble_vector
    rhs = assemble_vector(pb, pb.val, domain.bulk_weights * f)
    if fx is not None:
        rhs = rhs + alpha * assemble_vector(xb, xb.val, xw * fx)
    solver = domain.projection_solver(alpha if len(xw) else 0.0)
    if method == "direct":
        coef = solver.solve(rhs)
    elif method == "cg":
        coef = cg_solve(solver.A.tocsr(), rhs, rtol=rtol)
    else:
        raise ConfigurationError(f"unknown projection method {method!r}")
    return Field(space, coef)
