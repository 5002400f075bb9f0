"""Immersed domain: level set, element classification and cut-cell quadrature.

Cut elements are octasected ``n_q`` times. Leaf cells that are still cut are
split into six Kuhn tetrahedra; each tetrahedron is clipped by the linear
interpolant of the level set, which yields both the bulk sub-tetrahedra and
the interface triangles. Box faces touched by the domain are included in the
surface rule, so the bulk and surface rules bound the same polyhedral region.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .spline_space import DEGREE, SplineSpace
from .volume_io import VoxelVolume

log = logging.getLogger(__name__)

OUTSIDE, INSIDE, CUT = 0, 1, 2
MAX_DEPTH = 8
SURFACE_INTERFACE, SURFACE_BOX = 0, 1

_CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=float)
# Kuhn decomposition: monotone lattice paths from corner 0 to corner 7
_KUHN = np.array([[0, 1 << a, (1 << a) | (1 << b), 7]
                  for a, b in [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]])
_TET_A, _TET_B = 0.5854101966249685, 0.1381966011250105
_TRI_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])


def _gauss_cube(n):
    x, w = np.polynomial.legendre.leggauss(n)
    x, w = 0.5 * (x + 1), 0.5 * w
    X = np.stack(np.meshgrid(x, x, x, indexing="ij"), -1).reshape(-1, 3)
    W = np.einsum("i,j,k->ijk", w, w, w).ravel()
    return X, W


def _gauss_square(n):
    x, w = np.polynomial.legendre.leggauss(n)
    x, w = 0.5 * (x + 1), 0.5 * w
    X = np.stack(np.meshgrid(x, x, indexing="ij"), -1).reshape(-1, 2)
    return X, np.outer(w, w).ravel()


class LevelSet:
    """Scalar function positive inside Omega and non-positive outside.

    ``lipschitz`` is an optional bound on the gradient norm; when known it lets
    the classifier catch interfaces that pass between sample points.
    """

    def __init__(self, func, lipschitz=None, volume=None):
        self._func = func
        self.lipschitz = lipschitz
        self.volume = volume

    def __call__(self, points):
        return np.asarray(self._func(np.atleast_2d(np.asarray(points, dtype=float))), dtype=float)

    def indicator(self, points):
        return self(points) > 0

    @classmethod
    def from_function(cls, func, lipschitz=None):
        return cls(func, lipschitz)

    @classmethod
    def from_mask(cls, mask, smooth=True, eps=1e-3):
        """Signed voxel field ``2*mask - 1``, optionally averaged over the 6-neighbourhood.

        Values are then pushed away from zero with the mask's sign, so the sign
        at every voxel centre matches the mask exactly.
        """
        m = np.asarray(mask.data) > 0.5
        v = np.where(m, 1.0, -1.0)
        if smooth:
            kern = np.zeros((3, 3, 3))
            kern[1, 1, :] = kern[1, :, 1] = kern[:, 1, 1] = 1.0
            v = ndimage.convolve(v, kern / kern.sum(), mode="nearest")
        v = np.where(m, np.maximum(v, eps), np.minimum(v, -eps))
        vol = mask.with_data(v)
        return cls(vol.interpolate, None, vol)


@dataclass(eq=False)
class _Rule:
    points: list
    weights: list
    elem: list

    def add(self, p, w, e):
        keep = w > 0
        self.points.append(p[keep])
        self.weights.append(w[keep])
        self.elem.append(e[keep])

    def finish(self):
        if not self.points:
            return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64)
        return (np.concatenate(self.points), np.concatenate(self.weights),
                np.concatenate(self.elem).astype(np.int64))


def _classify(ls, lo, size):
    """Classify cells (lo (C,3), size (3,)) by corner and centre samples."""
    C = len(lo)
    if C == 0:
        return np.zeros(0, dtype=np.int8), np.zeros((0, 8))
    corners = lo[:, None, :] + _CORNERS[None] * size
    centre = lo + 0.5 * size
    pts = np.concatenate([corners.reshape(-1, 3), centre])
    vals = ls(pts)
    cv, mv = vals[:8 * C].reshape(C, 8), vals[8 * C:]
    allv = np.concatenate([cv, mv[:, None]], 1)
    margin = 0.0 if ls.lipschitz is None else ls.lipschitz * 0.5 * np.linalg.norm(size)
    inside = (allv.min(1) > 0) & (mv > margin)
    outside = (allv.max(1) <= 0) & (mv < -margin)
    cls = np.full(C, CUT, dtype=np.int8)
    cls[inside] = INSIDE
    cls[outside] = OUTSIDE
    return cls, cv


def _edge_point(p, n, sp, sn):
    t = sp / (sp - sn)
    return p + t[:, None] * (n - p)


def _clip_tets(V, S):
    """Clip tetrahedra V (T,4,3) with vertex values S (T,4) to the region S > 0.

    Returns sub-tetrahedra (K,4,3) with parent ids, and interface triangles
    (R,3,3) with parent ids.
    """
    pos = S > 0
    npos = pos.sum(1)
    order = np.argsort(~pos, axis=1, kind="stable")
    V = np.take_along_axis(V, order[:, :, None], 1)
    S = np.take_along_axis(S, order, 1)
    tets, tpar, tris, rpar = [], [], [], []
    ids = np.arange(len(V))

    sel = npos == 4
    tets.append(V[sel])
    tpar.append(ids[sel])

    sel = npos == 1
    if sel.any():
        v, s = V[sel], S[sel]
        X = [_edge_point(v[:, 0], v[:, k], s[:, 0], s[:, k]) for k in (1, 2, 3)]
        tets.append(np.stack([v[:, 0], *X], 1))
        tpar.append(ids[sel])
        tris.append(np.stack(X, 1))
        rpar.append(ids[sel])

    sel = npos == 3
    if sel.any():
        v, s = V[sel], S[sel]
        P1, P2, P3, N = v[:, 0], v[:, 1], v[:, 2], v[:, 3]
        X1, X2, X3 = (_edge_point(v[:, k], N, s[:, k], s[:, 3]) for k in range(3))
        for tet in ((P1, P2, P3, X1), (P2, P3, X1, X2), (P3, X1, X2, X3)):
            tets.append(np.stack(tet, 1))
            tpar.append(ids[sel])
        tris.append(np.stack([X1, X2, X3], 1))
        rpar.append(ids[sel])

    sel = npos == 2
    if sel.any():
        v, s = V[sel], S[sel]
        P1, P2, N1, N2 = v[:, 0], v[:, 1], v[:, 2], v[:, 3]
        X11 = _edge_point(P1, N1, s[:, 0], s[:, 2])
        X12 = _edge_point(P1, N2, s[:, 0], s[:, 3])
        X21 = _edge_point(P2, N1, s[:, 1], s[:, 2])
        X22 = _edge_point(P2, N2, s[:, 1], s[:, 3])
        for tet in ((P1, X11, X12, P2), (X11, X12, P2, X21), (X12, P2, X21, X22)):
            tets.append(np.stack(tet, 1))
            tpar.append(ids[sel])
        for tri in ((X11, X12, X22), (X11, X22, X21)):
            tris.append(np.stack(tri, 1))
            rpar.append(ids[sel])

    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
    return (cat(tets, (0, 4, 3)), cat(tpar, (0,)).astype(np.int64),
            cat(tris, (0, 3, 3)), cat(rpar, (0,)).astype(np.int64))


def _clip_triangles(V, S):
    """Clip triangles V (T,3,3) to S > 0; returns sub-triangles and parent ids."""
    pos = S > 0
    npos = pos.sum(1)
    order = np.argsort(~pos, axis=1, kind="stable")
    V = np.take_along_axis(V, order[:, :, None], 1)
    S = np.take_along_axis(S, order, 1)
    ids = np.arange(len(V))
    out, par = [V[npos == 3]], [ids[npos == 3]]
    sel = npos == 1
    if sel.any():
        v, s = V[sel], S[sel]
        X1 = _edge_point(v[:, 0], v[:, 1], s[:, 0], s[:, 1])
        X2 = _edge_point(v[:, 0], v[:, 2], s[:, 0], s[:, 2])
        out.append(np.stack([v[:, 0], X1, X2], 1))
        par.append(ids[sel])
    sel = npos == 2
    if sel.any():
        v, s = V[sel], S[sel]
        X1 = _edge_point(v[:, 0], v[:, 2], s[:, 0], s[:, 2])
        X2 = _edge_point(v[:, 1], v[:, 2], s[:, 1], s[:, 2])
        out += [np.stack([v[:, 0], v[:, 1], X2], 1), np.stack([v[:, 0], X2, X1], 1)]
        par += [ids[sel], ids[sel]]
    return np.concatenate(out), np.concatenate(par).astype(np.int64)


def _tet_rule(T, npts=1):
    """Centroid (npts=1) or degree-2 four-point rule on tetrahedra T (K,4,3)."""
    vol = np.abs(np.linalg.det(T[:, 1:] - T[:, :1])) / 6.0
    if npts == 1:
        return T.mean(1), vol
    bary = np.full((4, 4), _TET_B)
    np.fill_diagonal(bary, _TET_A)
    pts = np.einsum("qv,kvd->kqd", bary, T).reshape(-1, 3)
    return pts, np.repeat(vol / 4.0, 4)


def _tri_area_normal(T):
    cr = np.cross(T[:, 1] - T[:, 0], T[:, 2] - T[:, 0])
    return 0.5 * np.linalg.norm(cr, axis=1)


def _linear_gradient(V, S):
    """Gradient of the linear interpolant of S on tetrahedra V."""
    E = V[:, 1:] - V[:, :1]
    dS = S[:, 1:] - S[:, :1]
    return np.linalg.solve(E, dS[:, :, None])[:, :, 0]


class ImmersedDomain:
    """Omega embedded in a spline box, with bulk and surface quadrature.

    Attributes:
        space: SplineSpace restricted to the active basis.
        full_space: the unrestricted tensor space.
        level_set: LevelSet (callable, positive inside).
        n_q: cut-cell refinement depth.
        classification: per-element OUTSIDE / INSIDE / CUT flags.
        bulk_points, bulk_weights, bulk_elem: bulk rule sorted by element.
        surf_points, surf_weights, surf_normals, surf_elem, surf_kind: surface rule.
    """

    def __init__(self, full_space, level_set, n_q, classification, bulk, surface, min_fraction=0.0):
        self.full_space = full_space
        self.level_set = level_set
        self.n_q = n_q
        self.classification = classification
        self.bulk_points, self.bulk_weights, self.bulk_elem = bulk
        (self.surf_points, self.surf_weights, self.surf_normals,
         self.surf_elem, self.surf_kind) = surface
        self.min_fraction = min_fraction
        self.active_global = active_basis(full_space, self, min_fraction)
        self.space = full_space.restrict(self.active_global)

    def __repr__(self):
        return (f"ImmersedDomain(elements={self.full_space.shape}, n_q={self.n_q}, n_cp={self.space.n_cp}, "
                f"bulk_points={len(self.bulk_weights)}, surface_points={len(self.surf_weights)})")

    @property
    def volume(self):
        return float(self.bulk_weights.sum())

    @property
    def area(self):
        return float(self.surf_weights.sum())

    @property
    def box_volume(self):
        return float(np.prod(self.full_space.upper - self.full_space.lower))

    @cached_property
    def bulk_basis(self):
        return self.space.basis(self.bulk_points, self.bulk_elem)

    @cached_property
    def surface_basis(self):
        return self.space.basis(self.surf_points, self.surf_elem)

    @cached_property
    def _mass(self):
        from .assembly import assemble_matrix
        pb = self.bulk_basis
        return assemble_matrix(pb, pb.val, pb.val, self.bulk_weights)

    def mass_matrix(self):
        """Indicator-weighted Gram matrix M_ij = int N_i N_j dx (cached)."""
        return self._mass

    @cached_property
    def _mass_solver(self):
        from .linalg import FactorizedSolver
        return FactorizedSolver(self.mass_matrix())

    def mass_solver(self):
        """Cached factorization of the Gram matrix."""
        return self._mass_solver

    @cached_property
    def exterior_rule(self):
        """Full-element Gauss rule over the cut elements: (points, weights, element ids, basis).

        It covers the fictitious part of every cut cell and is used to pin the
        coefficients of basis functions that barely touch Omega.
        """
        fs = self.full_space
        # elements flagged by the Lipschitz test but holding no bulk points would bring inactive functions
        cut = np.intersect1d(np.flatnonzero(self.classification == CUT), self.bulk_elem)
        X, W = _gauss_cube(DEGREE + 1)
        pts = (fs.element_lower(cut)[:, None, :] + X[None] * fs.h).reshape(-1, 3)
        w = np.tile(W * np.prod(fs.h), len(cut))
        elem = np.repeat(cut, len(W))
        return pts, w, elem, self.space.basis(pts, elem)

    def projection_solver(self, alpha):
        """Cached factorization of ``M + alpha M_ext`` with M_ext the Gram matrix over cut elements."""
        def build():
            from .assembly import assemble_matrix
            from .linalg import FactorizedSolver
            A = self.mass_matrix()
            pts, w, _, xb = self.exterior_rule
            if alpha > 0 and len(w):
                A = A + alpha * assemble_matrix(xb, xb.val, xb.val, w)
            return FactorizedSolver(A)
        return self.cached(("projection", float(alpha)), build)

    @cached_property
    def _basis_integrals(self):
        from .assembly import assemble_vector
        pb = self.bulk_basis
        return assemble_vector(pb, pb.val, self.bulk_weights)

    def basis_integrals(self):
        """m_i = int_Omega N_i dx; total mass of a field is m @ coef."""
        return self._basis_integrals

    def cached(self, key, build):
        """Return ``build()`` memoized under ``key`` for the lifetime of the domain."""
        store = self.__dict__.setdefault("_cache", {})
        if key not in store:
            store[key] = build()
        return store[key]

    def integrate(self, values):
        """Bulk integral of pointwise values at the bulk quadrature points."""
        return float(np.dot(self.bulk_weights, values))

    def integrate_surface(self, values):
        return float(np.dot(self.surf_weights, values))


def _basis_box_integrals(space):
    """int_V N_i dx over the whole box for every tensor basis function."""
    per_axis = []
    for a in range(3):
        t = space.knots[a]
        i = np.arange(space.n_basis[a])
        per_axis.append((t[i + DEGREE + 1] - t[i]) / (DEGREE + 1))
    return np.einsum("k,j,i->kji", per_axis[2], per_axis[1], per_axis[0]).ravel()


def active_basis(space, domain, min_fraction=0.0):
    """Global indices of basis functions whose support holds a bulk quadrature point.

    With ``min_fraction > 0`` a function is also dropped when the part of its
    integral falling inside Omega is below that fraction of its box integral;
    such functions only see sliver cut cells and make the Gram matrix singular
    to working precision.
    """
    if len(domain.bulk_elem) == 0:
        return np.zeros(0, dtype=np.int64)
    pb = space.basis(domain.bulk_points, domain.bulk_elem)
    inner = np.bincount(pb.glob.ravel(), weights=(pb.val * domain.bulk_weights[:, None]).ravel(),
                        minlength=space.n_total)
    touched = np.zeros(space.n_total, dtype=bool)
    touched[pb.glob.ravel()] = True
    if min_fraction > 0:
        touched &= inner > min_fraction * _basis_box_integrals(space)
    return np.flatnonzero(touched)


def _box_face_rule(space, elem, lo, size, vals=None):
    """Surface rule on the parts of cell faces lying on the box boundary.

    ``vals`` (C,8) corner level-set values switch on clipping for cut cells;
    otherwise the full face carries a 3x3 Gauss rule.
    """
    pts, wts, nrm, els = [], [], [], []
    tol = 1e-9 * (space.upper - space.lower)
    X2, W2 = _gauss_square(3)
    for a in range(3):
        b, c = [k for k in range(3) if k != a]
        for side in (0, 1):
            plane = space.lower[a] if side == 0 else space.upper[a]
            coord = lo[:, a] + side * size[a]
            on = np.abs(coord - plane) <= tol[a]
            if not on.any():
                continue
            n = np.zeros(3)
            n[a] = -1.0 if side == 0 else 1.0
            lo_on, el_on = lo[on], elem[on]
            if vals is None:
                p = np.repeat(lo_on, len(W2), 0)
                p[:, a] = plane
                p[:, b] += np.tile(X2[:, 0], len(lo_on)) * size[b]
                p[:, c] += np.tile(X2[:, 1], len(lo_on)) * size[c]
                pts.append(p)
                wts.append(np.tile(W2, len(lo_on)) * size[b] * size[c])
                els.append(np.repeat(el_on, len(W2)))
                nrm.append(np.tile(n, (len(p), 1)))
                continue
            # face corners in (b, c) order 00, 10, 01, 11, split along the 00-11 diagonal
            ids = [(side << a) | (i << b) | (j << c) for j in (0, 1) for i in (0, 1)]
            cv = vals[on][:, ids]
            cx = lo_on[:, None, :] + _CORNERS[ids][None] * size
            cx[:, :, a] = plane
            tri_v = np.concatenate([cx[:, [0, 1, 3]], cx[:, [0, 2, 3]]])
            tri_s = np.concatenate([cv[:, [0, 1, 3]], cv[:, [0, 2, 3]]])
            tri_e = np.concatenate([el_on, el_on])
            T, par = _clip_triangles(tri_v, tri_s)
            area = _tri_area_normal(T)
            p = np.einsum("qv,kvd->kqd", _TRI_BARY, T).reshape(-1, 3)
            pts.append(p)
            wts.append(np.repeat(area / 3.0, 3))
            els.append(np.repeat(tri_e[par], 3))
            nrm.append(np.tile(n, (len(p), 1)))
    return pts, wts, nrm, els


def build_domain(space, geometry, n_q=2, smooth=True, tet_points=None, min_fraction=0.0):
    """Build the immersed domain for ``geometry`` inside ``space``'s box.

    ``geometry`` is a binary mask VoxelVolume, a LevelSet, or a callable
    returning level-set values (positive inside). Raises ConfigurationError when
    ``n_q`` is outside [0, 8] or Omega is empty. ``tet_points`` (1 or 4)
    selects the rule on clipped tetrahedra (default: 4 for n_q = 0, else 1); ``min_fraction`` drops basis
    functions with a negligible share of their support inside Omega.
    """
    if tet_points is None:
        tet_points = 4 if n_q == 0 else 1
    if tet_points not in (1, 4):
        raise ConfigurationError("tet_points must be 1 or 4")
    if not isinstance(n_q, (int, np.integer)) or n_q < 0:
        raise ConfigurationError(f"n_q must be a non-negative integer, got {n_q!r}")
    if n_q > MAX_DEPTH:
        raise ConfigurationError(f"n_q={n_q} exceeds the refinement guard of {MAX_DEPTH}")
    if isinstance(geometry, VoxelVolume):
        ls = LevelSet.from_mask(geometry, smooth=smooth)
    elif isinstance(geometry, LevelSet):
        ls = geometry
    elif callable(geometry):
        ls = LevelSet.from_function(geometry)
    else:
        raise ConfigurationError(f"unsupported geometry type {type(geometry).__name__}")
    full = SplineSpace(space.lower, space.upper, space.shape)

    eids = np.arange(full.n_elements)
    lo = full.element_lower(eids)
    cls, _ = _classify(ls, lo, full.h)

    bulk = _Rule([], [], [])
    surf_p, surf_w, surf_n, surf_e, surf_k = [], [], [], [], []

    def add_surface(parts, kind):
        p, w, n, e = parts
        for pi, wi, ni, ei in zip(p, w, n, e):
            keep = wi > 0
            surf_p.append(pi[keep])
            surf_w.append(wi[keep])
            surf_n.append(ni[keep])
            surf_e.append(ei[keep])
            surf_k.append(np.full(keep.sum(), kind, dtype=np.int8))

    def add_gauss(elem, lo_c, size, n):
        if len(elem) == 0:
            return
        X, W = _gauss_cube(n)
        p = (lo_c[:, None, :] + X[None] * size).reshape(-1, 3)
        bulk.add(p, np.tile(W * np.prod(size), len(elem)), np.repeat(elem, len(W)))
        add_surface(_box_face_rule(full, elem, lo_c, size), SURFACE_BOX)

    ins = cls == INSIDE
    add_gauss(eids[ins], lo[ins], full.h, 3)

    cut = cls == CUT
    c_elem, c_lo, size = eids[cut], lo[cut], full.h.copy()
    for _ in range(n_q):
        size = size / 2
        c_lo = (c_lo[:, None, :] + _CORNERS[None] * size).reshape(-1, 3)
        c_elem = np.repeat(c_elem, 8)
        sub, _ = _classify(ls, c_lo, size)
        add_gauss(c_elem[sub == INSIDE], c_lo[sub == INSIDE], size, 2)
        keep = sub == CUT
        c_elem, c_lo = c_elem[keep], c_lo[keep]

    # leaf cells: clip Kuhn tetrahedra against the linear interpolant
    if len(c_elem):
        corners = c_lo[:, None, :] + _CORNERS[None] * size
        cv = ls(corners.reshape(-1, 3)).reshape(-1, 8)
        full_in = np.all(cv > 0, axis=1)
        add_gauss(c_elem[full_in], c_lo[full_in], size, 2)
        part = ~full_in & np.any(cv > 0, axis=1)
        c_elem, c_lo, corners, cv = c_elem[part], c_lo[part], corners[part], cv[part]
        V = corners[:, _KUHN].reshape(-1, 4, 3)
        S = cv[:, _KUHN].reshape(-1, 4)
        tet_elem = np.repeat(c_elem, len(_KUHN))
        T, tpar, R, rpar = _clip_tets(V, S)
        p, w = _tet_rule(T, tet_points)
        bulk.add(p, w, np.repeat(tet_elem[tpar], tet_points))
        grad = _linear_gradient(V, S)
        area = _tri_area_normal(R)
        g = grad[rpar]
        n = -g / np.linalg.norm(g, axis=1, keepdims=True)
        add_surface(([R.mean(1)], [area], [n], [tet_elem[rpar]]), SURFACE_INTERFACE)
        add_surface(_box_face_rule(full, c_elem, c_lo, size, cv), SURFACE_BOX)

    bp, bw, be = bulk.finish()
    if bw.size == 0 or bw.sum() <= 0:
        raise ConfigurationError("the immersed domain is empty: no quadrature point lies inside Omega")
    order = np.argsort(be, kind="stable")
    bulk_rule = (bp[order], bw[order], be[order])
    if surf_w:
        sp_, sw, sn, se, sk = (np.concatenate(x) for x in (surf_p, surf_w, surf_n, surf_e, surf_k))
    else:
        sp_, sw, sn, se, sk = np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, np.int8)
    order = np.argsort(se, kind="stable")
    surf_rule = (sp_[order], sw[order], sn[order], se[order].astype(np.int64), sk[order])
    dom = ImmersedDomain(full, ls, int(n_q), cls, bulk_rule, surf_rule, min_fraction)
    log.info("built %r", dom)
    return dom
