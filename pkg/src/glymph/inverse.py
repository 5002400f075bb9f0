"""Gauss-Newton recovery of D, u_bar and gamma from concentration time series.

The unknown vector stacks ``[D (n); u_bar component-major (3n); gamma (n)]``
for ``n = n_cp``. Sensitivities ``X_n = d alpha^n / d Theta`` follow from
differentiating the backward-Euler system with the stabilization pair frozen:

    L X_{n+1} = (M + Ms) X_n - dt [dK | dA_bar + dA' | dH] alpha^{n+1}

The HW potential is re-solved for every velocity, and by default its
derivative with respect to u_bar is propagated through the Poisson solve
(``sensitivity="exact"``). ``sensitivity="rewrite"`` instead uses the
divergence form ``int N_i div(N_m e_k) c`` for the A' block.
"""

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import assemble_matrix
from .divfree import poisson_system, solve_correction
from .errors import ConfigurationError, NumericalError
from .forward import D_FLOOR, ForwardProblem, TransportCoefficients, assemble_operators, relative_error
from .forward import stabilization_operators
from .linalg import diagonal_scaling
from .spline_space import Field, VectorField

log = logging.getLogger(__name__)

OBJECTIVES = ("final_step", "sum_over_steps")


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Stacked unknowns ``[D; u_bar_vec; gamma]`` of length ``5 n_cp``."""

    values: np.ndarray
    n_cp: int

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != 5 * self.n_cp:
            raise ConfigurationError(f"parameter vector has length {v.size}, expected 5*n_cp={5 * self.n_cp}")
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("parameter vector must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def size(self):
        return self.values.size

    @property
    def slice_D(self):
        return slice(0, self.n_cp)

    @property
    def slice_u(self):
        return slice(self.n_cp, 4 * self.n_cp)

    @property
    def slice_gamma(self):
        return slice(4 * self.n_cp, 5 * self.n_cp)

    @property
    def D(self):
        return self.values[self.slice_D]

    @property
    def u(self):
        return self.values[self.slice_u]

    @property
    def gamma(self):
        return self.values[self.slice_gamma]

    def block(self, name):
        return self.values[{"D": self.slice_D, "u": self.slice_u, "gamma": self.slice_gamma}[name]]

    @classmethod
    def from_coeffs(cls, coeffs):
        n = coeffs.space.n_cp
        return cls(np.concatenate([coeffs.D.coef, coeffs.u_bar.coef, coeffs.gamma.coef]), n)

    @classmethod
    def from_blocks(cls, D, u, gamma):
        D, u, gamma = (np.asarray(x, dtype=float).ravel() for x in (D, u, gamma))
        return cls(np.concatenate([D, u, gamma]), D.size)

    def to_coeffs(self, space):
        if space.n_cp != self.n_cp:
            raise ConfigurationError("parameter vector does not match the spline space")
        return TransportCoefficients(Field(space, self.D), VectorField(space, self.u), Field(space, self.gamma))

    def scaled(self, D=1.0, u=1.0, gamma=1.0):
        return ParameterVector.from_blocks(self.D * D, self.u * u, self.gamma * gamma)

    def __add__(self, delta):
        return ParameterVector(self.values + np.asarray(delta), self.n_cp)


@dataclass(eq=False)
class CalibrationWindow:
    """Observed concentration Fields at uniformly spaced times."""

    fields: list
    times: list
    objective: str = "final_step"

    def __post_init__(self):
        if len(self.fields) < 2 or len(self.fields) != len(self.times):
            raise ConfigurationError("a calibration window needs at least two snapshots with matching times")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        steps = np.diff(np.asarray(self.times, dtype=float))
        if not steps[0] > 0 or np.any(np.abs(steps - steps[0]) > 1e-9 * max(1.0, steps[0])):
            raise ConfigurationError(f"window times are not uniformly spaced: {list(self.times)}")

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    @property
    def k(self):
        return len(self.fields) - 1

    @property
    def data(self):
        return [f.coef for f in self.fields]


@dataclass
class InverseOptions:
    """Iteration controls for :func:`run_inversion`."""

    max_iter: int = 50
    damping: bool = True
    lam0: float = 1e-6
    lam_min: float = 1e-12
    lam_max: float = 1e12
    max_rejections: int = 40
    plateau_eps: float = 1e-3
    plateau_p: int = 3
    plateau_abs: float = 1e-16
    sensitivity: str = "exact"
    surface_penalty: float = 0.0
    damping_matrix: str = "levenberg"
    free: np.ndarray = None
    d_floor: float = D_FLOOR
    callback: object = None

    def __post_init__(self):
        if self.sensitivity not in ("exact", "rewrite"):
            raise ConfigurationError(f"sensitivity must be 'exact' or 'rewrite', got {self.sensitivity!r}")
        for name in ("plateau_eps", "lam_min", "lam_max"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.damping_matrix not in ("levenberg", "marquardt"):
            raise ConfigurationError("damping_matrix must be 'levenberg' or 'marquardt'")
        if self.plateau_p < 1 or self.max_iter < 0:
            raise ConfigurationError("plateau_p must be >= 1 and max_iter >= 0")


@dataclass(eq=False)
class InverseState:
    """Iteration counter, current iterate, residual history and damping."""

    iteration: int
    theta: ParameterVector
    stab_theta: ParameterVector
    J: float
    history: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    lam: float = 1e-6
    converged: bool = False
    reason: str = ""
    clamp_counts: list = field(default_factory=list)
    rhs_norms: list = field(default_factory=list)
    thetas: list = field(default_factory=list)


class InverseProblem:
    """Forward map, sensitivities and Gauss-Newton machinery for one window.

    Args:
        domain: ImmersedDomain on which data and parameters live.
        window: CalibrationWindow of observed Fields.
        formulation: forward formulation, "hw" by default.
        sensitivity: "exact" or "rewrite" treatment of the A' block.
        surface_penalty: beta of the optional ``beta int_Gamma |u_bar|^2`` term.
    """

    def __init__(self, domain, window, formulation="hw", sensitivity="exact", surface_penalty=0.0,
                 d_floor=D_FLOOR):
        if not all(domain.space.compatible(f.space) for f in window.fields):
            raise ConfigurationError("window fields are not on the domain's space")
        self.domain = domain
        self.window = window
        self.formulation = formulation
        self.sensitivity = sensitivity
        self.beta = float(surface_penalty)
        self.d_floor = d_floor
        self.n = domain.space.n_cp
        self.M = domain.mass_matrix().tocsr()
        self._stab_cache = (None, None)

    # -- forward map --------------------------------------------------------------------

    def coeffs(self, theta):
        c = theta.to_coeffs(self.domain.space)
        if self.formulation == "hw":
            c = c.with_phi(solve_correction(self.domain, c.u_bar))
        return c

    def stabilization(self, stab_theta):
        """Frozen (Ms, S) for ``stab_theta``; cached for the most recent iterate."""
        key, ops = self._stab_cache
        if key is not None and key is stab_theta:
            return ops
        ops = stabilization_operators(self.domain, self.coeffs(stab_theta), self.window.dt, self.formulation,
                                      self.d_floor)
        self._stab_cache = (stab_theta, ops)
        return ops

    def forward_problem(self, theta, stab_theta=None):
        stab_theta = theta if stab_theta is None else stab_theta
        return ForwardProblem(self.domain, self.coeffs(theta), self.window.dt, self.formulation,
                              d_floor=self.d_floor, stab_ops=self.stabilization(stab_theta))

    def simulate(self, theta, stab_theta=None, steps=None):
        """Coefficient vectors alpha^0..alpha^k started from the first observation."""
        prob = self.forward_problem(theta, stab_theta)
        a = [np.asarray(self.window.fields[0].coef, dtype=float)]
        for n in range(steps or self.window.k):
            a.append(prob.step_coef(a[-1], step=n + 1))
        return a

    def residuals(self, alphas):
        data = self.window.data
        if self.window.objective == "final_step":
            return [(self.window.k, alphas[-1] - data[-1])]
        return [(n, alphas[n] - data[n]) for n in range(1, self.window.k + 1)]

    def objective(self, theta, stab_theta=None):
        """``1/2 int (c_k - c_hat_k)^2`` or its sum over the window's steps."""
        alphas = self.simulate(theta, stab_theta)
        J = sum(0.5 * float(e @ (self.M @ e)) for _, e in self.residuals(alphas))
        if self.beta > 0:
            J += 0.5 * self.beta * float(theta.u @ (self._surface_gram() @ theta.u))
        if not np.isfinite(J):
            raise NumericalError("objective is not finite")
        return J

    def _surface_gram(self):
        def build():
            sb = self.domain.surface_basis
            G = assemble_matrix(sb, sb.val, sb.val, self.domain.surf_weights)
            return sp.block_diag([G, G, G], format="csr")
        return self.domain.cached("surface_gram", build)

    # -- sensitivities ------------------------------------------------------------------

    def potential_map(self):
        """Dense ``d phi / d u_bar_vec`` (n x 3n); depends only on the domain."""
        def build():
            pb = self.domain.bulk_basis
            w = self.domain.bulk_weights
            F = sp.hstack([assemble_matrix(pb, pb.val, pb.grad[:, :, k], w) for k in range(3)]).toarray()
            return poisson_system(self.domain).solve(F)
        return self.domain.cached("potential_map", build)

    def operator_derivatives(self, a, theta):
        """Sparse blocks and the dense A' block of ``d(K + A_bar + A' + H)/d Theta . a``."""
        pb = self.domain.bulk_basis
        w = self.domain.bulk_weights
        gc = pb.gradients(a)
        Dq = pb.values(theta.D)
        active = (Dq >= self.d_floor).astype(float)
        kD = assemble_matrix(pb, np.einsum("qak,qk->qa", pb.grad, gc), pb.val, w * active)
        ku = [assemble_matrix(pb, pb.val, pb.val, w * gc[:, k]) for k in range(3)]
        sb = self.domain.surface_basis
        hg = assemble_matrix(sb, sb.val, sb.val, self.domain.surf_weights * sb.values(a))
        dense_u = None
        if self.formulation == "hw":
            if self.sensitivity == "exact":
                Ac = assemble_matrix(pb, pb.val, np.einsum("qak,qk->qa", pb.grad, gc), w)
                dense_u = Ac
            else:
                cq = pb.values(a)
                ku = [ku[k] + assemble_matrix(pb, pb.val, pb.grad[:, :, k], w * cq) for k in range(3)]
        return sp.hstack([kD] + ku + [hg]).tocsr(), dense_u

    def sensitivity_rhs(self, a, theta):
        """Dense ``d(K + A_bar + A' + H)/d Theta . a`` of shape (n, 5n)."""
        R, Ac = self.operator_derivatives(a, theta)
        R = R.toarray()
        if Ac is not None:
            R[:, self.n:4 * self.n] += Ac @ self.potential_map()
        return R

    def _dense_inverse(self, L):
        s = diagonal_scaling(L)
        Ls = (sp.diags(s) @ L @ sp.diags(s)).toarray()
        try:
            inv = sla.inv(Ls, check_finite=True)
        except (sla.LinAlgError, ValueError) as exc:
            raise NumericalError(f"system matrix inversion failed: {exc}") from exc
        return s[:, None] * inv * s[None, :]

    def propagate(self, theta, stab_theta=None, keep_all=False):
        """Run the forward model and sensitivities; yields (n, alpha^n, X_n) for n = 1..k."""
        stab_theta = theta if stab_theta is None else stab_theta
        prob = self.forward_problem(theta, stab_theta)
        Linv = self._dense_inverse(prob.ops.L.tocsr())
        P = Linv @ prob.B.toarray()
        dt = self.window.dt
        a = np.asarray(self.window.fields[0].coef, dtype=float)
        X = np.zeros((self.n, 5 * self.n))
        for n in range(1, self.window.k + 1):
            a = prob.step_coef(a, step=n)
            R, Ac = self.operator_derivatives(a, theta)
            X = P @ X if n > 1 else X
            X -= dt * (R.T @ Linv.T).T
            if Ac is not None:
                X[:, self.n:4 * self.n] -= dt * ((Ac.T @ Linv.T).T @ self.potential_map())
            yield n, a, X

    def gradient(self, theta, stab_theta=None):
        """``dJ/dTheta`` from the sensitivities."""
        g = np.zeros(5 * self.n)
        wanted = {n for n, _ in self._targets()}
        for n, a, X in self.propagate(theta, stab_theta):
            if n in wanted:
                g += X.T @ (self.M @ (a - self.window.data[n]))
        if self.beta > 0:
            g[self.n:4 * self.n] += self.beta * (self._surface_gram() @ theta.u)
        return g

    def _targets(self):
        k = self.window.k
        if self.window.objective == "final_step":
            return [(k, None)]
        return [(n, None) for n in range(1, k + 1)]

    # -- Gauss-Newton -------------------------------------------------------------------

    def linear_system(self, theta, stab_theta, free):
        """Collect sensitivity rows; returns (rows, residuals, J) for the normal equations."""
        wanted = {n for n, _ in self._targets()}
        Xs, es = [], []
        J = 0.0
        for n, a, X in self.propagate(theta, stab_theta):
            if n in wanted:
                e = a - self.window.data[n]
                Xs.append(X[:, free].copy())
                es.append(e)
                J += 0.5 * float(e @ (self.M @ e))
        if self.beta > 0:
            J += 0.5 * self.beta * float(theta.u @ (self._surface_gram() @ theta.u))
        return Xs, es, J

    def solve_normal(self, Xs, es, lam, theta, free, damping="levenberg"):
        """Solve ``(G + lam Dm) dTheta = -g`` restricted to the free parameters.

        ``G = sum X^T M X`` and ``g = sum X^T M e``. ``Dm`` is ``tr(G)/n_free * I``
        for Levenberg damping or ``diag(G)`` (floored) for Marquardt damping.
        The Gram matrix is applied directly rather than through a square root:
        sliver functions make it nearly singular, and a computed root is
        inaccurate exactly where sensitivities and residuals are largest.
        When the stacked data rows are fewer than the free unknowns the step is
        ``-Dm^-1 X^T (M X Dm^-1 X^T + lam I)^-1 M e`` instead of the explicit
        solve.
        """
        Ps = [np.asarray(self.M @ X) for X in Xs]
        ms = [self.M @ e for e in es]
        g = sum(X.T @ m for X, m in zip(Xs, ms))
        diag = sum(np.einsum("ij,ij->j", X, P) for X, P in zip(Xs, Ps))
        Gpen = None
        if self.beta > 0:
            idx = np.flatnonzero(free)
            full_pen = sp.block_diag([sp.csr_matrix((self.n, self.n)), self.beta * self._surface_gram(),
                                      sp.csr_matrix((self.n, self.n))], format="csr")
            Gpen = full_pen[idx][:, idx]
            g = g + Gpen @ theta.values[free]
            diag = diag + Gpen.diagonal()
        nf = diag.size
        if damping == "marquardt":
            d = np.maximum(diag, 1e-12 * max(float(diag.max()), 1e-300))
        else:
            d = np.full(nf, max(float(diag.sum()) / nf, 1e-300))
        rows = sum(X.shape[0] for X in Xs)
        if Gpen is None and rows < nf and lam > 0:
            XD = np.vstack(Xs) / d[None, :]
            A = np.vstack(Ps) @ XD.T
            A[np.diag_indices_from(A)] += lam
            # sliver rows of X make some columns huge; equilibrating them keeps the LU well scaled
            s = np.abs(A).max(axis=0)
            # the remaining grading can still trip LAPACK's rcond warning; every step is checked on J anyway
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                z = sla.solve(A / s[None, :], -np.concatenate(ms)) / s
            return XD.T @ z, g
        G = sum(X.T @ P for X, P in zip(Xs, Ps))
        G = 0.5 * (G + G.T)
        if Gpen is not None:
            G = G + Gpen.toarray()
        G[np.diag_indices_from(G)] += lam * d
        try:
            return sla.cho_solve(sla.cho_factor(G), -g), g
        except sla.LinAlgError:
            return sla.lstsq(G, -g)[0], g

    def clamp(self, values):
        v = np.array(values, dtype=float)
        n = self.n
        lowD = v[:n] < self.d_floor
        lowg = v[4 * n:] < 0
        v[:n][lowD] = self.d_floor
        v[4 * n:][lowg] = 0.0
        return ParameterVector(v, n), int(lowD.sum()), int(lowg.sum())


def gauss_newton_step(problem, state, options):
    """One damped Gauss-Newton iteration; returns the updated state.

    The linearization freezes the stabilization pair at the current iterate.
    Trials are accepted on the consistent objective ``J(Theta; S(Theta))``.
    Coefficients sitting on their bound (D at the floor, gamma at zero) whose
    gradient points out of the feasible set are held fixed for the iteration.
    """
    free = _free_mask(options, problem.n)
    Xs, es, J0 = problem.linear_system(state.theta, state.theta, free)
    free, Xs = _release_bounds(problem, state.theta, free, Xs, es)
    lam = state.lam if options.damping else 0.0
    rejections = 0
    while True:
        try:
            delta, g = problem.solve_normal(Xs, es, max(lam, 0.0), state.theta, free, options.damping_matrix)
        except (sla.LinAlgError, ValueError):
            if not options.damping:
                log.warning("singular normal system at lambda=0; raising damping")
            lam = max(2 * lam, options.lam0)
            rejections += 1
            if rejections > options.max_rejections:
                raise NumericalError("normal system stays singular after damping increases")
            continue
        step = np.zeros(5 * problem.n)
        step[free] = delta
        trial, nD, ng = problem.clamp(state.theta.values + step)
        try:
            J1 = problem.objective(trial)
        except NumericalError:
            J1 = np.inf
        if not options.damping or J1 <= state.J:
            break
        rejections += 1
        log.debug("rejected step: J %.6e -> %.6e at lambda %.3e", state.J, J1, lam)
        if rejections > options.max_rejections or lam >= options.lam_max:
            state.converged = True
            state.reason = "no descent direction found"
            state.rhs_norms.append(float(np.linalg.norm(g)))
            return state
        lam = min(max(2 * lam, options.lam_min), options.lam_max)
    if not np.isfinite(J1):
        state.converged = True
        state.reason = "non-finite objective"
        return state
    state.rhs_norms.append(float(np.linalg.norm(g)))
    state.stab_theta = trial
    state.theta = trial
    state.J = J1
    state.iteration += 1
    state.history.append(J1)
    state.lambdas.append(lam)
    state.clamp_counts.append((nD, ng))
    state.thetas.append(trial)
    if nD or ng:
        log.info("iteration %d: clamped %d D and %d gamma coefficients", state.iteration, nD, ng)
    if options.damping:
        state.lam = max(lam / 2, options.lam_min)
    log.info("iteration %d: J=%.6e lambda=%.3e", state.iteration, J1, lam)
    return state


def _release_bounds(problem, theta, free, Xs, es):
    """Drop bound-active coefficients whose gradient pushes them further out."""
    n = problem.n
    g = np.zeros(5 * n)
    g[free] = sum(X.T @ (problem.M @ e) for X, e in zip(Xs, es))
    at_bound = np.zeros(5 * n, dtype=bool)
    at_bound[:n] = (theta.D <= problem.d_floor) & (g[:n] > 0)
    at_bound[4 * n:] = (theta.gamma <= 0) & (g[4 * n:] > 0)
    keep = free & ~at_bound
    if keep.sum() == free.sum():
        return free, Xs
    cols = keep[free]
    return keep, [X[:, cols] for X in Xs]


def _free_mask(options, n):
    if options.free is None:
        return np.ones(5 * n, dtype=bool)
    free = np.asarray(options.free, dtype=bool)
    if free.size != 5 * n:
        raise ConfigurationError("free mask must have length 5*n_cp")
    return free


@dataclass(eq=False)
class InverseResult:
    theta: ParameterVector
    history: list
    lambdas: list
    iterations: int
    converged: bool
    reason: str
    rhs_norms: list
    clamp_counts: list
    elapsed_s: float
    thetas: list


def run_inversion(theta0, problem, options=None):
    """Iterate damped Gauss-Newton steps until the objective plateaus.

    The plateau test is ``|J_l - J_{l-1}| <= eps * J_l + abs_floor`` for
    ``plateau_p`` consecutive iterations, where ``abs_floor`` is
    ``plateau_abs`` times the data scale ``1/2 int c_hat_k^2``.
    """
    options = options or InverseOptions()
    t0 = time.perf_counter()
    theta0, _, _ = problem.clamp(theta0.values)
    J = problem.objective(theta0)
    state = InverseState(0, theta0, theta0, J, [J], [], options.lam0, thetas=[theta0])
    scale = 0.5 * float(problem.window.data[-1] @ (problem.M @ problem.window.data[-1]))
    abs_floor = options.plateau_abs * scale
    flat = 0
    while state.iteration < options.max_iter:
        last = state.iteration
        try:
            state = gauss_newton_step(problem, state, options)
        except NumericalError as exc:
            state.reason = f"aborted: {exc}"
            log.warning("inversion aborted at iteration %d: %s", state.iteration, exc)
            break
        if options.callback is not None:
            options.callback(state)
        if state.converged or state.iteration == last:
            break
        dJ = abs(state.history[-2] - state.history[-1])
        flat = flat + 1 if dJ <= options.plateau_eps * state.history[-1] + abs_floor else 0
        if flat >= options.plateau_p:
            state.converged = True
            state.reason = "plateau"
            break
    else:
        state.reason = state.reason or "max_iter"
    return InverseResult(state.theta, state.history, state.lambdas, state.iteration, state.converged,
                         state.reason, state.rhs_norms, state.clamp_counts, time.perf_counter() - t0,
                         state.thetas)


def validation_errors(domain, theta, fields, dt, formulation="hw", d_floor=D_FLOOR):
    """Relative errors between the model run from ``fields[0]`` and every later field."""
    coeffs = theta.to_coeffs(domain.space)
    prob = ForwardProblem(domain, coeffs, dt, formulation, d_floor=d_floor)
    a = fields[0].coef
    errs = []
    for n in range(1, len(fields)):
        a = prob.step_coef(a, step=n)
        errs.append(relative_error(Field(domain.space, a), fields[n], domain))
    return errs


def field_distance(domain, a, b):
    """Relative L2 distance ``||a - b|| / ||b||`` over Omega for Fields or coefficient blocks."""
    M = domain.mass_matrix()
    a = np.asarray(getattr(a, "coef", a)).reshape(-1, M.shape[0])
    b = np.asarray(getattr(b, "coef", b)).reshape(-1, M.shape[0])
    num = sum(float(x @ (M @ x)) for x in a - b)
    den = sum(float(x @ (M @ x)) for x in b)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))
