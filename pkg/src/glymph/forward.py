"""Backward-Euler SUPG advection-diffusion on an immersed spline domain.

Three formulations share one assembly path:

``conservative``  advection ``int N_i div(u_bar N_j)``
``advective``     advection ``int N_i u_bar . grad N_j``
``hw``            advective form with the fine-scale velocity ``u' = grad phi``
                  and its own stabilization term

Each step solves ``L a^{n+1} = (M + Ms) a^n`` with
``L = M + dt (K + A_bar + A' + H) + S``.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .assembly import assemble_matrix
from .errors import ConfigurationError, DomainError, NumericalError
from .linalg import FactorizedSolver
from .spline_space import Field, VectorField

log = logging.getLogger(__name__)

FORMULATIONS = ("conservative", "advective", "hw")
D_FLOOR = 1e-8
PE_LIMIT = 1e-12
# sigma is capped at SIGMA_DT_CAP * dt in the time-dependent stabilization
SIGMA_DT_CAP = 0.5


def supg_sigma(h, speed, D):
    """Streamline stabilization parameter ``h/(2|u|) min(Pe/3, 1)`` with ``Pe = |u| h / (2D)``.

    Where Pe < 1e-12 the diffusive limit ``h^2 / (12 D)`` is used, so zero
    speed yields a finite value.
    """
    h, speed, D = np.broadcast_arrays(np.asarray(h, float), np.asarray(speed, float), np.asarray(D, float))
    pe = speed * h / (2.0 * D)
    out = np.empty(pe.shape)
    small = pe < PE_LIMIT
    out[small] = h[small] ** 2 / (12.0 * D[small])
    big = ~small
    out[big] = h[big] / (2.0 * speed[big]) * np.minimum(pe[big] / 3.0, 1.0)
    return out if out.ndim else float(out)


def peclet(h, speed, D):
    return np.asarray(speed) * h / (2.0 * np.asarray(D))


@dataclass(frozen=True, eq=False)
class TransportCoefficients:
    """D (mm^2/min), u_bar (mm/min), gamma (mm/min) and optional phi with u' = grad phi."""

    D: Field
    u_bar: VectorField
    gamma: Field
    phi: Field = None

    def __post_init__(self):
        space = self.D.space
        parts = [self.u_bar, self.gamma] + ([self.phi] if self.phi is not None else [])
        if not all(space.compatible(p.space) for p in parts):
            raise ConfigurationError("transport coefficients live on different spline spaces")

    @property
    def space(self):
        return self.D.space

    def with_phi(self, phi):
        return TransportCoefficients(self.D, self.u_bar, self.gamma, phi)


@dataclass(eq=False)
class PointCoefficients:
    """Coefficient values at bulk quadrature points."""

    D: np.ndarray
    gradD: np.ndarray
    u_bar: np.ndarray
    div_u_bar: np.ndarray
    u_prime: np.ndarray
    clamped: np.ndarray


def point_coefficients(domain, coeffs, d_floor=D_FLOOR):
    pb = domain.bulk_basis
    D = pb.values(coeffs.D.coef)
    clamped = D < d_floor
    gradD = np.where(clamped[:, None], 0.0, pb.gradients(coeffs.D.coef))
    comps = coeffs.u_bar.components
    grads = [pb.gradients(comps[k]) for k in range(3)]
    u = np.stack([pb.values(comps[k]) for k in range(3)], 1)
    div = grads[0][:, 0] + grads[1][:, 1] + grads[2][:, 2]
    up = np.zeros_like(u) if coeffs.phi is None else pb.gradients(coeffs.phi.coef)
    return PointCoefficients(np.maximum(D, d_floor), gradD, u, div, up, clamped)


@dataclass(eq=False)
class Operators:
    """Assembled sparse operators of one forward problem."""

    M: object
    K: object
    A_bar: object
    A_prime: object
    H: object
    Ms: object
    S: object
    dt: float
    formulation: str
    n_clamped: int = 0

    @property
    def L(self):
        return self.M + self.dt * (self.K + self.A_bar + self.A_prime + self.H) + self.S

    @property
    def B(self):
        return self.M + self.Ms


def _capped(sigma, dt, dt_cap):
    return sigma if dt_cap is None else np.minimum(sigma, dt_cap * dt)


def stabilization_operators(domain, coeffs, dt, formulation, d_floor=D_FLOOR, pc=None, dt_cap=SIGMA_DT_CAP):
    """Ms and S for the given coefficients (the pair frozen during inversion).

    ``sigma`` is limited to ``dt_cap * dt`` (None disables the cap). Without it
    the streamline term on basis functions that barely touch a cut domain can
    make the backward-Euler map amplify.
    """
    pb = domain.bulk_basis
    w = domain.bulk_weights
    pc = pc or point_coefficients(domain, coeffs, d_floor)
    h = domain.space.h_char
    U = np.einsum("qak,qk->qa", pb.grad, pc.u_bar)
    sigma = _capped(supg_sigma(h, np.linalg.norm(pc.u_bar, axis=1), pc.D), dt, dt_cap)
    test = sigma[:, None] * U
    Ms = assemble_matrix(pb, test, pb.val, w)
    resid = U - (np.einsum("qak,qk->qa", pb.grad, pc.gradD) + pc.D[:, None] * pb.lap)
    if formulation == "conservative":
        resid = resid + pc.div_u_bar[:, None] * pb.val
    S = Ms + dt * assemble_matrix(pb, test, resid, w)
    if formulation == "hw" and np.any(pc.u_prime):
        Up = np.einsum("qak,qk->qa", pb.grad, pc.u_prime)
        sigma_p = _capped(supg_sigma(h, np.linalg.norm(pc.u_prime, axis=1), pc.D), dt, dt_cap)
        S = S + dt * assemble_matrix(pb, sigma_p[:, None] * Up, Up, w)
    return Ms, S


def assemble_operators(domain, coeffs, dt, formulation="hw", stab_coeffs=None, d_floor=D_FLOOR,
                       stab_ops=None):
    """Assemble M, K, A_bar, A', H, Ms and S.

    ``stab_coeffs`` (defaults to ``coeffs``) supplies the coefficients used in
    the stabilization pair Ms, S; the inverse solver passes the previous
    iterate here. A precomputed pair may be passed as ``stab_ops``.
    """
    if formulation not in FORMULATIONS:
        raise ConfigurationError(f"formulation must be one of {FORMULATIONS}, got {formulation!r}")
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if not domain.space.compatible(coeffs.space):
        raise ConfigurationError("coefficients and domain use different spline spaces")
    if formulation == "hw" and coeffs.phi is None:
        from .divfree import solve_correction
        coeffs = coeffs.with_phi(solve_correction(domain, coeffs.u_bar))
    if formulation != "hw" and coeffs.phi is not None:
        coeffs = coeffs.with_phi(None)
    pb = domain.bulk_basis
    w = domain.bulk_weights
    pc = point_coefficients(domain, coeffs, d_floor)
    n_clamped = int(pc.clamped.sum())
    if n_clamped:
        log.info("D clamped at %d of %d quadrature points", n_clamped, len(w))

    M = domain.mass_matrix()
    K = assemble_matrix(pb, pb.grad, pb.grad, w * pc.D)
    U = np.einsum("qak,qk->qa", pb.grad, pc.u_bar)
    A_bar = assemble_matrix(pb, pb.val, U, w)
    if formulation == "conservative":
        A_bar = A_bar + assemble_matrix(pb, pb.val, pb.val, w * pc.div_u_bar)
    if formulation == "hw":
        Up = np.einsum("qak,qk->qa", pb.grad, pc.u_prime)
        A_prime = assemble_matrix(pb, pb.val, Up, w)
    else:
        A_prime = 0 * M
    sb = domain.surface_basis
    gamma = sb.values(coeffs.gamma.coef)
    H = assemble_matrix(sb, sb.val, sb.val, domain.surf_weights * gamma)

    if stab_ops is not None:
        Ms, S = stab_ops
    elif stab_coeffs is None:
        Ms, S = stabilization_operators(domain, coeffs, dt, formulation, d_floor, pc)
    else:
        if formulation == "hw" and stab_coeffs.phi is None:
            from .divfree import solve_correction
            stab_coeffs = stab_coeffs.with_phi(solve_correction(domain, stab_coeffs.u_bar))
        Ms, S = stabilization_operators(domain, stab_coeffs, dt, formulation, d_floor)
    return Operators(M, K, A_bar, A_prime, H, Ms, S, float(dt), formulation, n_clamped)


@dataclass(frozen=True)
class StepDiagnostics:
    t: float
    total_mass: float
    efflux: float
    delta_mass: float
    k_eff: float
    min_c: float
    max_c: float


DIAG_COLUMNS = ("t_min", "total_mass", "efflux", "delta_mass", "k_eff", "min_c", "max_c")


@dataclass(eq=False)
class Trajectory:
    """Concentration fields at uniformly spaced times plus per-step diagnostics."""

    times: list = field(default_factory=list)
    fields: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def __len__(self):
        return len(self.fields)

    def column(self, name):
        return np.array([getattr(d, name) for d in self.diagnostics])

    def to_csv(self, path, reference=None, domain=None, include_initial=True):
        """Write one row per stored state; ``reference`` (list of Fields) adds a rel_error column.

        With ``include_initial=False`` only the states produced by time steps are written.
        """
        cols = ["step"] + list(DIAG_COLUMNS)
        if reference is not None:
            cols.append("rel_error")
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for n, d in enumerate(self.diagnostics):
                if n == 0 and not include_initial:
                    continue
                row = [n, d.t, d.total_mass, d.efflux, d.delta_mass, d.k_eff, d.min_c, d.max_c]
                if reference is not None:
                    row.append(relative_error(self.fields[n], reference[n], domain))
                wr.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return path


class ForwardProblem:
    """Assembled forward problem; immutable after construction.

    Args:
        domain: ImmersedDomain providing space and quadrature.
        coeffs: TransportCoefficients on ``domain.space``.
        dt: time step in minutes.
        formulation: "conservative", "advective" or "hw".
        stab_coeffs: optional coefficients for the frozen stabilization pair.
        rtol: relative residual required of each linear solve.
    """

    def __init__(self, domain, coeffs, dt, formulation="hw", stab_coeffs=None, rtol=1e-10,
                 d_floor=D_FLOOR, stab_ops=None):
        self.domain = domain
        self.dt = float(dt)
        self.formulation = formulation
        if formulation == "hw" and coeffs.phi is None:
            from .divfree import solve_correction
            coeffs = coeffs.with_phi(solve_correction(domain, coeffs.u_bar))
        self.ops = assemble_operators(domain, coeffs, dt, formulation, stab_coeffs, d_floor, stab_ops)
        self.coeffs = coeffs
        self.rtol = rtol
        self.solver = FactorizedSolver(self.ops.L, rtol=rtol)
        self.B = self.ops.B.tocsr()
        self._efflux_vec = self.ops.H.T @ np.ones(domain.space.n_cp)
        self._m = domain.basis_integrals()

    @property
    def space(self):
        return self.domain.space

    def step_coef(self, a, step=None):
        try:
            return self.solver.solve(self.B @ a)
        except NumericalError as exc:
            raise NumericalError(f"forward step {step} failed: {exc}", iterations=exc.iterations,
                                 residual=exc.residual, step=step) from exc

    def step(self, c_n):
        """Advance one backward-Euler step."""
        if not self.space.compatible(c_n.space):
            raise ConfigurationError("concentration field is on a different spline space")
        return Field(self.space, self.step_coef(c_n.coef))

    def diagnostics(self, t, a, a_prev=None):
        mass = float(self._m @ a)
        efflux = float(self._efflux_vec @ a)
        vals = self.domain.bulk_basis.values(a)
        dm = np.nan if a_prev is None else float(self._m @ a_prev) - mass - self.dt * efflux
        k_eff = efflux / mass if mass != 0 else np.nan
        return StepDiagnostics(float(t), mass, efflux, dm, k_eff, float(vals.min()), float(vals.max()))

    def run(self, c0, steps, t0=0.0, keep_fields=True):
        """Iterate ``steps`` times from ``c0``; step 0 of the trajectory is ``c0``."""
        if steps < 1:
            raise ConfigurationError(f"need at least one step, got {steps}")
        a = np.asarray(c0.coef, dtype=float)
        traj = Trajectory([t0], [c0], [self.diagnostics(t0, a)])
        for n in range(1, steps + 1):
            a_new = self.step_coef(a, step=n)
            if not np.all(np.isfinite(a_new)):
                raise NumericalError(f"non-finite concentration at step {n}", step=n)
            t = t0 + n * self.dt
            traj.times.append(t)
            traj.diagnostics.append(self.diagnostics(t, a_new, a))
            traj.fields.append(Field(self.space, a_new) if keep_fields else None)
            a = a_new
        traj.final = Field(self.space, a)
        return traj


def relative_error(c_sim, c_data, domain):
    """``int (c_sim - c_data)^2 / int c_data^2`` over Omega."""
    if not (c_sim.space.compatible(c_data.space) and domain.space.compatible(c_sim.space)):
        raise ConfigurationError("relative_error needs fields on the domain's space")
    M = domain.mass_matrix()
    e = c_sim.coef - c_data.coef
    den = float(c_data.coef @ (M @ c_data.coef))
    if not den > 0:
        raise DomainError("reference field has zero L2 norm")
    return float(e @ (M @ e)) / den
