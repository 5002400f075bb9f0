"""Fine-scale velocity correction ``u' = grad phi`` making ``u_bar + u'`` weakly divergence-free.

phi solves the Neumann problem ``int grad phi . grad q = int div(u_bar) q`` for
all zero-mean test functions q, with ``int phi = 0`` enforced by a bordered
Lagrange-multiplier row.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .assembly import assemble_matrix, assemble_vector
from .errors import ConfigurationError
from .linalg import FactorizedSolver
from .spline_space import Field


@dataclass(eq=False)
class PoissonSystem:
    """Stiffness ``kappa``, basis integrals ``m`` and the factorized bordered matrix."""

    kappa: sp.csr_matrix
    m: np.ndarray
    solver: FactorizedSolver
    volume: float

    def solve(self, f):
        """Zero-mean phi with ``kappa phi = f - m sum(f)/|Omega|``; f may be (n,) or (n, k)."""
        f = np.asarray(f, dtype=float)
        n = len(self.m)
        pad = np.zeros((1,) + f.shape[1:])
        x = self.solver.solve(np.concatenate([f, pad]))
        return x[:n]


def poisson_system(domain, rtol=1e-12):
    """Cached per domain."""

    def build():
        pb = domain.bulk_basis
        kappa = assemble_matrix(pb, pb.grad, pb.grad, domain.bulk_weights)
        # summation order differs between (i, j) and (j, i); averaging makes kappa bitwise symmetric
        kappa = ((kappa + kappa.T) * 0.5).tocsr()
        m = domain.basis_integrals()
        border = sp.csr_matrix(m[None, :])
        A = sp.bmat([[kappa, border.T], [border, None]], format="csc")
        return PoissonSystem(kappa.tocsr(), m, FactorizedSolver(A, rtol=rtol, max_refine=8), domain.volume)

    return domain.cached(("poisson", rtol), build)


def divergence_load(domain, u_bar, phi0=None):
    """``f_i = int div(u_bar) N_i``, minus ``int grad phi0 . grad N_i`` when phi0 is given."""
    if not domain.space.compatible(u_bar.space):
        raise ConfigurationError("velocity is on a different spline space than the domain")
    pb = domain.bulk_basis
    comps = u_bar.components
    div = sum(pb.gradients(comps[k])[:, k] for k in range(3))
    f = assemble_vector(pb, pb.val, domain.bulk_weights * div)
    if phi0 is not None:
        f = f - poisson_system(domain).kappa @ phi0.coef
    return f


def solve_correction(domain, u_bar, phi0=None):
    """Potential phi of the correction ``u' = grad phi`` for velocity ``u_bar + grad phi0``."""
    ps = poisson_system(domain)
    return Field(domain.space, ps.solve(divergence_load(domain, u_bar, phi0)))


@dataclass(frozen=True)
class DivergenceReport:
    max_residual: float
    l2_normalized: float


def _zero_mean(r, ps):
    return r - ps.m * (r.sum() / ps.volume)


def weak_divergence_residual(domain, u_bar, phi=None, phi0=None):
    """Weak divergence of ``u_bar + grad phi0 + grad phi`` against zero-mean test functions.

    Returns the max over active basis functions of
    ``|int grad phi . grad q_i - int div(u_bar) q_i|`` with ``q_i = N_i - m_i/|Omega|``,
    and the L2 norm of that residual's Riesz representer divided by the box volume.
    """
    ps = poisson_system(domain)
    f = divergence_load(domain, u_bar, phi0)
    kphi = 0.0 if phi is None else ps.kappa @ phi.coef
    r = _zero_mean(kphi - f, ps)
    d = domain.mass_solver().solve(r)
    l2 = float(np.sqrt(max(r @ d, 0.0))) / domain.box_volume
    return DivergenceReport(float(np.abs(r).max()), l2)
