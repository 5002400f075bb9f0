"""Weakly divergence-free correction of a noisy finite-difference velocity."""

from glymph import PhantomSpec, corrupt_fd_velocity, fd_velocity_field, generate, solve_correction
from glymph import weak_divergence_residual

spec = PhantomSpec(elements=(12, 12, 12), voxels=(12, 12, 12), velocity="divergent_linear", D_value=0.01,
                   noise_sigma=0.01, seed=1, steps=8, n_q=1)
ph = generate(spec)
u = fd_velocity_field(ph.domain, corrupt_fd_velocity(ph.volumes, spec.dt))

phi = solve_correction(ph.domain, u)
before = weak_divergence_residual(ph.domain, u)
after = weak_divergence_residual(ph.domain, u, phi)
print(f"weak divergence of u_bar:         {before.l2_normalized:.3e}")
print(f"weak divergence of u_bar + u':    {after.l2_normalized:.3e}")
print(f"max residual over basis functions: {after.max_residual:.3e}")
