"""Synthetic phantoms: geometry, transport coefficients and tracer time series.

Tracer data come from the HW forward model on the generation mesh, so inverting
on the same mesh is an exact inverse crime; ``mesh_mismatch`` generates on a
mesh twice as fine instead.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .forward import ForwardProblem, TransportCoefficients
from .immersed import INSIDE, LevelSet, build_domain
from .spline_space import Field, SplineSpace, VectorField, l2_project, quasi_interpolate
from .volume_io import VoxelVolume, write_field, write_manifest, write_volume

log = logging.getLogger(__name__)

GEOMETRIES = ("sphere", "ellipsoid", "two_lobe")
VELOCITIES = ("zero", "constant", "curl_potential", "divergent_linear")


def smoothstep(t):
    """Quintic C2 ramp from 0 (t <= 0) to 1 (t >= 1)."""
    t = np.clip(t, 0.0, 1.0)
    return t ** 3 * (10 - 15 * t + 6 * t ** 2)


def smoothstep_deriv(t):
    inside = (t > 0) & (t < 1)
    tc = np.clip(t, 0.0, 1.0)
    return np.where(inside, 30 * tc ** 2 * (1 - tc) ** 2, 0.0)


@dataclass
class PhantomSpec:
    """Full description of a synthetic experiment (lengths mm, times min, concentrations nM)."""

    geometry: str = "sphere"
    box_mm: tuple = (16.0, 16.0, 16.0)
    elements: tuple = (16, 16, 16)
    voxels: tuple = (32, 32, 32)
    radius: float = 6.0
    center_offset: tuple = (0.0, 0.0, 0.0)
    semi_axes: tuple = (7.0, 5.5, 4.5)
    lobe_offset: float = 3.0
    lobe_radius: float = 4.5
    velocity: str = "zero"
    velocity_vector: tuple = (0.05, 0.0, 0.0)
    curl_amplitude: float = 0.5
    curl_wavelengths: tuple = (1.0, 1.0)
    divergence: float = 0.1
    taper: bool = None
    taper_offset: float = 1.5
    taper_width: float = 2.0
    D: str = "constant"
    D_value: float = 0.05
    D_outer: float = 0.1
    gamma: str = "constant"
    gamma_value: float = 0.01
    gamma_high: float = 0.03
    gamma_axis: int = 2
    gamma_width: float = 1.0
    gaussians: list = field(default_factory=lambda: [((1.5, 0.5, -0.5), 2.0, 1.0)])
    background: float = 0.1
    noise_sigma: float = 0.0
    seed: int = 0
    dt: float = 5.0
    steps: int = 8
    n_q: int = 2
    mesh_mismatch: bool = False

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ConfigurationError(f"geometry must be one of {GEOMETRIES}, got {self.geometry!r}")
        if self.velocity not in VELOCITIES:
            raise ConfigurationError(f"velocity must be one of {VELOCITIES}, got {self.velocity!r}")
        if self.D not in ("constant", "radial_ramp"):
            raise ConfigurationError(f"unknown D recipe {self.D!r}")
        if self.gamma not in ("constant", "hemisphere"):
            raise ConfigurationError(f"unknown gamma recipe {self.gamma!r}")
        if self.velocity == "constant" and self.taper:
            raise ConfigurationError("a tapered constant velocity is no longer constant")
        if self.D_value <= 0 or (self.D == "radial_ramp" and self.D_outer <= 0):
            raise ConfigurationError("diffusivity must be positive")
        if self.gamma_value < 0 or self.gamma_high < 0:
            raise ConfigurationError("clearance must be non-negative")
        if self.dt <= 0 or self.steps < 1:
            raise ConfigurationError("need dt > 0 and at least one step")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")

    @property
    def lower(self):
        return np.zeros(3)

    @property
    def upper(self):
        return np.asarray(self.box_mm, dtype=float)

    @property
    def center(self):
        return 0.5 * self.upper + np.asarray(self.center_offset, dtype=float)

    @property
    def tapered(self):
        if self.taper is None:
            return self.velocity == "divergent_linear"
        return bool(self.taper)

    def to_dict(self):
        d = asdict(self)
        return json.loads(json.dumps(d))

    def level_set(self):
        """Analytic level set with unit Lipschitz bound (positive inside)."""
        c = self.center
        if self.geometry == "sphere":
            r = self.radius

            def f(p):
                return r - np.linalg.norm(p - c, axis=1)
        elif self.geometry == "ellipsoid":
            a = np.asarray(self.semi_axes, dtype=float)

            def f(p):
                return a.min() * (1.0 - np.linalg.norm((p - c) / a, axis=1))
        else:
            off = np.array([self.lobe_offset, 0.0, 0.0])
            r = self.lobe_radius

            def f(p):
                return np.maximum(r - np.linalg.norm(p - c - off, axis=1), r - np.linalg.norm(p - c + off, axis=1))
        return LevelSet.from_function(f, lipschitz=1.0)

    def voxel_grid(self):
        vox = np.asarray(self.voxels, dtype=int)
        return VoxelVolume(np.zeros(tuple(vox)), tuple(self.upper / vox), tuple(self.lower))

    def initial_tracer(self, p):
        out = np.full(len(p), float(self.background))
        for center, width, amp in self.gaussians:
            x0 = self.center + np.asarray(center, dtype=float)
            out += amp * np.exp(-np.sum((p - x0) ** 2, axis=1) / (2 * width ** 2))
        return out

    def diffusivity(self, p):
        if self.D == "constant":
            return np.full(len(p), float(self.D_value))
        r = np.linalg.norm(p - self.center, axis=1) / self._size()
        return self.D_value + (self.D_outer - self.D_value) * np.clip(r, 0, 1)

    def clearance(self, p):
        if self.gamma == "constant":
            return np.full(len(p), float(self.gamma_value))
        s = (p[:, self.gamma_axis] - self.center[self.gamma_axis]) / self.gamma_width
        return self.gamma_value + (self.gamma_high - self.gamma_value) * 0.5 * (1 + np.tanh(s))

    def _size(self):
        if self.geometry == "sphere":
            return self.radius
        if self.geometry == "ellipsoid":
            return float(max(self.semi_axes))
        return self.lobe_offset + self.lobe_radius

    def cutoff(self, ls, h):
        """Smooth taper chi and its gradient, zero within ``taper_offset`` elements of the boundary."""
        off, width = self.taper_offset * h, self.taper_width * h

        def chi(p):
            return smoothstep((ls(p) - off) / width)

        def grad_chi(p, eps=1e-6):
            t = (ls(p) - off) / width
            g = np.stack([(ls(p + eps * e) - ls(p - eps * e)) / (2 * eps) for e in np.eye(3)], 1)
            return smoothstep_deriv(t)[:, None] * g / width

        return chi, grad_chi

    def velocity_function(self, ls, h):
        """Analytic u_bar(p) -> (Q, 3) for the chosen recipe, including the taper."""
        c = self.center
        chi, grad_chi = self.cutoff(ls, h) if self.tapered else (None, None)
        if self.velocity == "zero":
            return lambda p: np.zeros((len(p), 3))
        if self.velocity == "constant":
            v = np.asarray(self.velocity_vector, dtype=float)
            return lambda p: np.tile(v, (len(p), 1))
        if self.velocity == "divergent_linear":
            g = self.divergence / 3.0
            if chi is None:
                return lambda p: g * (p - c)
            return lambda p: g * (p - c) * chi(p)[:, None]
        # u = curl(0, 0, chi * psi) with psi = A sin(kx x) sin(ky y)
        A = self.curl_amplitude
        kx, ky = (np.pi * w / L for w, L in zip(self.curl_wavelengths, self.upper[:2]))

        def u(p):
            x, y = p[:, 0] - self.lower[0], p[:, 1] - self.lower[1]
            psi = A * np.sin(kx * x) * np.sin(ky * y)
            dpsi = np.stack([A * kx * np.cos(kx * x) * np.sin(ky * y),
                             A * ky * np.sin(kx * x) * np.cos(ky * y)], 1)
            if chi is not None:
                ch, gch = chi(p), grad_chi(p)
                dpsi = dpsi * ch[:, None] + psi[:, None] * gch[:, :2]
            return np.stack([dpsi[:, 1], -dpsi[:, 0], np.zeros(len(p))], 1)

        return u


def interior_support_mask(domain):
    """True for basis functions whose support lies entirely in INSIDE elements."""
    space = domain.full_space
    bad = np.flatnonzero(domain.classification != INSIDE)
    ijk = space.element_ijk(bad)
    loc = np.arange(3)
    nbx, nby = space.n_basis[0], space.n_basis[1]
    g = ((ijk[:, 0, None, None, None] + loc[None, None, None, :])
         + nbx * ((ijk[:, 1, None, None, None] + loc[None, None, :, None])
                  + nby * (ijk[:, 2, None, None, None] + loc[None, :, None, None])))
    touched = np.zeros(space.n_total, dtype=bool)
    touched[g.ravel()] = True
    return ~touched[domain.active_global]


def project_vector(domain, func, interior_only=False):
    """Component-wise L2 projection of ``func(points) -> (Q, 3)``."""
    pts = domain.bulk_points
    vals = func(pts)
    comps = []
    for k in range(3):
        comps.append(l2_project(domain.space, domain, vals[:, k]).coef)
    coef = np.stack(comps)
    if interior_only:
        coef[:, ~interior_support_mask(domain)] = 0.0
    return VectorField(domain.space, coef.ravel())


def truth_coefficients(domain, spec):
    """Spline D, u_bar and gamma from the PhantomSpec's analytic fields.

    Coefficients are sampled at the Greville points, so they stay bounded (and
    D, gamma positive) on basis functions that barely touch the domain.
    """
    space = domain.space
    D = quasi_interpolate(space, spec.diffusivity)
    gamma = quasi_interpolate(space, spec.clearance)
    u = quasi_interpolate(space, spec.velocity_function(domain.level_set, space.h_char))
    if spec.tapered:
        coef = u.coef.reshape(3, -1).copy()
        coef[:, ~interior_support_mask(domain)] = 0.0
        u = VectorField(space, coef.ravel())
    return TransportCoefficients(D, u, gamma)


@dataclass(eq=False)
class Phantom:
    """Generated ground truth and data."""

    spec: PhantomSpec
    domain: object
    coeffs: TransportCoefficients
    trajectory: object
    volumes: list
    mask: VoxelVolume

    @property
    def times(self):
        return list(self.trajectory.times)

    @property
    def truth_fields(self):
        return self.trajectory.fields

    def data_fields(self, domain=None):
        """Concentration Fields for inversion on ``domain``.

        On the generation domain without noise these are the exact model
        trajectory; otherwise the voxel volumes are L2-projected.
        """
        if domain is None or domain is self.domain:
            if self.spec.noise_sigma == 0:
                return list(self.trajectory.fields)
            domain = self.domain
        return [l2_project(domain.space, domain, v) for v in self.volumes]

    def inverse_domain(self, n_q=1):
        """Domain on the PhantomSpec's (coarse) element mesh."""
        if not self.spec.mesh_mismatch and n_q == self.domain.n_q:
            return self.domain
        space = SplineSpace(self.spec.lower, self.spec.upper, self.spec.elements)
        return build_domain(space, self.spec.level_set(), n_q)

    def write(self, outdir):
        """Write mask, snapshots, truth fields and a manifest; returns the manifest path."""
        os.makedirs(outdir, exist_ok=True)
        write_volume(self.mask, os.path.join(outdir, "mask"))
        snaps = []
        for n, (t, v) in enumerate(zip(self.times, self.volumes)):
            p = os.path.join(outdir, f"snapshot_{n:03d}")
            write_volume(v, p)
            snaps.append((t, p + ".json"))
        fields = {"D": self.coeffs.D, "u_bar": self.coeffs.u_bar, "gamma": self.coeffs.gamma}
        for name, f in fields.items():
            write_field(f, os.path.join(outdir, f"truth_{name}"))
        extra = {"spec": self.spec.to_dict(), "seed": self.spec.seed, "mask": "mask.json",
                 "truth": {name: f"truth_{name}.json" for name in fields},
                 "generation_elements": list(self.domain.full_space.shape)}
        return write_manifest(os.path.join(outdir, "manifest.json"), snaps, extra)


def nearest_inside(inside):
    """Index arrays mapping every voxel to its nearest voxel with ``inside`` set."""
    return tuple(ndimage.distance_transform_edt(~inside, return_distances=False, return_indices=True))


def generate(spec):
    """Build the phantom described by ``spec``.

    Voxels outside Omega carry no model value; they take the value of the
    nearest inside voxel, as if the image were padded by edge replication.
    """
    ls = spec.level_set()
    elements = np.asarray(spec.elements) * (2 if spec.mesh_mismatch else 1)
    space = SplineSpace(spec.lower, spec.upper, elements)
    domain = build_domain(space, ls, spec.n_q)
    coeffs = truth_coefficients(domain, spec)
    c0 = l2_project(domain.space, domain, spec.initial_tracer)
    prob = ForwardProblem(domain, coeffs, spec.dt, "hw")
    traj = prob.run(c0, spec.steps)
    grid = spec.voxel_grid()
    centers = grid.centers()
    inside = ls(centers) > 0
    if not inside.any():
        raise ConfigurationError("no voxel centre lies inside the phantom geometry")
    nearest = nearest_inside(inside.reshape(grid.dims, order="F"))
    rng = np.random.default_rng(spec.seed)
    pb = domain.space.basis(centers)
    volumes = []
    for f in traj.fields:
        vals = pb.values(f.coef).reshape(grid.dims, order="F")[nearest]
        if spec.noise_sigma > 0:
            vals = vals + rng.normal(0.0, spec.noise_sigma, size=vals.shape)
        volumes.append(grid.with_data(vals))
    mask = grid.with_data(inside.astype(float).reshape(grid.dims, order="F"))
    log.info("generated %s phantom: n_cp=%d, %d snapshots", spec.geometry, domain.space.n_cp, len(volumes))
    return Phantom(spec, domain, prob.coeffs, traj, volumes, mask)


def corrupt_fd_velocity(snapshots, dt, spacing=None, D=0.0, eps_rel=1e-4, max_speed=None):
    """Finite-difference velocity estimate from a voxel time series.

    Central differences in time and space give ``r = dc/dt - D lap c``; the
    velocity is the normal-flow estimate ``-r grad c / (|grad c|^2 + eps^2)``,
    averaged over the interior snapshots. Only the component of the true
    velocity along ``grad c`` is observable; in noisy data the estimate is
    dominated by high-frequency, non-solenoidal artefacts.

    Returns three VoxelVolumes (x, y, z components).
    """
    snaps = list(snapshots)
    if len(snaps) < 3:
        raise ConfigurationError("finite-difference velocity needs at least three snapshots")
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    spacing = tuple(snaps[0].spacing if spacing is None else spacing)
    data = [np.asarray(s.data, dtype=float) for s in snaps]
    acc = np.zeros((3,) + data[0].shape)
    for n in range(1, len(data) - 1):
        dcdt = (data[n + 1] - data[n - 1]) / (2 * dt)
        g = np.stack(np.gradient(data[n], *spacing))
        r = dcdt
        if D:
            lap = sum(np.gradient(np.gradient(data[n], spacing[a], axis=a), spacing[a], axis=a) for a in range(3))
            r = r - D * lap
        g2 = np.sum(g ** 2, axis=0)
        eps2 = (eps_rel * np.sqrt(g2.max())) ** 2 if g2.max() > 0 else 1.0
        acc += -r * g / (g2 + eps2)
    v = acc / (len(data) - 2)
    if max_speed is not None:
        speed = np.sqrt(np.sum(v ** 2, axis=0))
        v *= np.minimum(1.0, max_speed / np.maximum(speed, 1e-300))
    return [snaps[0].with_data(v[k]) for k in range(3)]


def fd_velocity_field(domain, volumes):
    """Project a voxel velocity triple onto the domain's space."""
    comps = [l2_project(domain.space, domain, v).coef for v in volumes]
    return VectorField(domain.space, np.concatenate(comps))


def with_spec(spec, **changes):
    return replace(spec, **changes)
