"""Ground-truth heterogeneous phantoms: Gaussian blob mixtures on state-driven paths.

A phantom is a list of blobs; each blob has an amplitude, an isotropic width,
and a polynomial center path c(tau) in voxel coordinates relative to the grid
center.  Blobs are truncated at ``cutoff_sigmas`` standard deviations so a
component's support ball bounds it exactly, which keeps composite supports
hard and lets the arm-independence invariant hold voxel-for-voxel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import (
    HyperCoefficients,
    StateBasis,
    VolumeBasis,
    analyze_volume,
    chebyshev_values,
    eval_state_basis,
    hermitian_symmetrize,
    synthesize_volume,
)
from .errors import DomainError, InvariantError

CUTOFF_SIGMAS = 4.0


@dataclass
class BlobTrajectory:
    """One Gaussian blob whose center follows a per-axis polynomial in tau.

    center_path has shape (3, n_coeffs): center_path[a, j] multiplies tau_d**j
    where tau_d is the single state coordinate this blob listens to
    (state_dims_used; static blobs use an empty tuple and only the constant
    term).  Widths are in voxels.
    """

    amplitude: float
    width: float
    center_path: np.ndarray
    state_dims_used: tuple[int, ...] = ()
    component: int | None = None

    def __post_init__(self):
        self.center_path = np.atleast_2d(np.asarray(self.center_path, dtype=np.float64))
        if self.center_path.shape[0] != 3:
            raise DomainError("center_path must have one row per axis")
        if not (self.width > 0.0 and np.isfinite(self.amplitude)):
            raise DomainError("width must be positive and amplitude finite")
        if len(self.state_dims_used) > 1:
            raise DomainError("a blob listens to at most one state dimension")

    def center_at(self, tau: np.ndarray) -> np.ndarray:
        """Blob center (3,) at a full state vector tau."""
        if len(self.state_dims_used) == 0:
            return self.center_path[:, 0].copy()
        t = float(np.atleast_1d(tau)[self.state_dims_used[0]])
        powers = t ** np.arange(self.center_path.shape[1])
        return self.center_path @ powers

    def centers_at(self, taus: np.ndarray) -> np.ndarray:
        """Batched centers: taus (B, d) -> (B, 3)."""
        taus = np.atleast_2d(taus)
        if len(self.state_dims_used) == 0:
            return np.broadcast_to(self.center_path[:, 0], (taus.shape[0], 3)).copy()
        t = taus[:, self.state_dims_used[0]]
        powers = t[:, None] ** np.arange(self.center_path.shape[1])[None, :]
        return powers @ self.center_path.T


@dataclass
class PhantomSpec:
    """A full phantom: blobs, its state dimensionality, and the grid it lives on."""

    blobs: list[BlobTrajectory]
    state_dims: int
    grid: VolumeBasis
    composite_layout: object | None = None  # model.CompositeSpec for structured phantoms
    name: str = "custom"

    def __post_init__(self):
        if self.state_dims not in (0, 1, 2):
            raise DomainError("state_dims must be 0, 1 or 2 in this implementation")
        self._check_inscribed_ball()

    def _check_inscribed_ball(self):
        """Every blob center path stays inside the grid's inscribed ball."""
        n_side = 101 if self.state_dims <= 1 else 51
        radius = self.grid.grid_size / 2.0
        taus = _tau_sample_grid(self.state_dims, n_side)
        for i, blob in enumerate(self.blobs):
            centers = blob.centers_at(taus)
            reach = np.linalg.norm(centers, axis=1)
            if np.any(reach > radius):
                raise InvariantError(
                    f"blob {i} center path escapes the inscribed ball "
                    f"(max |c| {reach.max():.2f} vs radius {radius:.2f})"
                )


def _tau_sample_grid(d: int, n_side: int) -> np.ndarray:
    if d == 0:
        return np.zeros((1, 0))
    axes = [np.linspace(-1.0, 1.0, n_side)] * d
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def render_phantom(spec: PhantomSpec, tau: np.ndarray, blobs: list | None = None,
                   grid_size: int | None = None, origin_shift: np.ndarray | None = None) -> np.ndarray:
    """Sum of truncated Gaussian blobs at one state point, on an N^3 grid.

    ``blobs``/``grid_size``/``origin_shift`` support component-local rendering
    (a subset of blobs on a smaller grid whose center sits at origin_shift in
    the parent frame); defaults render the whole phantom on its own grid.
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    if tau.shape != (spec.state_dims,):
        raise DomainError(f"tau must have shape ({spec.state_dims},)")
    if np.any(np.abs(tau) > 1.0):
        raise DomainError("tau out of [-1,1]^d")
    blobs = spec.blobs if blobs is None else blobs
    n = spec.grid.grid_size if grid_size is None else grid_size
    shift = np.zeros(3) if origin_shift is None else np.asarray(origin_shift, dtype=np.float64)
    x = np.arange(n) - n // 2
    out = np.zeros((n, n, n))
    for blob in blobs:
        c = blob.center_at(tau) - shift
        lo = np.maximum(np.floor(c - CUTOFF_SIGMAS * blob.width).astype(int) + n // 2, 0)
        hi = np.minimum(np.ceil(c + CUTOFF_SIGMAS * blob.width).astype(int) + n // 2 + 1, n)
        if np.any(lo >= hi):
            continue
        sl = tuple(slice(lo[a], hi[a]) for a in range(3))
        dx = x[sl[0]] - c[0]
        dy = x[sl[1]] - c[1]
        dz = x[sl[2]] - c[2]
        d2 = (dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2)
        cut = (CUTOFF_SIGMAS * blob.width) ** 2
        patch = blob.amplitude * np.exp(-d2 / (2.0 * blob.width ** 2))
        patch[d2 > cut] = 0.0
        out[sl] += patch
    return out


def _poly_fit_path(fn, degree: int = 10) -> np.ndarray:
    """Least-squares polynomial coefficients (per axis) of a smooth path on [-1,1].

    Fit at Chebyshev nodes; paths built from sines/cosines of |angle| <= pi/2
    are entire, so degree 10 reaches ~1e-9 absolute accuracy.
    """
    nodes = np.cos(np.pi * (np.arange(2 * degree + 2) + 0.5) / (2 * degree + 2))
    vals = np.stack([fn(t) for t in nodes], axis=1)  # (3, n_nodes)
    vander = nodes[:, None] ** np.arange(degree + 1)[None, :]
    coeffs, *_ = np.linalg.lstsq(vander, vals.T, rcond=None)
    return coeffs.T  # (3, degree+1)


def _static_path(center) -> np.ndarray:
    return np.asarray(center, dtype=np.float64).reshape(3, 1)


def make_cat_spec(grid: VolumeBasis) -> PhantomSpec:
    """One-dimensional heterogeneity: a static body plus a head that turns.

    Head blobs rotate about the neck pivot by theta(tau) = tau * 60 degrees
    around the vertical axis.  At tau = 0 every blob center lies in the y = 0
    plane, so the rendered volume is mirror-symmetric there by construction.
    """
    if grid.grid_size < 32:
        raise DomainError("cat phantom needs grid_size >= 32")
    s = grid.grid_size / 32.0
    blobs: list[BlobTrajectory] = []
    body = [
        ((0.0, 0.0, -7.5 * s), 2.6 * s, 1.0),
        ((0.0, 0.0, -4.0 * s), 2.3 * s, 0.9),
        ((0.0, 0.0, -0.8 * s), 2.0 * s, 0.8),
        ((2.8 * s, 0.0, -6.5 * s), 1.4 * s, 0.6),   # front paw marks the body's facing
    ]
    for center, width, amp in body:
        blobs.append(BlobTrajectory(amp, width, _static_path(center)))

    pivot = np.array([0.0, 0.0, 1.8 * s])
    max_angle = np.deg2rad(60.0)
    head_offsets = [
        (np.array([0.0, 0.0, 2.2 * s]), 1.8 * s, 0.9),      # skull
        (np.array([2.2 * s, 0.0, 3.4 * s]), 1.0 * s, 0.55),  # snout
        (np.array([-1.3 * s, 0.0, 4.6 * s]), 0.8 * s, 0.5),  # ear
    ]
    for offset, width, amp in head_offsets:
        def path(t, offset=offset):
            ang = t * max_angle
            rot = np.array([
                [np.cos(ang), -np.sin(ang), 0.0],
                [np.sin(ang), np.cos(ang), 0.0],
                [0.0, 0.0, 1.0],
            ])
            return pivot + rot @ offset
        blobs.append(BlobTrajectory(amp, width, _poly_fit_path(path), state_dims_used=(0,)))
    return PhantomSpec(blobs=blobs, state_dims=1, grid=grid, name="cat")


# Pretzel layout constants, in units of grid_size/48 voxels.
_PRETZEL_ARM_ANCHOR_X = 7.5
_PRETZEL_ARM_Z = -2.0
_PRETZEL_ARM_SEG = 1.5
_PRETZEL_ARM_WIDTH = 1.4
_PRETZEL_BASE_Z = -7.0
_PRETZEL_BASE_R = 7.0


def _pretzel_arm_blobs(scale: float, anchor: np.ndarray, state_dim: int,
                       component: int) -> list[BlobTrajectory]:
    """Five blobs curling from vertical toward +x as tau runs over [-1, 1].

    Blob j rotates about the anchor by (j/4) * (tau + 1) * pi/4, so the free
    end sweeps a quarter circle.  The sweep is one-sided on purpose: the
    tau-averaged arm leans +x, which breaks the 180-degree ambiguity between
    the two congruent arms during alignment.
    """
    blobs = []
    for j in range(5):
        arm_r = (j + 1) * _PRETZEL_ARM_SEG * scale

        def path(t, arm_r=arm_r, j=j):
            beta = (j / 4.0) * (t + 1.0) * (np.pi / 4.0)
            local = np.array([arm_r * np.sin(beta), 0.0, arm_r * np.cos(beta)])
            return anchor + local

        amp = 1.1 - 0.05 * j
        blobs.append(BlobTrajectory(amp, _PRETZEL_ARM_WIDTH * scale, _poly_fit_path(path),
                                    state_dims_used=(state_dim,), component=component))
    return blobs


def _enclosing_ball(blobs: list[BlobTrajectory], state_dims: int,
                    pad: float = 0.3) -> tuple[np.ndarray, float]:
    """Smallest axis-aligned-box-centered ball containing every blob cutoff."""
    taus = _tau_sample_grid(state_dims, 41)
    centers = np.concatenate([b.centers_at(taus) for b in blobs])
    cuts = np.concatenate([np.full(taus.shape[0], CUTOFF_SIGMAS * b.width) for b in blobs])
    lo = (centers - cuts[:, None]).min(axis=0)
    hi = (centers + cuts[:, None]).max(axis=0)
    mid = 0.5 * (lo + hi)
    radius = float(np.max(np.linalg.norm(centers - mid, axis=1) + cuts)) + pad
    return mid, radius


def make_pretzel_spec(grid: VolumeBasis) -> PhantomSpec:
    """Two-dimensional heterogeneity: a rigid base ring plus two congruent arms.

    Arm 2 is arm 1 translated by a fixed integer offset (a rigid motion), and
    the two arms respond to independent state coordinates tau_1, tau_2.  The
    base ring has graded amplitudes and a keel blob, so the rigid part has no
    rotational symmetry to confuse alignment.
    """
    if grid.grid_size < 32:
        raise DomainError("pretzel phantom needs grid_size >= 32")
    s = grid.grid_size / 48.0
    base: list[BlobTrajectory] = []
    n_ring = 7
    for i in range(n_ring):
        ang = 2.0 * np.pi * i / n_ring
        center = (_PRETZEL_BASE_R * s * np.cos(ang), _PRETZEL_BASE_R * s * np.sin(ang),
                  _PRETZEL_BASE_Z * s)
        amp = 1.0 + 0.25 * np.cos(3.1 * i)  # graded, aperiodic around the ring
        base.append(BlobTrajectory(amp, 1.8 * s, _static_path(center), component=0))
    base.append(BlobTrajectory(0.9, 1.6 * s, _static_path((1.5 * s, 2.5 * s, -10.5 * s)),
                               component=0))

    anchor1 = np.array([-_PRETZEL_ARM_ANCHOR_X * s, 0.0, _PRETZEL_ARM_Z * s])
    anchor2 = np.array([+_PRETZEL_ARM_ANCHOR_X * s, 0.0, _PRETZEL_ARM_Z * s])
    arm1 = _pretzel_arm_blobs(s, anchor1, state_dim=0, component=1)
    arm2 = _pretzel_arm_blobs(s, anchor2, state_dim=1, component=2)

    spec = PhantomSpec(blobs=base + arm1 + arm2, state_dims=2, grid=grid, name="pretzel")
    spec.composite_layout = default_pretzel_layout(grid)
    return spec


def pretzel_congruence_offset(grid: VolumeBasis) -> np.ndarray:
    """The rigid motion mapping arm 1 onto arm 2: a pure translation (+x)."""
    s = grid.grid_size / 48.0
    return np.array([2.0 * _PRETZEL_ARM_ANCHOR_X * s, 0.0, 0.0])


def pretzel_arm_ball(grid: VolumeBasis, arm: int) -> tuple[np.ndarray, float]:
    """Center and radius of an arm's support ball (contains all blob cutoffs)."""
    s = grid.grid_size / 48.0
    sign = -1.0 if arm == 1 else 1.0
    anchor = np.array([sign * _PRETZEL_ARM_ANCHOR_X * s, 0.0, _PRETZEL_ARM_Z * s])
    blobs = _pretzel_arm_blobs(s, anchor, state_dim=0, component=arm)
    return _enclosing_ball(blobs, state_dims=1)


def pretzel_base_ball(grid: VolumeBasis) -> tuple[np.ndarray, float]:
    s = grid.grid_size / 48.0
    blobs = []
    n_ring = 7
    for i in range(n_ring):
        ang = 2.0 * np.pi * i / n_ring
        center = (_PRETZEL_BASE_R * s * np.cos(ang), _PRETZEL_BASE_R * s * np.sin(ang),
                  _PRETZEL_BASE_Z * s)
        blobs.append(BlobTrajectory(1.0, 1.8 * s, _static_path(center)))
    blobs.append(BlobTrajectory(0.9, 1.6 * s, _static_path((1.5 * s, 2.5 * s, -10.5 * s))))
    return _enclosing_ball(blobs, state_dims=0)


def default_pretzel_layout(grid: VolumeBasis):
    """Composite layout matching the pretzel: rigid base + two shared arms."""
    from .model import AffineTrajectory, ComponentSpec, CompositeSpec

    base_center, base_radius = pretzel_base_ball(grid)
    c1, r1 = pretzel_arm_ball(grid, 1)
    c2, r2 = pretzel_arm_ball(grid, 2)
    radius = max(r1, r2)  # congruent arms share one pool, so equal grids
    comps = [
        ComponentSpec(support_center=base_center, support_radius=base_radius,
                      state_dims=0, max_degree=0, share_group=None,
                      trajectory=AffineTrajectory()),
        ComponentSpec(support_center=c1, support_radius=radius, state_dims=1,
                      max_degree=6, share_group=1, trajectory=AffineTrajectory()),
        ComponentSpec(support_center=c2, support_radius=radius, state_dims=1,
                      max_degree=6, share_group=1, trajectory=AffineTrajectory()),
    ]
    return CompositeSpec(components=comps, grid=grid)


def make_single_blob_spec(grid: VolumeBasis) -> PhantomSpec:
    """Homogeneous smoke phantom: one off-center blob."""
    r0 = grid.grid_size / 8.0
    w = grid.grid_size / 10.0
    blob = BlobTrajectory(1.0, w, _static_path((r0, 0.0, 0.0)))
    return PhantomSpec(blobs=[blob], state_dims=0, grid=grid, name="single_blob")


def chebyshev_quad_nodes(n: int) -> np.ndarray:
    """Gauss-Chebyshev nodes on (-1, 1)."""
    return np.cos(np.pi * (np.arange(n) + 0.5) / n)


def fit_coefficients(spec: PhantomSpec, vol_basis: VolumeBasis, state_basis: StateBasis,
                     n_state_nodes: int = 16, blobs: list | None = None,
                     origin_shift: np.ndarray | None = None,
                     held_out: tuple[float, ...] = (-0.9, -0.3, 0.4, 0.8)):
    """Project phantom renders onto the hyper-coefficient tensor.

    Renders at Gauss-Chebyshev nodes in tau, takes the spatial DFT of each,
    and contracts against the discrete Chebyshev quadrature weights.  Returns
    (HyperCoefficients, report) where the report carries the held-out
    relative synthesis error; errors above 20% surface as a warning flag,
    not a failure.
    """
    d, q_max = state_basis.dims, state_basis.max_degree
    if n_state_nodes < q_max + 1:
        raise DomainError("n_state_nodes must be at least max_degree + 1 per dimension")
    n = vol_basis.grid_size

    coeffs = HyperCoefficients.zeros(vol_basis, state_basis)
    if d == 0:
        vol = render_phantom(spec, np.zeros(spec.state_dims) if blobs is None else np.zeros(spec.state_dims),
                             blobs=blobs, grid_size=n, origin_shift=origin_shift) \
            if spec.state_dims == 0 or blobs is not None else render_phantom(spec, np.zeros(0))
        coeffs.values[..., 0] = analyze_volume(vol, vol_basis)
        report = {"held_out_rel_error": 0.0, "warning": False}
        return coeffs, report

    nodes = chebyshev_quad_nodes(n_state_nodes)
    cheb = chebyshev_values(nodes, q_max)  # (n_nodes, Q+1)
    scale = np.where(np.arange(q_max + 1) == 0, 1.0, 2.0) / n_state_nodes

    mi = state_basis.multi_indices  # (n_q, d)
    node_grid = _node_grid(nodes, d)  # (n_nodes^d, d)
    accum = np.zeros(coeffs.values.shape, dtype=np.complex128)
    for node_tau in node_grid:
        full_tau = _lift_tau(node_tau, spec.state_dims, blobs)
        vol = render_phantom(spec, full_tau, blobs=blobs, grid_size=n,
                             origin_shift=origin_shift)
        cube = analyze_volume(vol, vol_basis)
        w = np.ones(mi.shape[0])
        for axis in range(d):
            t_idx = np.searchsorted(nodes[::-1], node_tau[axis])
            t_idx = n_state_nodes - 1 - t_idx
            w = w * cheb[t_idx, mi[:, axis]] * scale[mi[:, axis]]
        accum += cube[..., None] * w[None, None, None, :]
    coeffs.values[:] = hermitian_symmetrize(accum)
    coeffs.values[~coeffs.active_mask] = 0.0

    errs = []
    for t in held_out:
        tau_local = np.full(d, t)
        full_tau = _lift_tau(tau_local, spec.state_dims, blobs)
        ref = render_phantom(spec, full_tau, blobs=blobs, grid_size=n,
                             origin_shift=origin_shift)
        ref_band = _synthesize_from_cube(analyze_volume(ref, vol_basis), vol_basis)
        syn = synthesize_volume(coeffs, tau_local)
        denom = np.linalg.norm(ref_band)
        errs.append(np.linalg.norm(syn - ref_band) / denom if denom > 0 else 0.0)
    rel = float(np.max(errs)) if errs else 0.0
    report = {"held_out_rel_error": rel, "warning": rel > 0.20}
    return coeffs, report


def _node_grid(nodes: np.ndarray, d: int) -> np.ndarray:
    grids = np.meshgrid(*([nodes] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _lift_tau(tau_local: np.ndarray, full_dims: int, blobs: list | None) -> np.ndarray:
    """Map component-local tau onto the phantom's full state vector."""
    if blobs is None:
        return tau_local
    dims_used = sorted({b.state_dims_used[0] for b in blobs if b.state_dims_used})
    full = np.zeros(full_dims)
    for local_axis, full_axis in enumerate(dims_used):
        full[full_axis] = tau_local[local_axis]
    return full


def _synthesize_from_cube(cube: np.ndarray, vol_basis: VolumeBasis) -> np.ndarray:
    hom = HyperCoefficients.zeros(vol_basis, StateBasis(dims=0))
    hom.values[..., 0] = cube
    return synthesize_volume(hom, np.zeros(0))
