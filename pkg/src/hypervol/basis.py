"""Band-limited spatial and state bases, volume synthesis, and the slice operator.

Fourier conventions, fixed project-wide:

* Real-space grids are cubic, even-sized, indexed by voxels x in
  {0, ..., N-1}, with the origin at the center voxel c0 = N // 2.
* A volume with coefficients a_k synthesizes as
      V(x) = sum_k a_k exp(+2 pi i k . (x - c0) / N)
  over integer frequencies k with |k| <= band_limit_shell.  Analysis is the
  inverse: a_k = (1/N^3) sum_x V(x) exp(-2 pi i k . (x - c0) / N).
* 2-D images use the same convention with 1/N^2 analysis normalization, so a
  central slice of the coefficient cube and the Fourier coefficients of an
  image live in the same units.
* In-plane frequencies are integer pairs j = (j1, j2); continuous frequencies
  are measured in cycles/voxel (j / N), physical ones in cycles/length
  (j / (N * pixel_size)).

Slice evaluation interpolates trilinearly on the spectrum of the zero-padded
volume (padding factor = ``oversample``).  The padded spectrum is periodic in
its index, so interpolation neighbors wrap modulo the padded size exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import fft as _sfft

from .errors import DomainError, InvariantError
from .geometry import check_unit_quat, quat_to_matrix

_fft_workers = 1


def set_fft_workers(n: int) -> None:
    """Set the worker count used for batched FFTs (results are worker-invariant)."""
    global _fft_workers
    _fft_workers = max(1, int(n))


def fftn_centered(a: np.ndarray, axes=(-3, -2, -1)) -> np.ndarray:
    """Unnormalized DFT with both index origins at the array center."""
    return np.fft.fftshift(
        _sfft.fftn(np.fft.ifftshift(a, axes=axes), axes=axes, workers=_fft_workers),
        axes=axes,
    )


def ifftn_centered(a: np.ndarray, axes=(-3, -2, -1)) -> np.ndarray:
    """Inverse of :func:`fftn_centered`, including the 1/size normalization."""
    return np.fft.fftshift(
        _sfft.ifftn(np.fft.ifftshift(a, axes=axes), axes=axes, workers=_fft_workers),
        axes=axes,
    )


def fft2_centered(a: np.ndarray) -> np.ndarray:
    return fftn_centered(a, axes=(-2, -1))


def ifft2_centered(a: np.ndarray) -> np.ndarray:
    return ifftn_centered(a, axes=(-2, -1))


@dataclass(frozen=True)
class VolumeBasis:
    """Geometry of the cubic grid and its retained Fourier ball.

    grid_size N must be even; the retained frequencies are the integer
    vectors k with |k| <= band_limit_shell (Euclidean norm).
    """

    grid_size: int
    pixel_size: float
    band_limit_shell: int
    oversample: int = 2

    def __post_init__(self):
        n, k = self.grid_size, self.band_limit_shell
        if n < 4:
            raise DomainError(f"grid_size must be >= 4, got {n}")
        if not (1 <= k <= n // 2):
            raise DomainError(f"band_limit_shell must satisfy 1 <= K <= N/2, got {k}")
        if self.oversample not in (1, 2, 4):
            raise DomainError(f"oversample must be 1, 2 or 4, got {self.oversample}")
        if not (self.pixel_size > 0):
            raise DomainError("pixel_size must be positive")

    @property
    def cube_size(self) -> int:
        return 2 * self.band_limit_shell + 1

    @property
    def padded_size(self) -> int:
        return self.oversample * self.grid_size


@dataclass(frozen=True)
class StateBasis:
    """Products of Chebyshev polynomials on the state hypercube [-1, 1]^dims.

    dims = 0 is the homogeneous case: a single constant basis function.
    """

    dims: int
    max_degree: int = 0

    def __post_init__(self):
        if self.dims < 0:
            raise DomainError("dims must be >= 0")
        if self.max_degree < 0:
            raise DomainError("max_degree must be >= 0")

    @property
    def n_functions(self) -> int:
        return (self.max_degree + 1) ** self.dims

    @property
    def multi_indices(self) -> np.ndarray:
        """(n_functions, dims) integer degrees, last dimension varying fastest."""
        return _state_multi_indices(self.dims, self.max_degree)

    @property
    def function_degrees(self) -> np.ndarray:
        """Per-function degree used by marching caps: max over dimensions."""
        mi = self.multi_indices
        if mi.shape[1] == 0:
            return np.zeros(1, dtype=np.int64)
        return mi.max(axis=1)


@lru_cache(maxsize=64)
def _state_multi_indices(dims: int, max_degree: int) -> np.ndarray:
    if dims == 0:
        return np.zeros((1, 0), dtype=np.int64)
    grids = np.meshgrid(*([np.arange(max_degree + 1)] * dims), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def chebyshev_values(x: np.ndarray, max_degree: int) -> np.ndarray:
    """T_0..T_Q at x via the recurrence T_{n+1} = 2 x T_n - T_{n-1}; shape (..., Q+1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape + (max_degree + 1,), dtype=np.float64)
    out[..., 0] = 1.0
    if max_degree >= 1:
        out[..., 1] = x
    for n in range(1, max_degree):
        out[..., n + 1] = 2.0 * x * out[..., n] - out[..., n - 1]
    return out


def eval_state_basis(basis: StateBasis, tau: np.ndarray) -> np.ndarray:
    """Evaluate all (Q+1)^d product basis functions at one state point."""
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    if basis.dims == 0:
        return np.ones(1)
    if tau.shape != (basis.dims,):
        raise DomainError(f"tau must have shape ({basis.dims},), got {tau.shape}")
    if np.any(np.abs(tau) > 1.0):
        raise DomainError(f"tau out of [-1,1]^d: {tau}")
    cheb = chebyshev_values(tau, basis.max_degree)  # (d, Q+1)
    vals = np.ones(1)
    for j in range(basis.dims):
        vals = np.multiply.outer(vals, cheb[j]).reshape(-1)
    return vals


def eval_state_basis_batch(basis: StateBasis, taus: np.ndarray) -> np.ndarray:
    """Batched version: taus (B, d) -> (B, n_functions)."""
    taus = np.asarray(taus, dtype=np.float64)
    if basis.dims == 0:
        return np.ones((taus.shape[0], 1))
    if taus.ndim != 2 or taus.shape[1] != basis.dims:
        raise DomainError(f"taus must have shape (B, {basis.dims})")
    if np.any(np.abs(taus) > 1.0):
        raise DomainError("tau out of [-1,1]^d")
    cheb = chebyshev_values(taus, basis.max_degree)  # (B, d, Q+1)
    vals = np.ones((taus.shape[0], 1))
    for j in range(basis.dims):
        vals = (vals[:, :, None] * cheb[:, j][:, None, :]).reshape(taus.shape[0], -1)
    return vals


# ---------------------------------------------------------------------------
# Retained-ball geometry (cached per band limit / grid size)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _cube_radius_grid(k_max: int):
    kk = np.arange(-k_max, k_max + 1)
    k1, k2, k3 = np.meshgrid(kk, kk, kk, indexing="ij")
    r = np.sqrt((k1 ** 2 + k2 ** 2 + k3 ** 2).astype(np.float64))
    return kk, k1, k2, k3, r


@lru_cache(maxsize=64)
def ball_mask(k_max: int) -> np.ndarray:
    """(C, C, C) bool mask of integer frequencies with |k| <= k_max."""
    _, _, _, _, r = _cube_radius_grid(k_max)
    m = r <= k_max + 1e-9
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def shell_radii(k_max: int) -> np.ndarray:
    _, _, _, _, r = _cube_radius_grid(k_max)
    r = r.copy()
    r.setflags(write=False)
    return r


@lru_cache(maxsize=64)
def half_space_mask(k_max: int) -> np.ndarray:
    """Canonical free half of the cube: k lexicographically positive (DC excluded)."""
    _, k1, k2, k3, _ = _cube_radius_grid(k_max)
    m = (k3 > 0) | ((k3 == 0) & (k2 > 0)) | ((k3 == 0) & (k2 == 0) & (k1 > 0))
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def _embed_flat_indices(n: int, k_max: int) -> np.ndarray:
    """Flat indices into the centered N^3 array for each cube entry (mod-N aliasing)."""
    kk = np.arange(-k_max, k_max + 1)
    pos = (kk + n // 2) % n
    p1, p2, p3 = np.meshgrid(pos, pos, pos, indexing="ij")
    idx = (p1 * n + p2) * n + p3
    idx = idx.ravel()
    idx.setflags(write=False)
    return idx


def make_active_mask(vol_basis: VolumeBasis, state_basis: StateBasis,
                     k_cap: int | None = None, q_cap: int | None = None) -> np.ndarray:
    """Per-(k, q) gate: inside the retained ball, shell <= k_cap, degree <= q_cap."""
    k = vol_basis.band_limit_shell
    k_cap = k if k_cap is None else min(int(k_cap), k)
    q_cap = state_basis.max_degree if q_cap is None else min(int(q_cap), state_basis.max_degree)
    radial = shell_radii(k) <= k_cap + 1e-9
    radial = radial & ball_mask(k)
    deg_ok = state_basis.function_degrees <= q_cap
    return radial[..., None] & deg_ok[None, None, None, :]


@dataclass
class HyperCoefficients:
    """Coefficient tensor a_{k,q} over (retained spatial frequency, state degree).

    ``values`` has shape (C, C, C, n_q) with C = 2*K+1 and is Hermitian in k for
    every q, so every synthesized volume is real.  Entries with
    ``active_mask`` False are exactly zero; frequency marching widens the mask
    in place rather than reallocating.
    """

    values: np.ndarray
    vol_basis: VolumeBasis
    state_basis: StateBasis
    active_mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        c = self.vol_basis.cube_size
        nq = self.state_basis.n_functions
        expected = (c, c, c, nq)
        if self.values.shape != expected:
            raise DomainError(f"values shape {self.values.shape} != {expected}")
        if self.active_mask is None:
            self.active_mask = make_active_mask(self.vol_basis, self.state_basis)
        if self.active_mask.shape != expected:
            raise DomainError("active_mask shape mismatch")

    @classmethod
    def zeros(cls, vol_basis: VolumeBasis, state_basis: StateBasis,
              k_cap: int | None = None, q_cap: int | None = None) -> "HyperCoefficients":
        c = vol_basis.cube_size
        vals = np.zeros((c, c, c, state_basis.n_functions), dtype=np.complex128)
        mask = make_active_mask(vol_basis, state_basis, k_cap, q_cap)
        return cls(vals, vol_basis, state_basis, mask)

    def copy(self) -> "HyperCoefficients":
        return HyperCoefficients(self.values.copy(), self.vol_basis,
                                 self.state_basis, self.active_mask.copy())

    def validate(self, tol: float = 0.0) -> None:
        mirrored = np.conj(self.values[::-1, ::-1, ::-1, :])
        scale = max(float(np.max(np.abs(self.values))), 1e-300)
        err = float(np.max(np.abs(self.values - mirrored)))
        if err > tol * scale:
            raise InvariantError(f"Hermitian symmetry violated (max dev {err:.3e})")
        if np.any(self.values[~self.active_mask] != 0):
            raise InvariantError("nonzero coefficient outside active mask")


def hermitian_symmetrize(values: np.ndarray) -> np.ndarray:
    """Project a cube-shaped tensor onto exact Hermitian symmetry in k."""
    return 0.5 * (values + np.conj(values[::-1, ::-1, ::-1]))


def fold_hermitian_gradient(t: np.ndarray) -> np.ndarray:
    """Fold a full-tensor derivative field into the free-parameter convention.

    Input t satisfies dF = Re[sum_k t_k da_k] over an unconstrained complex
    tensor.  The output g is Hermitian with, for k in the free half-space,
    Re(g_k) = dF/dRe(a_k) and Im(g_k) = dF/dIm(a_k) under the pairing
    a_{-k} = conj(a_k); at k = 0 the entry is the (real) dF/dRe(a_0).
    """
    g = np.conj(t) + t[::-1, ::-1, ::-1]
    c = t.shape[0] // 2
    g[c, c, c] = np.real(g[c, c, c]) * 0.5
    return g


class CoefficientPacking:
    """Bijection between masked Hermitian tensors and flat real vectors.

    The same gather packs both coefficient tensors and folded gradients, so
    samplers can treat theta as a plain real vector.
    """

    def __init__(self, mask: np.ndarray):
        if mask.ndim != 4:
            raise DomainError("mask must be 4-D (cube + state axis)")
        if not np.array_equal(mask, mask[::-1, ::-1, ::-1, :]):
            raise DomainError("mask must be Hermitian-symmetric in k")
        k_max = (mask.shape[0] - 1) // 2
        half = half_space_mask(k_max)[..., None] & mask
        c = k_max
        dc = np.zeros_like(mask)
        dc[c, c, c, :] = mask[c, c, c, :]
        self.mask = mask
        self._sel_re = (half | dc).ravel()
        self._sel_im = half.ravel()
        self._idx_re = np.flatnonzero(self._sel_re)
        self._idx_im = np.flatnonzero(self._sel_im)
        self.n_free = self._idx_re.size + self._idx_im.size
        self.shape = mask.shape

    def pack(self, values: np.ndarray) -> np.ndarray:
        flat = values.reshape(-1)
        return np.concatenate([flat.real[self._idx_re], flat.imag[self._idx_im]])

    def unpack(self, vec: np.ndarray) -> np.ndarray:
        n_re = self._idx_re.size
        flat = np.zeros(int(np.prod(self.shape)), dtype=np.complex128)
        flat[self._idx_re] = vec[:n_re]
        flat[self._idx_im] += 1j * vec[n_re:]
        arr = flat.reshape(self.shape)
        mirrored = np.conj(arr[::-1, ::-1, ::-1, :])
        keep = (self._sel_re | self._sel_im).reshape(self.shape)
        return np.where(keep, arr, mirrored)


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def _embed_cube(cube: np.ndarray, n: int) -> np.ndarray:
    """Place a (C,C,C,...) coefficient cube into centered N^3 Fourier arrays."""
    k_max = (cube.shape[0] - 1) // 2
    idx = _embed_flat_indices(n, k_max)
    extra = cube.shape[3:]
    out = np.zeros((n * n * n,) + extra, dtype=np.complex128)
    np.add.at(out, idx, cube.reshape((-1,) + extra))
    return out.reshape((n, n, n) + extra)


def _extract_cube(grid: np.ndarray, k_max: int) -> np.ndarray:
    n = grid.shape[0]
    idx = _embed_flat_indices(n, k_max)
    c = 2 * k_max + 1
    extra = grid.shape[3:]
    flat = grid.reshape((-1,) + extra)
    return flat[idx].reshape((c, c, c) + extra)


def contract_state(coeffs: HyperCoefficients, tau: np.ndarray) -> np.ndarray:
    """Sum the state axis against the basis functions at tau -> (C,C,C) cube."""
    p = eval_state_basis(coeffs.state_basis, tau)
    return coeffs.values @ p


def synthesize_volume(coeffs: HyperCoefficients, tau: np.ndarray) -> np.ndarray:
    """Real N^3 grid of the hyper-volume at one state point."""
    coeffs.validate(tol=1e-13)
    cube = contract_state(coeffs, tau)
    vol = _synthesize_cube_complex(cube, coeffs.vol_basis.grid_size)
    max_real = max(float(np.max(np.abs(vol.real))), 1e-300)
    max_imag = float(np.max(np.abs(vol.imag)))
    if max_imag > 1e-10 * max_real:
        raise InvariantError(
            f"synthesized volume not real: max|imag| = {max_imag:.3e} vs {max_real:.3e}"
        )
    return np.ascontiguousarray(vol.real)


def _synthesize_cube_complex(cube: np.ndarray, n: int) -> np.ndarray:
    spec = _embed_cube(cube, n)
    return ifftn_centered(spec) * float(n) ** 3


def analyze_volume(volume: np.ndarray, vol_basis: VolumeBasis) -> np.ndarray:
    """Coefficient cube of a real volume: masked, exactly Hermitian."""
    n = vol_basis.grid_size
    if volume.shape != (n, n, n):
        raise DomainError("volume shape mismatch")
    spec = fftn_centered(volume.astype(np.float64)) / float(n) ** 3
    cube = _extract_cube(spec, vol_basis.band_limit_shell)
    cube = hermitian_symmetrize(cube)
    cube[~ball_mask(vol_basis.band_limit_shell)] = 0.0
    return cube


# ---------------------------------------------------------------------------
# In-plane frequency geometry
# ---------------------------------------------------------------------------


class PlaneGeometry:
    """Centered N x N frequency-plane bookkeeping for one evaluation band.

    Planes are indexed [i1, i2] with j1 = i1 - N//2 along axis 0.  ``mate``
    denotes the Hermitian partner (-j mod N, centered); the unique half-plane
    keeps one representative per pair plus the self-conjugate points.
    """

    def __init__(self, n: int, pixel_size: float, k_band: int):
        self.n = n
        self.pixel_size = pixel_size
        self.k_band = k_band
        jj = np.arange(n) - n // 2
        j1, j2 = np.meshgrid(jj, jj, indexing="ij")
        j1, j2 = j1.ravel(), j2.ravel()
        r = np.hypot(j1, j2)
        m1 = ((-j1 + n // 2) % n) - n // 2
        m2 = ((-j2 + n // 2) % n) - n // 2
        in_band = r <= k_band + 1e-9
        key_self = j1 * (2 * n) + j2
        key_mate = m1 * (2 * n) + m2
        unique = key_self >= key_mate

        self.full_j = np.stack([j1, j2], axis=1)
        self.in_band_flat = np.flatnonzero(in_band)
        self.unique_flat = np.flatnonzero(in_band & unique)
        self.mate_flat_of_unique = ((m1 + n // 2) * n + (m2 + n // 2))[self.unique_flat]
        self.self_conj_unique = (key_self == key_mate)[self.unique_flat]

        ju = self.full_j[self.unique_flat]
        jf = self.full_j[self.in_band_flat]
        self.points_unique = np.concatenate([ju / n, np.zeros((ju.shape[0], 1))], axis=1)
        self.points_full = np.concatenate([jf / n, np.zeros((jf.shape[0], 1))], axis=1)
        self.j_unique = ju
        self.j_full = jf
        self.shell_unique = np.rint(np.hypot(ju[:, 0], ju[:, 1])).astype(np.int64)
        self.shell_full = np.rint(np.hypot(jf[:, 0], jf[:, 1])).astype(np.int64)
        self.omega_phys_unique = np.hypot(ju[:, 0], ju[:, 1]) / (n * pixel_size)

    def assemble_plane(self, unique_vals: np.ndarray) -> np.ndarray:
        """Full Hermitian (N, N) plane from values on the unique half.

        Self-conjugate points (DC and half-band axes) are real for any valid
        input and are projected onto the real axis exactly.
        """
        n = self.n
        vals = np.where(self.self_conj_unique, unique_vals.real + 0.0j, unique_vals)
        plane = np.zeros(n * n, dtype=np.complex128)
        plane[self.unique_flat] = vals
        plane[self.mate_flat_of_unique] = np.conj(vals)
        plane[self.unique_flat] = vals
        return plane.reshape(n, n)

    def take_unique(self, plane: np.ndarray) -> np.ndarray:
        return plane.reshape(-1)[self.unique_flat]

    def take_full(self, plane: np.ndarray) -> np.ndarray:
        return plane.reshape(-1)[self.in_band_flat]


@lru_cache(maxsize=32)
def plane_geometry(n: int, pixel_size: float, k_band: int) -> PlaneGeometry:
    return PlaneGeometry(n, pixel_size, k_band)


def full_plane_band(n: int) -> int:
    """A band radius covering every point of the N x N grid, corners included."""
    return int(np.ceil(np.hypot(n // 2, n // 2))) + 1


# ---------------------------------------------------------------------------
# Slice evaluation: padded-spectrum stack + trilinear gather/scatter
# ---------------------------------------------------------------------------


class SliceCache:
    """Padded spectra of the per-degree volumes, flattened for fast gathers."""

    def __init__(self, grids_flat: np.ndarray, m: int, vol_basis: VolumeBasis,
                 state_basis: StateBasis, q_indices: np.ndarray):
        self.grids = grids_flat  # (n_q_kept, M^3) complex128
        self.m = m
        self.vol_basis = vol_basis
        self.state_basis = state_basis
        self.q_indices = q_indices  # columns of the coefficient tensor kept here


def build_slice_cache(coeffs: HyperCoefficients, q_keep: np.ndarray | None = None) -> SliceCache:
    """Precompute the oversampled spectra used by slice gathers.

    q_keep selects state-degree columns (defaults to every column with any
    active coefficient; degree 0 is always kept).
    """
    vb = coeffs.vol_basis
    n, m = vb.grid_size, vb.padded_size
    if q_keep is None:
        any_active = coeffs.active_mask.any(axis=(0, 1, 2))
        any_active[0] = True
        q_keep = np.flatnonzero(any_active)
    q_keep = np.asarray(q_keep, dtype=np.int64)
    cube = np.ascontiguousarray(np.moveaxis(coeffs.values[..., q_keep], -1, 0))
    grids = _padded_spectrum(cube, n, m)
    return SliceCache(grids.reshape(q_keep.size, -1), m, vb, coeffs.state_basis, q_keep)


def _padded_spectrum(cube_stack: np.ndarray, n: int, m: int) -> np.ndarray:
    """(B,C,C,C) coefficient cubes -> (B,M,M,M) spectra of the padded volumes."""
    b = cube_stack.shape[0]
    spec = np.zeros((b, n, n, n), dtype=np.complex128)
    k_max = (cube_stack.shape[1] - 1) // 2
    idx = _embed_flat_indices(n, k_max)
    flat = spec.reshape(b, -1)
    np.add.at(flat, (slice(None), idx), cube_stack.reshape(b, -1))
    vols = ifftn_centered(spec) * float(n) ** 3
    lo = (m - n) // 2
    padded = np.zeros((b, m, m, m), dtype=np.complex128)
    padded[:, lo:lo + n, lo:lo + n, lo:lo + n] = vols
    return fftn_centered(padded) / float(n) ** 3


def _trilinear_taps(coords: np.ndarray, m: int):
    """Wrap-around trilinear taps: coords (..., 3) -> flat indices and weights (..., 8)."""
    i0 = np.floor(coords).astype(np.int64)
    frac = coords - i0
    shape = coords.shape[:-1]
    idx = np.empty(shape + (8,), dtype=np.int64)
    w = np.empty(shape + (8,), dtype=np.float64)
    half = m // 2
    for corner in range(8):
        bits = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        ix = (i0[..., 0] + bits[0] + half) % m
        iy = (i0[..., 1] + bits[1] + half) % m
        iz = (i0[..., 2] + bits[2] + half) % m
        idx[..., corner] = (ix * m + iy) * m + iz
        wx = frac[..., 0] if bits[0] else 1.0 - frac[..., 0]
        wy = frac[..., 1] if bits[1] else 1.0 - frac[..., 1]
        wz = frac[..., 2] if bits[2] else 1.0 - frac[..., 2]
        w[..., corner] = wx * wy * wz
    return idx, w


def rotated_coords(quats: np.ndarray, points: np.ndarray, m: int) -> np.ndarray:
    """Padded-grid coordinates of R^{-1} omega for each (rotation, plane point)."""
    rot = quat_to_matrix(np.atleast_2d(quats))
    u = np.einsum("bji,pj->bpi", rot, points)
    return u * m


def gather_planes(cache: SliceCache, quats: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear slice gather: (B rotations, P points) -> (B, P, n_q_kept)."""
    coords = rotated_coords(quats, points, cache.m)
    idx, w = _trilinear_taps(coords, cache.m)
    vals = cache.grids[:, idx]  # (n_q, B, P, 8)
    out = np.einsum("qbpc,bpc->bpq", vals, w, optimize=True)
    return out


def scatter_planes(cache_shape_m: int, coords_idx_w, weighted_vals: np.ndarray,
                   out_flat: np.ndarray) -> None:
    """Adjoint of the gather: accumulate weighted plane values onto the padded grid."""
    idx, w = coords_idx_w
    contrib = (weighted_vals[..., None] * w).reshape(-1)
    flat_idx = np.broadcast_to(idx, w.shape).reshape(-1)
    np.add.at(out_flat.real, flat_idx, contrib.real)
    np.add.at(out_flat.imag, flat_idx, contrib.imag)


def _scatter_core(m: int, quats: np.ndarray, points: np.ndarray,
                  vals_bpq: np.ndarray, out_q_flat: np.ndarray, square: bool) -> None:
    coords = rotated_coords(quats, points, m)
    idx, w = _trilinear_taps(coords, m)
    if square:
        w = w * w
    flat_idx = np.broadcast_to(idx[..., None, :], idx.shape[:2] + (vals_bpq.shape[2], 8)).reshape(-1)
    contrib = (vals_bpq[..., None] * w[:, :, None, :]).reshape(-1)
    nq = vals_bpq.shape[2]
    q_idx = np.broadcast_to(np.arange(nq)[None, None, :, None], idx.shape[:2] + (nq, 8)).reshape(-1)
    size = m * m * m
    joint = q_idx * size + flat_idx
    acc_re = np.bincount(joint, weights=contrib.real, minlength=nq * size)
    acc_im = np.bincount(joint, weights=contrib.imag, minlength=nq * size)
    out_q_flat += (acc_re + 1j * acc_im).reshape(nq, size)


def scatter_accumulate(m: int, quats: np.ndarray, points: np.ndarray,
                       vals_bpq: np.ndarray, out_q_flat: np.ndarray) -> None:
    """Accumulate per-particle plane residuals into per-degree padded grids.

    vals_bpq has shape (B, P, n_q); out_q_flat is (n_q, M^3) complex128.
    """
    _scatter_core(m, quats, points, vals_bpq, out_q_flat, square=False)


def scatter_accumulate_squared(m: int, quats: np.ndarray, points: np.ndarray,
                               vals_bpq: np.ndarray, out_q_flat: np.ndarray) -> None:
    """Squared-tap scatter used for Gauss-Newton curvature diagonals."""
    _scatter_core(m, quats, points, vals_bpq, out_q_flat, square=True)


@lru_cache(maxsize=32)
def spread_kernel_1d(n: int, m: int, half_width: int = 5) -> np.ndarray:
    """|D(off)|^2 of the padded synthesis kernel at small fine-grid offsets.

    D(off) = (1/N) sum_x exp(-2 pi i off x / M) over the centered N-window; a
    single retained coefficient responds on the padded lattice with these
    squared magnitudes around its own site.
    """
    x = np.arange(-(n // 2), n // 2)
    offs = np.arange(-half_width, half_width + 1)
    d = np.exp(-2j * np.pi * np.outer(offs, x) / m).sum(axis=1) / n
    out = np.abs(d) ** 2
    out.setflags(write=False)
    return out


def spread_curvature(grid_q: np.ndarray, n: int, m: int) -> np.ndarray:
    """Convolve per-degree curvature grids with the separable response kernel."""
    from scipy import ndimage as _ndi

    kern = spread_kernel_1d(n, m)
    nq = grid_q.shape[0]
    vols = np.ascontiguousarray(grid_q.real).reshape(nq, m, m, m)
    for axis in (1, 2, 3):
        vols = _ndi.convolve1d(vols, kern, axis=axis, mode="wrap")
    return vols.reshape(nq, -1)


def adjoint_from_scatter(scattered_q: np.ndarray, vol_basis: VolumeBasis) -> np.ndarray:
    """Finish the slice adjoint: padded grids -> coefficient cubes (C,C,C,n_q)."""
    n, m = vol_basis.grid_size, vol_basis.padded_size
    nq = scattered_q.shape[0]
    grids = scattered_q.reshape(nq, m, m, m)
    t = ifftn_centered(grids) * float(m) ** 3
    lo = (m - n) // 2
    t = t[:, lo:lo + n, lo:lo + n, lo:lo + n]
    spec = fftn_centered(t) / float(vol_basis.grid_size) ** 3
    cube = _extract_cube(np.moveaxis(spec, 0, -1), vol_basis.band_limit_shell)
    cube[~ball_mask(vol_basis.band_limit_shell)] = 0.0
    return cube


def eval_slice(coeffs: HyperCoefficients, rotation: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Central-slice Fourier samples of the hyper-volume at one pose and state.

    Returns the full N x N in-plane coefficient grid: trilinear interpolation
    of the oversampled spectrum at R^{-1} omega inside the band limit, exact
    zeros beyond it, Hermitian by construction.
    """
    rotation = check_unit_quat(rotation)
    vb = coeffs.vol_basis
    cube = contract_state(coeffs, tau)[..., None]
    grids = _padded_spectrum(np.moveaxis(cube, -1, 0), vb.grid_size, vb.padded_size)
    cache = SliceCache(grids.reshape(1, -1), vb.padded_size, vb, coeffs.state_basis,
                       np.array([0]))
    geom = plane_geometry(vb.grid_size, vb.pixel_size, vb.band_limit_shell)
    vals = gather_planes(cache, rotation[None], geom.points_unique)[0, :, 0]
    return geom.assemble_plane(vals)


def adjoint_slice(plane_values: np.ndarray, rotation: np.ndarray, tau: np.ndarray,
                  vol_basis: VolumeBasis, state_basis: StateBasis) -> np.ndarray:
    """Exact adjoint of :func:`eval_slice` with respect to the coefficient tensor."""
    rotation = check_unit_quat(rotation)
    n = vol_basis.grid_size
    if plane_values.shape != (n, n):
        raise DomainError(f"plane shape {plane_values.shape} != {(n, n)}")
    geom = plane_geometry(n, vol_basis.pixel_size, vol_basis.band_limit_shell)
    y = geom.take_full(np.asarray(plane_values, dtype=np.complex128))
    p = eval_state_basis(state_basis, tau)
    vals = y[None, :, None] * p[None, None, :]
    out = np.zeros((state_basis.n_functions, vol_basis.padded_size ** 3), dtype=np.complex128)
    scatter_accumulate(vol_basis.padded_size, np.atleast_2d(rotation), geom.points_full,
                       vals, out)
    return adjoint_from_scatter(out, vol_basis)


def rotate_coeffs(coeffs: HyperCoefficients, rotation: np.ndarray) -> HyperCoefficients:
    """Resample the coefficient tensor onto a rotated frequency lattice."""
    rotation = check_unit_quat(rotation)
    vb = coeffs.vol_basis
    cache = build_slice_cache(coeffs, q_keep=np.arange(coeffs.state_basis.n_functions))
    kk = np.arange(-vb.band_limit_shell, vb.band_limit_shell + 1)
    k1, k2, k3 = np.meshgrid(kk, kk, kk, indexing="ij")
    pts = np.stack([k1.ravel(), k2.ravel(), k3.ravel()], axis=1) / vb.grid_size
    vals = gather_planes(cache, rotation[None], pts)[0]  # (C^3, n_q)
    c = vb.cube_size
    new_vals = vals.reshape(c, c, c, -1)
    new_vals = hermitian_symmetrize(new_vals)
    new_vals[~ball_mask(vb.band_limit_shell)] = 0.0
    new_vals[~coeffs.active_mask] = 0.0
    return HyperCoefficients(new_vals, vb, coeffs.state_basis, coeffs.active_mask.copy())
