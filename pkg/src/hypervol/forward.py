"""Image formation: CTF, shift, contrast, noise, likelihood and its gradients.

The noiseless Fourier-domain image of a particle is

    I_hat(omega) = contrast * ctf(|omega|) * exp(-2 pi i omega . s) * slice(omega)

in the project's coefficient units (see basis module conventions).  Observed
images add per-shell complex Gaussian noise constrained to Hermitian symmetry
so the spatial image stays real.  The log-likelihood sums the unique
half-plane once; the value at the data fit is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import basis
from .basis import (
    HyperCoefficients,
    eval_state_basis,
    fft2_centered,
    ifft2_centered,
    plane_geometry,
)
from .errors import DomainError, InvariantError
from .geometry import check_unit_quat, quat_to_matrix, random_quats


@dataclass(frozen=True)
class CtfParams:
    """Weak-phase contrast transfer function with amplitude contrast and envelope.

    Lengths share one unit system with pixel_size (conventionally Angstrom).
    """

    defocus: float
    wavelength: float
    spherical_aberration: float
    amplitude_contrast: float
    b_factor: float = 0.0

    def __post_init__(self):
        if not (self.wavelength > 0):
            raise DomainError("wavelength must be positive")
        if not (0.0 <= self.amplitude_contrast <= 1.0):
            raise DomainError("amplitude_contrast must lie in [0, 1]")
        if self.b_factor < 0:
            raise DomainError("b_factor must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.defocus, self.wavelength, self.spherical_aberration,
                         self.amplitude_contrast, self.b_factor])

    @classmethod
    def from_array(cls, a) -> "CtfParams":
        return cls(*(float(v) for v in a))


def ctf_eval(ctf: CtfParams, omega) -> np.ndarray:
    """CTF value at 2-D physical frequencies (cycles/length); even in omega."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape[-1] != 2:
        raise DomainError("omega must have a trailing axis of size 2")
    k2 = np.sum(omega * omega, axis=-1)
    return ctf_eval_radial(ctf, np.sqrt(k2))


def ctf_eval_radial(ctf: CtfParams, k) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    k2 = k * k
    lam = ctf.wavelength
    gamma = (np.pi * lam * ctf.defocus * k2
             - 0.5 * np.pi * ctf.spherical_aberration * lam ** 3 * k2 * k2)
    alpha = ctf.amplitude_contrast
    env = np.exp(-ctf.b_factor * k2 / 4.0)
    return (-np.sqrt(1.0 - alpha ** 2) * np.sin(gamma) - alpha * np.cos(gamma)) * env


def ctf_eval_batch(defocus: np.ndarray, wavelength: float, cs: float, alpha: float,
                   b_factor: np.ndarray | float, k: np.ndarray) -> np.ndarray:
    """Vectorized CTF over particles: defocus (B,), k (P,) -> (B, P)."""
    k2 = (k * k)[None, :]
    lam = wavelength
    gamma = (np.pi * lam * defocus[:, None] * k2
             - 0.5 * np.pi * cs * lam ** 3 * k2 * k2)
    env = np.exp(-np.asarray(b_factor).reshape(-1, 1) * k2 / 4.0)
    return (-np.sqrt(1.0 - alpha ** 2) * np.sin(gamma) - alpha * np.cos(gamma)) * env


@dataclass
class PoseLatents:
    """Per-particle latent variables: rotation, state, in-plane shift, contrast."""

    rotation: np.ndarray
    tau: np.ndarray
    shift: np.ndarray
    contrast: float

    def __post_init__(self):
        self.rotation = check_unit_quat(np.asarray(self.rotation, dtype=np.float64))
        self.tau = np.atleast_1d(np.asarray(self.tau, dtype=np.float64))
        self.shift = np.asarray(self.shift, dtype=np.float64).reshape(2)
        if not (self.contrast > 0):
            raise DomainError("contrast must be positive")

    def validate_shift(self, max_shift: float) -> None:
        if np.max(np.abs(self.shift)) > max_shift + 1e-12:
            raise DomainError(f"shift {self.shift} exceeds max_shift {max_shift}")


def n_shells(n: int) -> int:
    """Number of integer radial shells on the centered N x N plane."""
    return int(np.ceil(np.sqrt(2.0) * (n // 2))) + 2


@dataclass
class NoiseModel:
    """Per-shell noise deviations sigma_k, indexed by integer radial shell."""

    sigma_per_shell: np.ndarray

    def __post_init__(self):
        self.sigma_per_shell = np.asarray(self.sigma_per_shell, dtype=np.float64)
        if np.any(self.sigma_per_shell <= 0):
            raise DomainError("all per-shell sigmas must be positive")

    @classmethod
    def flat(cls, sigma: float, grid_size: int) -> "NoiseModel":
        return cls(np.full(n_shells(grid_size), float(sigma)))

    def for_shells(self, shell_idx: np.ndarray) -> np.ndarray:
        idx = np.minimum(shell_idx, self.sigma_per_shell.size - 1)
        return self.sigma_per_shell[idx]


@dataclass
class ImagingParams:
    """Experiment-level latents: grid geometry, band limit, noise."""

    grid_size: int
    pixel_size: float
    k_max: int
    oversample: int
    noise: NoiseModel


@dataclass
class ParticleRecord:
    """One observed image (Fourier samples) plus its latents and fixed CTF."""

    y_hat: np.ndarray
    latents: PoseLatents
    ctf: CtfParams
    id: int = 0

    def __post_init__(self):
        n = self.y_hat.shape[0]
        if self.y_hat.shape != (n, n):
            raise DomainError("y_hat must be square")
        mate = ((-(np.arange(n) - n // 2) + n // 2) % n)
        dev = np.max(np.abs(self.y_hat - np.conj(self.y_hat[np.ix_(mate, mate)])))
        if dev > 1e-10 * max(float(np.max(np.abs(self.y_hat))), 1e-300):
            raise InvariantError(f"y_hat not Hermitian (max dev {dev:.3e})")
        if abs(self.y_hat[n // 2, n // 2].imag) != 0.0:
            raise InvariantError("DC sample has an imaginary component")


def _mirror_plane(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    mate = ((-(np.arange(n) - n // 2) + n // 2) % n)
    return a[..., mate, :][..., :, mate]


def hermitian_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """Unit complex noise: Re, Im ~ N(0, 1/2) iid with eta(-k) = conj(eta(k)).

    Built as the normalized spectrum of white real-space noise, then projected
    onto exact Hermitian symmetry; self-conjugate samples are real N(0, 1).
    """
    g = rng.standard_normal((n, n))
    eta = fft2_centered(g) / n
    eta = 0.5 * (eta + np.conj(_mirror_plane(eta)))
    for i, j in _self_conjugate_sites(n):
        eta[i, j] = eta[i, j].real
    return eta


def _self_conjugate_sites(n: int):
    """Plane sites equal to their own Hermitian mate (DC; plus axes when N even)."""
    half = (0, n // 2) if n % 2 == 0 else (n // 2,)
    if n % 2 == 0:
        return [(i, j) for i in (0, n // 2) for j in (0, n // 2)]
    return [(n // 2, n // 2)]


def pose_plane_factors(j: np.ndarray, shift: np.ndarray, contrast: float,
                       ctf_vals: np.ndarray, n: int) -> np.ndarray:
    """contrast * ctf * shift phase at integer plane frequencies j (P, 2)."""
    phase = np.exp(-2j * np.pi * (j @ np.asarray(shift, dtype=np.float64)) / n)
    return contrast * ctf_vals * phase


def shift_phase_batch(j: np.ndarray, shifts: np.ndarray, n: int) -> np.ndarray:
    """exp(-2 pi i j.s / N) for shifts (B, 2) and plane points j (P, 2) -> (B, P)."""
    return np.exp(-2j * np.pi * (shifts @ j.T) / n)


def predict_plane(coeffs: HyperCoefficients, latents: PoseLatents, ctf: CtfParams) -> np.ndarray:
    """Noiseless N x N Fourier image for a plain hyper-volume."""
    vb = coeffs.vol_basis
    sl = basis.eval_slice(coeffs, latents.rotation, latents.tau)
    geom = plane_geometry(vb.grid_size, vb.pixel_size, vb.band_limit_shell)
    n = vb.grid_size
    jj = np.arange(n) - n // 2
    j1, j2 = np.meshgrid(jj, jj, indexing="ij")
    k_phys = np.hypot(j1, j2) / (n * vb.pixel_size)
    ctf_vals = ctf_eval_radial(ctf, k_phys)
    phase = np.exp(-2j * np.pi * (j1 * latents.shift[0] + j2 * latents.shift[1]) / n)
    return latents.contrast * ctf_vals * phase * sl


def simulate_image(coeffs: HyperCoefficients, latents: PoseLatents, ctf: CtfParams,
                   noise: NoiseModel, seed: int, particle_id: int = 0) -> ParticleRecord:
    """Draw one noisy observation; bit-reproducible per (seed, particle_id)."""
    i_hat = predict_plane(coeffs, latents, ctf)
    n = coeffs.vol_basis.grid_size
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(particle_id)]))
    eta = hermitian_noise(rng, n)
    jj = np.arange(n) - n // 2
    j1, j2 = np.meshgrid(jj, jj, indexing="ij")
    shell = np.rint(np.hypot(j1, j2)).astype(np.int64)
    y_hat = i_hat + noise.for_shells(shell) * eta
    return ParticleRecord(y_hat=y_hat, latents=latents, ctf=ctf, id=particle_id)


def image_to_pixels(y_hat: np.ndarray) -> np.ndarray:
    """Real-space pixel grid of a Hermitian Fourier image (coefficient units)."""
    n = y_hat.shape[0]
    img = ifft2_centered(y_hat) * n * n
    return np.ascontiguousarray(img.real)


def pixels_to_image(pixels: np.ndarray) -> np.ndarray:
    n = pixels.shape[0]
    y = fft2_centered(pixels.astype(np.float64)) / (n * n)
    y = 0.5 * (y + np.conj(_mirror_plane(y)))
    for i, j in _self_conjugate_sites(n):
        y[i, j] = y[i, j].real
    return y


def log_likelihood(record: ParticleRecord, coeffs: HyperCoefficients,
                   noise: NoiseModel) -> float:
    """Gaussian data fit summed over the unique half-plane; 0 at a perfect fit."""
    vb = coeffs.vol_basis
    n = vb.grid_size
    if record.y_hat.shape != (n, n):
        raise DomainError("record grid does not match coefficients")
    if np.any(noise.sigma_per_shell == 0):
        raise DomainError("sigma must be nonzero")
    i_hat = predict_plane(coeffs, record.latents, record.ctf)
    geom_all = plane_geometry(n, vb.pixel_size, basis.full_plane_band(n))
    r = geom_all.take_unique(record.y_hat) - geom_all.take_unique(i_hat)
    sigma = noise.for_shells(geom_all.shell_unique)
    return float(-np.sum(np.abs(r) ** 2 / (2.0 * sigma ** 2)))


def grad_loglik_coeffs(record: ParticleRecord, coeffs: HyperCoefficients,
                       noise: NoiseModel) -> np.ndarray:
    """Exact gradient of log_likelihood in the free-parameter convention.

    Returns a coefficient-shaped Hermitian complex array; entries outside the
    active mask are zero (see basis.fold_hermitian_gradient for the packing).
    """
    vb = coeffs.vol_basis
    n = vb.grid_size
    geom = plane_geometry(n, vb.pixel_size, vb.band_limit_shell)
    i_hat = predict_plane(coeffs, record.latents, record.ctf)
    r_u = geom.take_unique(record.y_hat) - geom.take_unique(i_hat)
    sigma = noise.for_shells(geom.shell_unique)
    ctf_vals = ctf_eval_radial(record.ctf, geom.omega_phys_unique)
    c_u = pose_plane_factors(geom.j_unique, record.latents.shift,
                             record.latents.contrast, ctf_vals, n)
    v = np.conj(r_u) * c_u / sigma ** 2

    p = eval_state_basis(coeffs.state_basis, record.latents.tau)
    vals = np.conj(v)[None, :, None] * p[None, None, :]
    out = np.zeros((coeffs.state_basis.n_functions, vb.padded_size ** 3),
                   dtype=np.complex128)
    basis.scatter_accumulate(vb.padded_size, record.latents.rotation[None],
                             geom.points_unique, vals, out)
    t = np.conj(basis.adjoint_from_scatter(out, vb))
    g = basis.fold_hermitian_gradient(t)
    g[~coeffs.active_mask] = 0.0
    return g


def project_real_space_oracle(volume: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Test oracle: rotate the grid by trilinear resampling, sum along z."""
    rotation = check_unit_quat(rotation)
    n = volume.shape[0]
    c0 = n // 2
    rot = quat_to_matrix(rotation)
    x = np.arange(n) - c0
    xx, yy, zz = np.meshgrid(x, x, x, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=0).reshape(3, -1)
    src = rot.T @ pts + c0
    rotated = ndimage.map_coordinates(volume, src.reshape(3, n, n, n), order=1, cval=0.0, mode='grid-constant')
    return rotated.sum(axis=2)


@dataclass
class LatentsDistribution:
    """Sampling distribution of per-particle latents for synthetic datasets.

    Rotations uniform on SO(3); tau uniform on [-1,1]^d; shifts Gaussian,
    rejection-truncated to the max_shift box; contrast log-normal.
    """

    state_dims: int
    shift_sigma: float = 1.5
    max_shift: float = 4.0
    contrast_sigma_log: float = 0.1

    def sample(self, rng: np.random.Generator, count: int):
        quats = random_quats(rng, count)
        taus = rng.uniform(-1.0, 1.0, size=(count, self.state_dims))
        shifts = rng.standard_normal((count, 2)) * self.shift_sigma
        bad = np.max(np.abs(shifts), axis=1) > self.max_shift
        while np.any(bad):
            shifts[bad] = rng.standard_normal((int(bad.sum()), 2)) * self.shift_sigma
            bad = np.max(np.abs(shifts), axis=1) > self.max_shift
        amps = np.exp(rng.standard_normal(count) * self.contrast_sigma_log)
        return quats, taus, shifts, amps


@dataclass
class CtfDistribution:
    """Per-particle CTF draw: defocus uniform in a range, the rest shared."""

    wavelength: float = 0.025
    spherical_aberration: float = 2.7e7
    amplitude_contrast: float = 0.07
    b_factor: float = 0.0
    defocus_min: float = 10000.0
    defocus_max: float = 20000.0

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        defocus = rng.uniform(self.defocus_min, self.defocus_max, size=count)
        out = np.empty((count, 5))
        out[:, 0] = defocus
        out[:, 1] = self.wavelength
        out[:, 2] = self.spherical_aberration
        out[:, 3] = self.amplitude_contrast
        out[:, 4] = self.b_factor
        return out


def calibrate_snr(source, latents_dist: LatentsDistribution, ctf_dist: CtfDistribution,
                  target_snr: float, n_probe: int = 500, seed: int = 0) -> NoiseModel:
    """Flat noise level achieving a target per-pixel SNR.

    ``source`` is either a HyperCoefficients or a (model, theta) pair with the
    model batch interface.  SNR = mean clean-image pixel power / noise pixel
    power; a flat spectral sigma contributes sigma^2 N^2 power per pixel.
    """
    if not (target_snr > 0):
        raise DomainError("target_snr must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7001]))
    if isinstance(source, HyperCoefficients):
        from .model import PlainHyperModel, PriorSpec

        model = PlainHyperModel(source.vol_basis, source.state_basis, PriorSpec())
        theta = {"main": source.values}
    else:
        model, theta = source
    n = model.grid_size
    quats, taus, shifts, amps = latents_dist.sample(rng, n_probe)
    ctf_rows = ctf_dist.sample(rng, n_probe)
    geom = plane_geometry(n, model.pixel_size, model.k_max)
    cache = model.build_cache(theta)
    power = 0.0
    chunk = 128
    for lo in range(0, n_probe, chunk):
        hi = min(lo + chunk, n_probe)
        sl = model.slice_batch(cache, quats[lo:hi], taus[lo:hi], geom.points_unique)
        ctf_vals = ctf_eval_batch(ctf_rows[lo:hi, 0], ctf_rows[0, 1], ctf_rows[0, 2],
                                  ctf_rows[0, 3], ctf_rows[lo:hi, 4], geom.omega_phys_unique)
        phase = shift_phase_batch(geom.j_unique, shifts[lo:hi], n)
        i_u = amps[lo:hi, None] * ctf_vals * phase * sl
        for b in range(hi - lo):
            plane = geom.assemble_plane(i_u[b])
            img = image_to_pixels(plane)
            power += float(np.mean(img ** 2))
    power /= n_probe
    if power <= 0:
        raise DomainError("zero signal power; cannot calibrate SNR")
    sigma = np.sqrt(power / (target_snr * n * n))
    return NoiseModel.flat(sigma, n)
