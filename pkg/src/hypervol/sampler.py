"""MCMC engine: per-particle random-walk MH, MALA/HMC over coefficients,
frequency marching, and the minibatch approximate mode.

Update flow per iteration: particle blocks propose and accept latents for all
(or a batch of) particles against the current theta; theta blocks then update
the coefficients with the particles frozen.  All randomness is drawn from
streams keyed by (seed, iteration, block), so runs are reproducible and
worker-count invariant: chunk boundaries are fixed, per-chunk arithmetic is
self-contained, and cross-chunk reductions happen in chunk order.

Only sgd_approx_step bypasses the Hastings correction; it is the one
deliberately non-reversible update and is labeled approximate everywhere.
"""

from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import basis
from .basis import plane_geometry
from .errors import DomainError, InvariantError
from .forward import ctf_eval_batch, shift_phase_batch
from .geometry import quat_mul, small_rotation_quats

CHUNK = 128  # fixed particle chunk; never tied to the worker count


def hastings_ratio(log_h_new: float, log_h_old: float, log_q_forward: float,
                   log_q_backward: float) -> float:
    """min(1, exp(log ratio)), computed in log space."""
    terms = np.array([log_h_new, log_h_old, log_q_forward, log_q_backward])
    if np.any(np.isnan(terms)):
        raise InvariantError("NaN in Hastings ratio inputs")
    log_r = log_h_new + log_q_backward - log_h_old - log_q_forward
    if log_r >= 0.0:
        return 1.0
    return float(np.exp(log_r))


# ---------------------------------------------------------------------------
# Generic vector-space MALA / HMC (also used on analytic test targets)
# ---------------------------------------------------------------------------


def mala_step(x, f_x, g_x, target, step_sigma, precond_diag, rng):
    """One MALA update on a real vector; returns (x, f, g, accepted).

    target(x) -> (log density, gradient).  precond_diag is the positive
    diagonal of the preconditioner A; the proposal is
    x' = x + (sigma^2/2) A g + sigma sqrt(A) w.
    """
    a = np.asarray(precond_diag, dtype=np.float64)
    if np.any(a <= 0):
        raise DomainError("preconditioner diagonal must be positive")
    s2 = step_sigma ** 2
    noise = rng.standard_normal(x.size)
    x_prop = x + 0.5 * s2 * a * g_x + step_sigma * np.sqrt(a) * noise
    f_prop, g_prop = target(x_prop)
    if not np.all(np.isfinite(g_prop)):
        raise InvariantError("non-finite gradient in MALA proposal")
    # Asymmetric Gaussian proposal densities, up to the shared normalization.
    d_fwd = x_prop - x - 0.5 * s2 * a * g_x
    d_bwd = x - x_prop - 0.5 * s2 * a * g_prop
    log_q_fwd = -float(np.sum(d_fwd * d_fwd / a)) / (2.0 * s2)
    log_q_bwd = -float(np.sum(d_bwd * d_bwd / a)) / (2.0 * s2)
    alpha = hastings_ratio(f_prop, f_x, log_q_fwd, log_q_bwd)
    if rng.uniform() < alpha:
        return x_prop, f_prop, g_prop, True
    return x, f_x, g_x, False


def leapfrog(x, p, g_x, target_grad, eps, n_steps, mass_diag):
    """Standard leapfrog on H = -f(x) + p.M^-1.p/2; returns (x, p, g, f)."""
    inv_m = 1.0 / mass_diag
    f = None
    for _ in range(n_steps):
        p = p + 0.5 * eps * g_x
        x = x + eps * inv_m * p
        f, g_x = target_grad(x)
        p = p + 0.5 * eps * g_x
    return x, p, g_x, f


def hmc_step(x, f_x, g_x, target, step_eps, n_leapfrog, mass_diag, rng,
             divergence_threshold: float = 1000.0):
    """One HMC update; returns (x, f, g, accepted, diverged)."""
    if n_leapfrog < 1:
        raise DomainError("n_leapfrog must be >= 1")
    m = np.asarray(mass_diag, dtype=np.float64)
    p0 = rng.standard_normal(x.size) * np.sqrt(m)
    h0 = -f_x + 0.5 * float(np.sum(p0 * p0 / m))
    x_new, p_new, g_new, f_new = leapfrog(x, p0, g_x, target, step_eps, n_leapfrog, m)
    h1 = -f_new + 0.5 * float(np.sum(p_new * p_new / m))
    dh = h1 - h0
    if not np.isfinite(dh) or abs(dh) > divergence_threshold:
        return x, f_x, g_x, False, True
    if np.log(rng.uniform()) < -dh:
        return x_new, f_new, g_new, True, False
    return x, f_x, g_x, False, False


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass
class Block:
    kind: str  # particle_mh | theta_mala | theta_hmc | theta_sgd
    repeats: int = 1
    batch_fraction: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("particle_mh", "theta_mala", "theta_hmc", "theta_sgd"):
            raise DomainError(f"unknown block kind {self.kind}")
        if not (0.0 < self.batch_fraction <= 1.0):
            raise DomainError("batch_fraction must lie in (0, 1]")
        if self.repeats < 1:
            raise DomainError("repeats must be >= 1")


@dataclass
class UpdateSchedule:
    blocks: list[Block]


@dataclass
class MarchingSchedule:
    """Stage table: (start_iteration, spatial shell cap, state degree cap)."""

    stages: list[tuple[int, int, int]]

    def __post_init__(self):
        starts = [s[0] for s in self.stages]
        if sorted(starts) != starts:
            raise DomainError("stage boundaries must be sorted")
        ks = [s[1] for s in self.stages]
        qs = [s[2] for s in self.stages]
        if any(b < a for a, b in zip(ks, ks[1:])) or any(b < a for a, b in zip(qs, qs[1:])):
            raise DomainError("K_active and Q_active must be nondecreasing")

    @classmethod
    def single(cls, k_active: int, q_active: int) -> "MarchingSchedule":
        return cls([(0, k_active, q_active)])

    def stage_index(self, iteration: int) -> int:
        idx = 0
        for i, (start, _, _) in enumerate(self.stages):
            if iteration >= start:
                idx = i
        return idx

    def caps(self, iteration: int) -> tuple[int, int]:
        _, k, q = self.stages[self.stage_index(iteration)]
        return k, q


def advance_marching(chain: "ChainState", marching: MarchingSchedule) -> tuple[int, int]:
    """Apply the stage caps for the chain's iteration; activation only widens."""
    k, q = marching.caps(chain.iteration)
    if chain.k_active is not None and (k < chain.k_active or q < chain.q_active):
        raise InvariantError("marching must never deactivate coefficients")
    chain.k_active, chain.q_active = k, q
    return k, q


# ---------------------------------------------------------------------------
# Chain state and the banded data view
# ---------------------------------------------------------------------------


@dataclass
class ChainState:
    """Full sampler state; serializable as one posterior sample."""

    theta: dict
    quats: np.ndarray
    taus: np.ndarray
    shifts: np.ndarray
    amps: np.ndarray
    iteration: int = 0
    seed: int = 0
    k_active: int | None = None
    q_active: int | None = None
    stats: dict = field(default_factory=dict)

    def n_particles(self) -> int:
        return self.quats.shape[0]

    def decision_digest(self) -> str:
        return self.stats.get("digest", "")

    def record_decisions(self, bits: np.ndarray) -> None:
        h = hashlib.blake2b(self.stats.get("digest", "").encode(), digest_size=16)
        h.update(np.ascontiguousarray(bits, dtype=np.uint8).tobytes())
        self.stats["digest"] = h.hexdigest()


class EngineData:
    """Banded per-particle observations ready for vectorized likelihoods."""

    def __init__(self, pixels: np.ndarray, ctf_rows: np.ndarray, noise,
                 pixel_size: float, k_band: int):
        from .forward import pixels_to_image

        n_particles, n, _ = pixels.shape
        self.n = n
        self.k_band = k_band
        self.geom = plane_geometry(n, pixel_size, k_band)
        self.points = self.geom.points_unique
        self.j = self.geom.j_unique
        sigma = noise.for_shells(self.geom.shell_unique)
        self.w = 1.0 / (2.0 * sigma ** 2)
        self.inv_var = 1.0 / sigma ** 2
        self.ctf_rows = ctf_rows
        self.ctf_u = ctf_eval_batch(ctf_rows[:, 0], float(ctf_rows[0, 1]),
                                    float(ctf_rows[0, 2]), float(ctf_rows[0, 3]),
                                    ctf_rows[:, 4], self.geom.omega_phys_unique)
        self.y_u = np.empty((n_particles, self.points.shape[0]), dtype=np.complex128)
        self.const = np.empty(n_particles)
        geom_all = plane_geometry(n, pixel_size, basis.full_plane_band(n))
        sigma_all = noise.for_shells(geom_all.shell_unique)
        in_band = np.isin(geom_all.unique_flat, self.geom.unique_flat)
        w_out = 1.0 / (2.0 * sigma_all[~in_band] ** 2)
        for i in range(n_particles):
            y = pixels_to_image(pixels[i])
            yu_all = geom_all.take_unique(y)
            self.y_u[i] = y.reshape(-1)[self.geom.unique_flat]
            self.const[i] = -float(np.sum(np.abs(yu_all[~in_band]) ** 2 * w_out))


def _pose_coeff(engine: EngineData, idx, shifts, amps):
    phase = shift_phase_batch(engine.j, shifts, engine.n)
    return amps[:, None] * engine.ctf_u[idx] * phase


def _loglik_from_islice(engine: EngineData, idx, i_vals) -> np.ndarray:
    r = engine.y_u[idx] - i_vals
    return -np.sum((r.real ** 2 + r.imag ** 2) * engine.w[None, :], axis=1)


# ---------------------------------------------------------------------------
# Particle Metropolis-Hastings sweep
# ---------------------------------------------------------------------------


@dataclass
class ProposalScales:
    rot: float = 0.08
    tau: float = 0.12
    shift: float = 0.4
    amp: float = 0.05

    def as_dict(self):
        return {"rot": self.rot, "tau": self.tau, "shift": self.shift, "amp": self.amp}


@dataclass
class LatentPriors:
    shift_sigma: float = 1.5
    max_shift: float = 4.0
    contrast_sigma_log: float = 0.1


def _reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold a random-walk proposal back into [lo, hi]; an involution, so the
    folded kernel stays symmetric."""
    span = hi - lo
    y = np.mod(x - lo, 2.0 * span)
    y = np.where(y > span, 2.0 * span - y, y)
    return lo + y


def _draw_proposals(rng: np.random.Generator, count: int, state_dim: int,
                    scales: ProposalScales) -> dict:
    draws = {
        "rot_dq": small_rotation_quats(rng, count, scales.rot),
        "rot_u": rng.uniform(size=count),
        "shift_z": rng.standard_normal((count, 2)) * scales.shift,
        "shift_u": rng.uniform(size=count),
        "amp_z": rng.standard_normal(count) * scales.amp,
        "amp_u": rng.uniform(size=count),
    }
    if state_dim > 0:
        draws["tau_z"] = rng.standard_normal((count, state_dim)) * scales.tau
        draws["tau_u"] = rng.uniform(size=count)
    return draws


def mh_sweep_chunk(model, cache, engine: EngineData, chain: ChainState, idx: np.ndarray,
                   draws: dict, priors: LatentPriors) -> dict:
    """Vectorized MH updates (rotation, tau, shift, contrast) for one chunk.

    Mutates the chain arrays at idx; returns per-sub-block acceptance counts
    and the decision bits.
    """
    pts = engine.points
    quats = chain.quats[idx]
    taus = chain.taus[idx]
    shifts = chain.shifts[idx]
    amps = chain.amps[idx]
    b = idx.size
    d = taus.shape[1]

    vals, parts = model.slice_batch(cache, quats, taus, pts, return_parts=True)
    c = _pose_coeff(engine, idx, shifts, amps)
    ll = _loglik_from_islice(engine, idx, c * vals)
    accepts = {}
    bits = []

    # Rotation: symmetric local random walk, uniform orientation prior.
    dq = draws["rot_dq"][idx]
    q_prop = quat_mul(dq, quats)
    q_prop /= np.linalg.norm(q_prop, axis=1, keepdims=True)
    vals_prop, parts_prop = model.slice_batch(cache, q_prop, taus, pts, return_parts=True)
    ll_prop = _loglik_from_islice(engine, idx, c * vals_prop)
    acc = np.log(draws["rot_u"][idx]) < (ll_prop - ll)
    quats = np.where(acc[:, None], q_prop, quats)
    vals = np.where(acc[:, None], vals_prop, vals)
    parts = _merge_parts(model, parts, parts_prop, acc)
    ll = np.where(acc, ll_prop, ll)
    accepts["rot"] = (int(acc.sum()), b)
    bits.append(acc)

    # State: random walk reflected at the hypercube boundary, uniform prior.
    if d > 0:
        tau_prop = _reflect(taus + draws["tau_z"][idx], -1.0, 1.0)
        vals_prop = model.slice_from_parts(cache, parts, quats, tau_prop, pts)
        ll_prop = _loglik_from_islice(engine, idx, c * vals_prop)
        acc = np.log(draws["tau_u"][idx]) < (ll_prop - ll)
        taus = np.where(acc[:, None], tau_prop, taus)
        vals = np.where(acc[:, None], vals_prop, vals)
        ll = np.where(acc, ll_prop, ll)
        accepts["tau"] = (int(acc.sum()), b)
        bits.append(acc)

    # Shift: reflected walk in the max-shift box, Gaussian prior.
    sh_prop = _reflect(shifts + draws["shift_z"][idx], -priors.max_shift, priors.max_shift)
    c_prop = _pose_coeff(engine, idx, sh_prop, amps)
    ll_prop = _loglik_from_islice(engine, idx, c_prop * vals)
    dprior = -(np.sum(sh_prop ** 2, axis=1) - np.sum(shifts ** 2, axis=1)) / (2.0 * priors.shift_sigma ** 2)
    acc = np.log(draws["shift_u"][idx]) < (ll_prop - ll + dprior)
    shifts = np.where(acc[:, None], sh_prop, shifts)
    c = np.where(acc[:, None], c_prop, c)
    ll = np.where(acc, ll_prop, ll)
    accepts["shift"] = (int(acc.sum()), b)
    bits.append(acc)

    # Contrast: log-normal walk; prior log-normal(0, sigma_log). The walk's
    # Jacobian enters log_q and cancels the prior's 1/a factor exactly.
    amp_prop = amps * np.exp(draws["amp_z"][idx])
    ratio = amp_prop / amps
    ll_prop = _loglik_from_islice(engine, idx, (c * ratio[:, None]) * vals)
    s2 = priors.contrast_sigma_log ** 2
    dprior = (-(np.log(amp_prop) ** 2 - np.log(amps) ** 2) / (2.0 * s2)
              - np.log(amp_prop) + np.log(amps))
    log_q_corr = np.log(amp_prop) - np.log(amps)
    acc = np.log(draws["amp_u"][idx]) < (ll_prop - ll + dprior + log_q_corr)
    amps = np.where(acc, amp_prop, amps)
    c = np.where(acc[:, None], c * ratio[:, None], c)
    ll = np.where(acc, ll_prop, ll)
    accepts["amp"] = (int(acc.sum()), b)
    bits.append(acc)

    chain.quats[idx] = quats
    chain.taus[idx] = taus
    chain.shifts[idx] = shifts
    chain.amps[idx] = amps
    chain.stats["loglik"][idx] = ll
    return {"accepts": accepts, "bits": np.concatenate(bits)}


def _merge_parts(model, parts_old, parts_new, acc):
    """Keep gathered slice parts consistent with per-particle accept flags."""
    if isinstance(parts_old, dict):  # plain model
        g = np.where(acc[:, None, None], parts_new["gathered"], parts_old["gathered"])
        return {"gathered": g, "p": parts_old["p"]}
    merged = []
    for po, pn in zip(parts_old, parts_new):
        merged.append({
            "gathered": np.where(acc[:, None, None], pn["gathered"], po["gathered"]),
        })
    return merged


def mh_update_particle(i: int, chain: ChainState, model, engine: EngineData,
                       scales: ProposalScales, rng: np.random.Generator,
                       priors: LatentPriors | None = None) -> dict:
    """Single-particle MH update: the one-element case of the chunk sweep."""
    priors = priors if priors is not None else LatentPriors()
    n = chain.n_particles()
    draws = _draw_proposals(rng, 1, chain.taus.shape[1], scales)
    full = {}
    for key, val in draws.items():
        arr = np.zeros((n,) + val.shape[1:], dtype=val.dtype)
        arr[i] = val[0]
        full[key] = arr
    cache = model.build_cache(chain.theta, q_cap=chain.q_active)
    out = mh_sweep_chunk(model, cache, engine, chain, np.array([i]), full, priors)
    return out


# ---------------------------------------------------------------------------
# Theta updates over the packed free vector
# ---------------------------------------------------------------------------


class ThetaTarget:
    """Log posterior and gradient of the packed coefficient vector.

    Evaluations sweep the whole dataset (or a batch) in fixed chunks; the
    gather stage can run on a thread pool, scatters and reductions stay in
    chunk order so results are worker-count invariant.
    """

    def __init__(self, model, engine: EngineData, chain: ChainState,
                 k_cap, q_cap, threads: int = 1, batch_idx: np.ndarray | None = None,
                 scale_to_full: bool = False):
        self.model = model
        self.engine = engine
        self.chain = chain
        self.k_cap = k_cap
        self.q_cap = q_cap
        self.threads = threads
        self.packing = model.packing(k_cap, q_cap)
        n = chain.n_particles()
        self.batch_idx = np.arange(n) if batch_idx is None else batch_idx
        self.scale = (n / self.batch_idx.size) if scale_to_full else 1.0

    def __call__(self, vec: np.ndarray, want_grad: bool = True, want_ll: bool = False):
        theta = self.packing.unpack(vec, base_theta=self.chain.theta)
        cache = self.model.build_cache(theta, q_cap=self.q_cap)
        acc = self.model.new_accumulator(q_cap=self.q_cap) if want_grad else None
        idx_all = self.batch_idx
        lls = np.empty(idx_all.size)
        chunks = [idx_all[lo:lo + CHUNK] for lo in range(0, idx_all.size, CHUNK)]

        def eval_chunk(idx):
            pts = self.engine.points
            vals = self.model.slice_batch(cache, self.chain.quats[idx],
                                          self.chain.taus[idx], pts)
            c = _pose_coeff(self.engine, idx, self.chain.shifts[idx], self.chain.amps[idx])
            i_vals = c * vals
            r = self.engine.y_u[idx] - i_vals
            ll = -np.sum((r.real ** 2 + r.imag ** 2) * self.engine.w[None, :], axis=1)
            v = np.conj(r) * c * self.engine.inv_var[None, :] if want_grad else None
            return ll, v, idx

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(eval_chunk, chunks))
        else:
            results = [eval_chunk(idx) for idx in chunks]

        pos = 0
        for ll, v, idx in results:
            lls[pos:pos + idx.size] = ll
            if want_grad:
                self.model.accumulate_gradient(acc, cache, self.chain.quats[idx],
                                               self.chain.taus[idx], self.engine.points,
                                               v)
            pos += idx.size
        log_h = self.scale * float(np.sum(lls)) + self.model.log_prior(theta)
        out_grad = None
        if want_grad:
            grad_theta = self.model.finish_gradient(acc, k_cap=self.k_cap, q_cap=self.q_cap)
            gp = self.model.grad_log_prior(theta)
            for key in grad_theta:
                grad_theta[key] = self.scale * grad_theta[key] + gp[key]
            out_grad = self.packing.pack(grad_theta)
        if want_ll:
            return log_h, out_grad, lls
        return log_h, out_grad

    def curvature_diag(self) -> np.ndarray:
        """Gauss-Newton diagonal of the data term plus the prior curvature."""
        acc = self.model.new_accumulator(q_cap=self.q_cap)
        idx_all = self.batch_idx
        for lo in range(0, idx_all.size, CHUNK):
            idx = idx_all[lo:lo + CHUNK]
            w2 = (self.chain.amps[idx, None] * self.engine.ctf_u[idx]) ** 2 \
                * self.engine.inv_var[None, :]
            self.model.accumulate_curvature(acc, self.chain.quats[idx],
                                            self.chain.taus[idx], self.engine.points, w2)
        curv_theta = self.model.finish_curvature(acc, k_cap=self.k_cap, q_cap=self.q_cap)
        curv = self.packing.pack_real_pairs(curv_theta) * self.scale
        prior_curv = self._prior_curvature()
        total = curv + prior_curv
        floor = max(1e-12, 1e-6 * float(np.median(total[total > 0])) if np.any(total > 0) else 1e-12)
        return np.maximum(total, floor)

    def _prior_curvature(self) -> np.ndarray:
        fields = {}
        for name, (vb, sb) in self.model.pool_bases().items():
            spec = self.model.prior_for(name)
            w = spec.weight_tensor(vb, sb)
            if spec.adjacent_state_penalty != 0.0 and sb.dims > 0:
                m = spec.adjacent_matrix(sb)
                w = w + spec.adjacent_state_penalty * np.diag(m)[None, None, None, :]
            fields[name] = basis.fold_hermitian_gradient((2.0 * w).astype(np.complex128)).real
        if "__traj__" in self.chain.theta:
            fields["__traj__"] = np.ones_like(self.chain.theta["__traj__"])
        return self.packing.pack_real_pairs(fields)


def burnin_climb(target: "ThetaTarget", vec: np.ndarray, f_x: float, g_x: np.ndarray,
                 precond_diag: np.ndarray, max_steps: int = 25):
    """Preconditioned ascent toward the conditional mode (burn-in only).

    Newly activated coefficients start far downhill after a marching advance;
    plain MALA tuning is uninformative there because every proposal accepts.
    A few diagonal-Newton steps land near the mode first.  This reuses the
    approximate-mode update (no Hastings correction) and runs only inside
    burn-in, so the post-burn-in kernel is untouched.
    """
    x, f, g = vec, f_x, g_x
    step = 0.5
    for _ in range(max_steps):
        x_try = x + step * precond_diag * g
        f_try, g_try = target(x_try)
        if f_try > f:
            gain = f_try - f
            x, f, g = x_try, f_try, g_try
            step = min(step * 1.3, 1.5)
            if gain < 2e-3 * max(abs(f), 1.0):
                break
        else:
            step *= 0.4
            if step < 1e-3:
                break
    return x, f, g


def tune_theta_step(target: "ThetaTarget", vec: np.ndarray, f_x: float, g_x: np.ndarray,
                    precond_diag: np.ndarray, rng: np.random.Generator,
                    sigma0: float, goal: float = 0.57, rounds: int = 8) -> float:
    """Burn-in-only geometric search for a MALA step near the target rate.

    Estimates the expected acceptance at each trial scale from two fresh
    proposals without moving the chain; the fine-grained exp(kappa * ...)
    adaptation then holds the rate during the rest of burn-in.
    """
    a = precond_diag
    sigma = sigma0
    for _ in range(rounds):
        s2 = sigma ** 2
        accs = []
        for _ in range(2):
            w = rng.standard_normal(vec.size)
            x_prop = vec + 0.5 * s2 * a * g_x + sigma * np.sqrt(a) * w
            f_prop, g_prop = target(x_prop)
            d_fwd = x_prop - vec - 0.5 * s2 * a * g_x
            d_bwd = vec - x_prop - 0.5 * s2 * a * g_prop
            log_r = f_prop - f_x + (np.sum(d_fwd * d_fwd / a) - np.sum(d_bwd * d_bwd / a)) / (2 * s2)
            accs.append(min(1.0, float(np.exp(min(log_r, 0.0)))))
        mean_acc = float(np.mean(accs))
        if mean_acc > 0.8:
            sigma *= 1.8
        elif mean_acc < 0.35:
            sigma /= 1.8
        else:
            break
    return sigma


def mala_update_theta(chain: ChainState, model, engine: EngineData, step_sigma: float,
                      precond_diag: np.ndarray, rng: np.random.Generator,
                      threads: int = 1, cached=None):
    """MALA step on the packed theta vector; returns (accepted, cached')."""
    target = ThetaTarget(model, engine, chain, chain.k_active, chain.q_active, threads)
    vec = target.packing.pack(chain.theta)
    if cached is None or cached.get("n_free") != vec.size:
        f_x, g_x = target(vec)
    else:
        f_x, g_x = cached["f"], cached["g"]
    x_new, f_new, g_new, accepted = mala_step(vec, f_x, g_x, lambda v: target(v),
                                              step_sigma, precond_diag, rng)
    if accepted:
        chain.theta = target.packing.unpack(x_new, base_theta=chain.theta)
        _refresh_loglik(chain, model, engine, threads)
    return accepted, {"f": f_new, "g": g_new, "n_free": vec.size}


def hmc_update_theta(chain: ChainState, model, engine: EngineData, step_eps: float,
                     n_leapfrog: int, mass_diag: np.ndarray, rng: np.random.Generator,
                     threads: int = 1, cached=None):
    """HMC step on the packed theta vector; returns (accepted, diverged, cached')."""
    target = ThetaTarget(model, engine, chain, chain.k_active, chain.q_active, threads)
    vec = target.packing.pack(chain.theta)
    if cached is None or cached.get("n_free") != vec.size:
        f_x, g_x = target(vec)
    else:
        f_x, g_x = cached["f"], cached["g"]
    x_new, f_new, g_new, accepted, diverged = hmc_step(
        vec, f_x, g_x, lambda v: target(v), step_eps, n_leapfrog, mass_diag, rng)
    if accepted:
        chain.theta = target.packing.unpack(x_new, base_theta=chain.theta)
        _refresh_loglik(chain, model, engine, threads)
    return accepted, diverged, {"f": f_new, "g": g_new, "n_free": vec.size}


def sgd_approx_step(chain: ChainState, model, engine: EngineData, batch_idx: np.ndarray,
                    step: float, precond_diag: np.ndarray, threads: int = 1) -> None:
    """Approximate (non-reversible) gradient step on a particle batch.

    theta += step * A * [(N/|batch|) * sum_batch grad_loglik + grad_log_prior].
    No Hastings correction is applied; outputs from runs using this mode are
    labeled approximate.
    """
    if batch_idx.size == 0:
        raise DomainError("sgd batch must be nonempty")
    target = ThetaTarget(model, engine, chain, chain.k_active, chain.q_active,
                         threads, batch_idx=batch_idx, scale_to_full=True)
    vec = target.packing.pack(chain.theta)
    _, g = target(vec)
    chain.theta = target.packing.unpack(vec + step * precond_diag * g,
                                        base_theta=chain.theta)


def _refresh_loglik(chain: ChainState, model, engine: EngineData, threads: int = 1):
    cache = model.build_cache(chain.theta, q_cap=chain.q_active)
    n = chain.n_particles()
    lls = np.empty(n)
    for lo in range(0, n, CHUNK):
        idx = np.arange(lo, min(lo + CHUNK, n))
        vals = model.slice_batch(cache, chain.quats[idx], chain.taus[idx], engine.points)
        c = _pose_coeff(engine, idx, chain.shifts[idx], chain.amps[idx])
        lls[idx] = _loglik_from_islice(engine, idx, c * vals)
    chain.stats["loglik"] = lls
    return cache


def audit_log_posterior(chain: ChainState, model, engine: EngineData) -> float:
    """Fresh recomputation of the cached log posterior (must agree to 1e-8)."""
    cached = float(np.sum(chain.stats["loglik"]) + np.sum(engine.const)
                   + model.log_prior(chain.theta))
    _refresh_loglik(chain, model, engine)
    fresh = float(np.sum(chain.stats["loglik"]) + np.sum(engine.const)
                  + model.log_prior(chain.theta))
    rel = abs(cached - fresh) / max(abs(fresh), 1e-30)
    if rel > 1e-8:
        raise InvariantError(f"cached log posterior off by {rel:.2e} relative")
    return fresh


def adapt_step_sizes(stats: dict, targets: dict, kappa: float = 0.05,
                     min_decisions: int = 50) -> None:
    """Burn-in-only scale adaptation toward target acceptance rates."""
    scales = stats["scales"]
    window = stats["adapt_window"]
    for block, target in targets.items():
        acc, tot = window.get(block, (0, 0))
        if tot < min_decisions:
            continue
        rate = acc / tot
        scales[block] *= float(np.exp(kappa * (rate - target)))
        window[block] = (0, 0)


# ---------------------------------------------------------------------------
# The chain driver
# ---------------------------------------------------------------------------


@dataclass
class SamplerConfig:
    seed: int = 0
    n_iterations: int = 100
    save_every: int = 25
    burn_in: int = 50
    threads: int = 1
    mala_step: float = 0.15
    hmc_step: float = 0.05
    hmc_leapfrog: int = 5
    sgd_step: float = 0.2
    precond_refresh: int = 25
    k_data_pad: int = 2
    target_rw: float = 0.23
    target_mala: float = 0.57
    adapt: bool = True
    priors: LatentPriors = field(default_factory=LatentPriors)
    scales: ProposalScales = field(default_factory=ProposalScales)
    progress: bool = True


def _rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))


def init_chain(model, n_particles: int, seed: int, scales: ProposalScales | None = None,
               priors: LatentPriors | None = None, theta: dict | None = None) -> ChainState:
    """Zero-coefficient chain with random poses and uniform random states."""
    from .geometry import random_quats

    rng = _rng_for(seed, 11)
    priors = priors if priors is not None else LatentPriors()
    d = model.state_dim()
    chain = ChainState(
        theta=theta if theta is not None else model.zero_theta(),
        quats=random_quats(rng, n_particles),
        taus=rng.uniform(-1.0, 1.0, size=(n_particles, d)),
        shifts=np.zeros((n_particles, 2)),
        amps=np.ones(n_particles),
        iteration=0,
        seed=seed,
    )
    sc = scales if scales is not None else ProposalScales()
    chain.stats = {
        "loglik": np.zeros(n_particles),
        "scales": sc.as_dict() | {"theta": None},
        "adapt_window": {},
        "digest": "",
        "accept_rates": {},
    }
    return chain


def run_chain(model, engine_factory, schedule: UpdateSchedule, marching: MarchingSchedule,
              config: SamplerConfig, sinks=(), chain: ChainState | None = None,
              dataset_size: int | None = None) -> ChainState:
    """Execute the block schedule with frequency marching and emit snapshots.

    engine_factory(k_band) -> EngineData builds the banded data view for a
    stage; dataset_size is required when chain is None.
    """
    basis.set_fft_workers(config.threads)
    if chain is None:
        if dataset_size is None:
            raise DomainError("dataset_size required for a fresh chain")
        chain = init_chain(model, dataset_size, config.seed,
                           scales=config.scales, priors=config.priors)
    if chain.n_particles() == 0:
        raise DomainError("dataset must be nonempty")
    scales_d = chain.stats["scales"]
    if scales_d.get("theta") is None:
        scales_d["theta"] = config.mala_step

    stage = -1
    engine = None
    precond = None
    theta_cache = None
    k_max_model = model.k_max
    q_max_model = max(sb.max_degree for _, sb in model.pool_bases().values())

    start_iter = chain.iteration
    for it in range(start_iter, config.n_iterations):
        chain.iteration = it
        new_stage = marching.stage_index(it)
        if new_stage != stage:
            stage = new_stage
            advance_marching(chain, marching)
            k_data = min(chain.k_active + config.k_data_pad, k_max_model)
            engine = engine_factory(k_data)
            _refresh_loglik(chain, model, engine, config.threads)
            target = ThetaTarget(model, engine, chain, chain.k_active, chain.q_active,
                                 config.threads)
            precond = 1.0 / target.curvature_diag()
            theta_cache = None
            has_theta = any(b.kind in ("theta_mala", "theta_hmc", "theta_sgd")
                            for b in schedule.blocks)
            if config.adapt and it < config.burn_in and has_theta:
                rng_t = _rng_for(chain.seed, 77, it)
                vec0 = target.packing.pack(chain.theta)
                f0, g0 = target(vec0)
                vec0, f0, g0 = burnin_climb(target, vec0, f0, g0, precond)
                chain.theta = target.packing.unpack(vec0, base_theta=chain.theta)
                _refresh_loglik(chain, model, engine, config.threads)
                scales_d["theta"] = tune_theta_step(target, vec0, f0, g0, precond,
                                                    rng_t, scales_d["theta"],
                                                    goal=config.target_mala)
                theta_cache = {"f": f0, "g": g0, "n_free": vec0.size}
        elif config.precond_refresh > 0 and it % config.precond_refresh == 0 and it > 0:
            target = ThetaTarget(model, engine, chain, chain.k_active, chain.q_active,
                                 config.threads)
            precond = 1.0 / target.curvature_diag()

        it_rates = {}
        block_counter = 0
        for block in schedule.blocks:
            for rep in range(block.repeats):
                rng = _rng_for(chain.seed, 101, it, block_counter)
                block_counter += 1
                if block.kind == "particle_mh":
                    rates = _particle_block(model, engine, chain, block, rng, config)
                    theta_cache = None  # latents moved; cached (f, g) is stale
                    for key, (a, t) in rates.items():
                        a0, t0 = it_rates.get(key, (0, 0))
                        it_rates[key] = (a0 + a, t0 + t)
                elif block.kind in ("theta_mala", "theta_hmc"):
                    if config.adapt and it < config.burn_in:
                        # Burn-in coefficient updates use the approximate mode
                        # (preconditioned gradient steps, no Hastings
                        # correction): the conditional mode moves quickly while
                        # poses and states equilibrate, and only the
                        # post-burn-in chain must be a valid fixed-kernel MCMC.
                        drift = 0.5 * scales_d["theta"] ** 2
                        sgd_approx_step(chain, model, engine,
                                        np.arange(chain.n_particles()), drift,
                                        precond, config.threads)
                        _refresh_loglik(chain, model, engine, config.threads)
                        theta_cache = None
                        a0, t0 = it_rates.get("theta_burnin_sgd", (0, 0))
                        it_rates["theta_burnin_sgd"] = (a0 + 1, t0 + 1)
                    elif block.kind == "theta_mala":
                        accepted, theta_cache = mala_update_theta(
                            chain, model, engine, scales_d["theta"], precond, rng,
                            config.threads, cached=theta_cache)
                        a0, t0 = it_rates.get("theta", (0, 0))
                        it_rates["theta"] = (a0 + int(accepted), t0 + 1)
                        chain.record_decisions(np.array([accepted], dtype=np.uint8))
                    else:
                        mass = 1.0 / precond
                        accepted, diverged, theta_cache = hmc_update_theta(
                            chain, model, engine, config.hmc_step, config.hmc_leapfrog,
                            mass, rng, config.threads, cached=theta_cache)
                        a0, t0 = it_rates.get("theta", (0, 0))
                        it_rates["theta"] = (a0 + int(accepted), t0 + 1)
                        if diverged:
                            chain.stats["divergences"] = chain.stats.get("divergences", 0) + 1
                        chain.record_decisions(np.array([accepted], dtype=np.uint8))
                elif block.kind == "theta_sgd":
                    n = chain.n_particles()
                    take = max(1, int(round(block.batch_fraction * n)))
                    batch = rng.choice(n, size=take, replace=False)
                    sgd_approx_step(chain, model, engine, batch, config.sgd_step,
                                    precond, config.threads)
                    _refresh_loglik(chain, model, engine, config.threads)
                    theta_cache = None

        for key, (a, t) in it_rates.items():
            a0, t0 = chain.stats["adapt_window"].get(key, (0, 0))
            chain.stats["adapt_window"][key] = (a0 + a, t0 + t)
            chain.stats["accept_rates"][key] = a / max(t, 1)
        if config.adapt and it < config.burn_in:
            targets = {"rot": config.target_rw, "tau": config.target_rw,
                       "shift": config.target_rw, "amp": config.target_rw}
            adapt_step_sizes(chain.stats, {k: v for k, v in targets.items()
                                           if k in chain.stats["adapt_window"]})

        log_post = float(np.sum(chain.stats["loglik"]) + np.sum(engine.const)
                         + model.log_prior(chain.theta))
        chain.stats["log_posterior"] = log_post
        if config.progress:
            rates = " ".join(f"{k}={a/max(t,1):.2f}" for k, (a, t) in sorted(it_rates.items()))
            print(f"iter={it} K={chain.k_active} Q={chain.q_active} {rates} "
                  f"logpost={log_post:.6e}", flush=True)

        if (it + 1) % config.save_every == 0 or it + 1 == config.n_iterations:
            for sink in sinks:
                sink(chain)
    chain.iteration = config.n_iterations
    return chain


def _particle_block(model, engine: EngineData, chain: ChainState, block: Block,
                    rng: np.random.Generator, config: SamplerConfig) -> dict:
    n = chain.n_particles()
    scales = ProposalScales(**{k: chain.stats["scales"][k]
                               for k in ("rot", "tau", "shift", "amp")})
    draws = _draw_proposals(rng, n, chain.taus.shape[1], scales)
    if block.batch_fraction < 1.0:
        take = max(1, int(round(block.batch_fraction * n)))
        selected = rng.choice(n, size=take, replace=False)
        selected.sort()
    else:
        selected = np.arange(n)
    cache = model.build_cache(chain.theta, q_cap=chain.q_active)
    chunks = [selected[lo:lo + CHUNK] for lo in range(0, selected.size, CHUNK)]
    priors = config.priors

    def work(idx):
        return mh_sweep_chunk(model, cache, engine, chain, idx, draws, priors)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(idx) for idx in chunks]

    totals = {}
    for res in results:
        for key, (a, t) in res["accepts"].items():
            a0, t0 = totals.get(key, (0, 0))
            totals[key] = (a0 + a, t0 + t)
        chain.record_decisions(res["bits"])
    return totals
