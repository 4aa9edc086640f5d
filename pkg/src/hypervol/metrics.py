"""Evaluation metrics: FSC curves, global volume alignment, state recovery."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import basis
from .errors import DomainError
from .geometry import (
    geodesic_distance_rad,
    neighborhood_quats,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
    rotation_covering,
)


def fsc(vol_a: np.ndarray, vol_b: np.ndarray) -> dict:
    """Per-shell correlation curve between two equal-sized volumes.

    Returns the curve (shell 0 .. N/2), the shell frequencies in cycles/voxel,
    and the first shell where the curve drops below 0.5 (N/2 + 1 if never).
    Zero-energy shells contribute a curve value of 0.
    """
    if vol_a.shape != vol_b.shape:
        raise DomainError("FSC requires equal grids")
    n = vol_a.shape[0]
    fa = basis.fftn_centered(vol_a.astype(np.float64))
    fb = basis.fftn_centered(vol_b.astype(np.float64))
    kk = np.arange(n) - n // 2
    k1, k2, k3 = np.meshgrid(kk, kk, kk, indexing="ij")
    shell = np.rint(np.sqrt(k1 ** 2 + k2 ** 2 + k3 ** 2)).astype(np.int64).ravel()
    n_shells = n // 2 + 1
    keep = shell < n_shells
    cross = np.bincount(shell[keep], weights=np.real(fa.ravel() * np.conj(fb.ravel()))[keep],
                        minlength=n_shells)
    pa = np.bincount(shell[keep], weights=(np.abs(fa.ravel()) ** 2)[keep], minlength=n_shells)
    pb = np.bincount(shell[keep], weights=(np.abs(fb.ravel()) ** 2)[keep], minlength=n_shells)
    denom = np.sqrt(pa * pb)
    curve = np.where(denom > 0, cross / np.where(denom > 0, denom, 1.0), 0.0)
    below = np.flatnonzero(curve < 0.5)
    crossing = int(below[0]) if below.size else n_shells
    return {"curve": curve, "shells": np.arange(n_shells),
            "freq": np.arange(n_shells) / n, "crossing_shell": crossing}


def spherical_mask(n: int, radius_frac: float = 0.45, soft_voxels: float = 3.0) -> np.ndarray:
    """Soft-edged ball mask used for masked FSC."""
    x = np.arange(n) - n // 2
    xx, yy, zz = np.meshgrid(x, x, x, indexing="ij")
    r = np.sqrt(xx ** 2 + yy ** 2 + zz ** 2)
    r0 = radius_frac * n
    m = np.clip((r0 + soft_voxels - r) / soft_voxels, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * m)


def rotate_volume(volume: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Trilinear resampling of the volume rotated by R."""
    n = volume.shape[0]
    c0 = n // 2
    rot = quat_to_matrix(rotation)
    x = np.arange(n) - c0
    xx, yy, zz = np.meshgrid(x, x, x, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=0).reshape(3, -1)
    src = rot.T @ pts + c0
    return ndimage.map_coordinates(volume, src.reshape(3, n, n, n), order=1, cval=0.0, mode='grid-constant')


def reflect_volume(volume: np.ndarray) -> np.ndarray:
    """Point reflection through the center voxel (exact on the lattice)."""
    out = volume
    for axis in range(3):
        out = np.roll(np.flip(out, axis=axis), 1, axis=axis)
    return out


def _band_coeffs(volume: np.ndarray, k_band: int):
    n = volume.shape[0]
    vb = basis.VolumeBasis(n, 1.0, k_band, oversample=2)
    co = basis.HyperCoefficients.zeros(vb, basis.StateBasis(dims=0))
    co.values[..., 0] = basis.analyze_volume(volume, vb)
    return co, vb


def _ball_points(k_band: int, n: int) -> np.ndarray:
    kk = np.arange(-k_band, k_band + 1)
    k1, k2, k3 = np.meshgrid(kk, kk, kk, indexing="ij")
    mask = basis.ball_mask(k_band)
    pts = np.stack([k1[mask], k2[mask], k3[mask]], axis=1) / n
    return pts


def align_global(vol_a: np.ndarray, vol_b: np.ndarray, grid_points: int = 40000,
                 k_band: int | None = None) -> dict:
    """Best rotation (and reflection) mapping vol_b onto vol_a.

    Exhaustive scoring over a deterministic ~5-degree rotation covering times
    {reflect, no reflect}, followed by shrinking-step neighborhood descent.
    Correlations are evaluated on band-limited spectra (Parseval-equal to
    real-space correlation of the band-limited volumes); the full covering is
    scored on a coarse shell set and the leaders rescored on the full band.
    """
    if vol_a.shape != vol_b.shape:
        raise DomainError("alignment requires equal grids")
    n = vol_a.shape[0]
    if k_band is None:
        k_band = min(n // 2 - 1, max(8, n // 4))
    k_coarse = min(5, k_band)
    co_a, _ = _band_coeffs(vol_a, k_band)
    pts_fine = _ball_points(k_band, n)
    pts_coarse = _ball_points(k_coarse, n)
    ball = basis.ball_mask(k_band)
    a_fine = co_a.values[ball, 0]
    shells_fine = basis.shell_radii(k_band)[ball]
    a_coarse = a_fine[shells_fine <= k_coarse + 1e-9]
    quats = rotation_covering(grid_points)

    best = {"score": -np.inf, "rotation": None, "reflected": False}
    for reflected in (False, True):
        vol = reflect_volume(vol_b) if reflected else vol_b
        co_b, vb = _band_coeffs(vol, k_band)
        cache = basis.build_slice_cache(
            basis.HyperCoefficients(co_b.values, vb, basis.StateBasis(dims=0)))
        b_norm = np.linalg.norm(co_b.values[ball, 0])
        a_norm = np.linalg.norm(a_fine)

        def score_batch(qs, pts, ref_vals):
            out = np.empty(qs.shape[0])
            chunk = 512
            for lo in range(0, qs.shape[0], chunk):
                batch = qs[lo:lo + chunk]
                vals = basis.gather_planes(cache, batch, pts)[..., 0]
                out[lo:lo + chunk] = np.real(vals @ np.conj(ref_vals))
            return out

        coarse = score_batch(quats, pts_coarse, a_coarse)
        leaders = quats[np.argsort(coarse)[-128:]]
        fine = score_batch(leaders, pts_fine, a_fine) / (a_norm * b_norm)
        top = int(np.argmax(fine))
        q_best, s_best = leaders[top], float(fine[top])
        for step_deg in (1.0, 0.5, 0.25):
            neigh = neighborhood_quats(np.deg2rad(step_deg))
            for _ in range(4):
                cand = quat_normalize(quat_mul(neigh, q_best[None]))
                sc = score_batch(cand, pts_fine, a_fine) / (a_norm * b_norm)
                j = int(np.argmax(sc))
                if sc[j] <= s_best + 1e-12:
                    break
                q_best, s_best = cand[j], float(sc[j])
        if s_best > best["score"]:
            best = {"score": s_best, "rotation": q_best, "reflected": reflected}

    vol_b_used = reflect_volume(vol_b) if best["reflected"] else vol_b
    aligned = rotate_volume(vol_b_used, best["rotation"])
    denom = np.linalg.norm(vol_a) * np.linalg.norm(aligned)
    best["real_space_score"] = float(np.sum(vol_a * aligned) / denom) if denom > 0 else 0.0
    best["aligned"] = aligned
    return best


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation (average ranks on ties)."""
    from scipy import stats

    rho = stats.spearmanr(x, y).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def state_recovery_score(true_taus: np.ndarray, est_taus: np.ndarray,
                         permutable_groups: list[tuple[int, ...]] | None = None) -> dict:
    """|Spearman| per state dimension, invariant to monotone reparameterization.

    permutable_groups lists index tuples of interchangeable dimensions (e.g.
    two shared arms); the permutation with the best mean score is kept, which
    resolves shared-component label switching at evaluation time only.
    """
    true_taus = np.atleast_2d(true_taus)
    est_taus = np.atleast_2d(est_taus)
    if true_taus.shape != est_taus.shape:
        raise DomainError("state lists must have equal shapes")
    d = true_taus.shape[1]

    def scores_for(perm):
        est = est_taus[:, perm]
        scores = np.zeros(d)
        degenerate = np.zeros(d, dtype=bool)
        for j in range(d):
            if np.ptp(est[:, j]) == 0.0:
                degenerate[j] = True
                continue
            scores[j] = abs(spearman(true_taus[:, j], est[:, j]))
        return scores, degenerate

    perms = [list(range(d))]
    if permutable_groups:
        import itertools

        for group in permutable_groups:
            new_perms = []
            for base in perms:
                for order in itertools.permutations(group):
                    p = list(base)
                    for src, dst in zip(group, order):
                        p[src] = base[dst]
                    new_perms.append(p)
            perms = new_perms
    best_scores, best_deg, best_perm = None, None, None
    for p in perms:
        s, deg = scores_for(p)
        if best_scores is None or s.mean() > best_scores.mean():
            best_scores, best_deg, best_perm = s, deg, p
    return {"scores": best_scores, "degenerate": best_deg, "permutation": best_perm}


def rotation_error_deg(q_est: np.ndarray, q_true: np.ndarray) -> float:
    return float(np.rad2deg(geodesic_distance_rad(q_est, q_true)))
