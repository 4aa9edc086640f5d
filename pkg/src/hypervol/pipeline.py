"""End-to-end drivers behind the CLI subcommands.

simulate: phantom -> fitted coefficients -> SNR calibration -> latent draws ->
noisy images -> dataset file + ground-truth model sidecar + resolved config.

reconstruct: stage 1 fits a homogeneous full-grid model from zero with random
initial latents to align viewing directions; stage 2 switches to the
configured (composite) model, warm-starts poses from stage 1, initializes
states uniformly at random, and runs with frequency marching.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from . import basis, config as cfgmod, io, metrics, sampler
from .basis import StateBasis, VolumeBasis
from .errors import DomainError
from .forward import (CtfDistribution, LatentsDistribution, NoiseModel, calibrate_snr,
                      ctf_eval_batch, hermitian_noise, image_to_pixels,
                      shift_phase_batch)
from .model import CompositeHyperModel, PlainHyperModel, PriorSpec
from .phantom import (fit_coefficients, make_cat_spec, make_pretzel_spec,
                      make_single_blob_spec)


def _grid_from_config(cfg) -> VolumeBasis:
    return VolumeBasis(cfg["grid.n_voxels"], cfg["grid.pixel_size_len"],
                       cfg["grid.band_limit_shell"], cfg["grid.oversample"])


def _prior_from_config(cfg, k_max: int, q_max: int) -> PriorSpec:
    base = cfg["prior.spatial_base"]
    if base <= 0:
        return PriorSpec(adjacent_state_penalty=cfg["prior.adjacent_penalty"])
    return PriorSpec.shell_quadratic(k_max, q_max, base=base,
                                     state_growth=cfg["prior.state_growth"],
                                     adjacent_state_penalty=cfg["prior.adjacent_penalty"])


def _phantom_from_config(cfg, grid):
    kind = cfg["phantom.kind"]
    if kind == "single_blob":
        return make_single_blob_spec(grid)
    if kind == "cat":
        return make_cat_spec(grid)
    if kind == "pretzel":
        return make_pretzel_spec(grid)
    if kind == "custom":
        return cfgmod.phantom_from_config(cfg, grid)
    raise DomainError(f"unknown phantom kind {kind}")


def _model_from_config(cfg, grid, phantom_spec=None):
    kind = cfg["model.kind"]
    if kind == "plain":
        sb = StateBasis(dims=cfg["model.state_dims"], max_degree=cfg["model.max_degree"])
        prior = _prior_from_config(cfg, grid.band_limit_shell, sb.max_degree)
        return PlainHyperModel(grid, sb, prior)
    if kind == "composite":
        if cfg["model.use_phantom_layout"] and phantom_spec is not None \
                and phantom_spec.composite_layout is not None:
            spec = phantom_spec.composite_layout
            cfgmod.composite_to_config(cfg, spec)
        else:
            spec = cfgmod.composite_from_config(cfg, grid)
        q_max = max(c.max_degree for c in spec.components)
        prior = _prior_from_config(cfg, grid.band_limit_shell, q_max)
        return CompositeHyperModel(spec, default_prior=prior)
    raise DomainError(f"unknown model kind {kind}")


def _latents_dist(cfg, state_dims: int) -> LatentsDistribution:
    return LatentsDistribution(state_dims=state_dims,
                               shift_sigma=cfg["dataset.shift_sigma_px"],
                               max_shift=cfg.max_shift(),
                               contrast_sigma_log=cfg["dataset.contrast_sigma_log"])


def _ctf_dist(cfg) -> CtfDistribution:
    return CtfDistribution(wavelength=cfg["ctf.wavelength_len"],
                           spherical_aberration=cfg["ctf.cs_len"],
                           amplitude_contrast=cfg["ctf.amplitude_contrast"],
                           b_factor=cfg["ctf.b_factor_len2"],
                           defocus_min=cfg["ctf.defocus_min_len"],
                           defocus_max=cfg["ctf.defocus_max_len"])


def fit_truth_theta(phantom_spec, model, n_state_nodes: int = 14):
    """Ground-truth coefficients for each model pool from phantom renders."""
    theta = model.zero_theta()
    reports = {}
    if isinstance(model, PlainHyperModel):
        co, rep = fit_coefficients(phantom_spec, model.vol_basis, model.state_basis,
                                   n_state_nodes=max(n_state_nodes,
                                                     model.state_basis.max_degree + 1))
        theta["main"] = co.values
        reports["main"] = rep
        return theta, reports
    done = set()
    for i, comp in enumerate(model.spec.components):
        pool = model.spec.pool_name(i)
        if pool in done:
            continue
        done.add(pool)
        vb, sb = model.pool_bases()[pool]
        blobs = [b for b in phantom_spec.blobs if b.component == i]
        if not blobs:
            raise DomainError(f"phantom has no blobs for component {i}")
        nodes = 1 if sb.dims == 0 else max(n_state_nodes, sb.max_degree + 1)
        co, rep = fit_coefficients(phantom_spec, vb, sb, n_state_nodes=nodes,
                                   blobs=blobs, origin_shift=comp.support_center)
        theta[pool] = co.values
        reports[pool] = rep
    return theta, reports


def simulate(cfg, out_dir, progress: bool = True) -> dict:
    """Create a synthetic dataset plus its ground-truth sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write_probe"
    try:
        probe.write_bytes(b"ok")  # fail before any simulation work
        probe.unlink()
    except OSError as exc:
        raise DomainError(f"output directory not writable: {exc}") from exc

    seed = cfg["seed"]
    basis.set_fft_workers(cfg["threads"])
    grid = _grid_from_config(cfg)
    spec = _phantom_from_config(cfg, grid)
    if cfg["phantom.kind"] != "custom":
        cfgmod.phantom_to_config(cfg, spec)
    model = _model_from_config(cfg, grid, spec)
    theta, fit_reports = fit_truth_theta(spec, model)

    ldist = _latents_dist(cfg, model.state_dim())
    cdist = _ctf_dist(cfg)
    noise = calibrate_snr((model, theta), ldist, cdist, cfg["dataset.snr_target"],
                          n_probe=min(500, max(100, cfg["dataset.n_particles"])),
                          seed=seed)

    count = cfg["dataset.n_particles"]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 55]))
    quats, taus, shifts, amps = ldist.sample(rng, count)
    ctf_rows = cdist.sample(rng, count)

    n = grid.grid_size
    geom = basis.plane_geometry(n, grid.pixel_size, grid.band_limit_shell)
    cache = model.build_cache(theta)
    pixels = np.empty((count, n, n), dtype=np.float32)
    jj = np.arange(n) - n // 2
    j1, j2 = np.meshgrid(jj, jj, indexing="ij")
    shell_full = np.rint(np.hypot(j1, j2)).astype(np.int64)
    sig_full = noise.for_shells(shell_full)
    chunk = 128
    for lo in range(0, count, chunk):
        hi = min(lo + chunk, count)
        sl = model.slice_batch(cache, quats[lo:hi], taus[lo:hi], geom.points_unique)
        ctf_vals = ctf_eval_batch(ctf_rows[lo:hi, 0], ctf_rows[0, 1], ctf_rows[0, 2],
                                  ctf_rows[0, 3], ctf_rows[lo:hi, 4],
                                  geom.omega_phys_unique)
        phase = shift_phase_batch(geom.j_unique, shifts[lo:hi], n)
        i_u = amps[lo:hi, None] * ctf_vals * phase * sl
        for b in range(hi - lo):
            i_plane = geom.assemble_plane(i_u[b])
            rng_i = np.random.default_rng(np.random.SeedSequence([seed, int(lo + b)]))
            y = i_plane + sig_full * hermitian_noise(rng_i, n)
            pixels[lo + b] = image_to_pixels(y).astype(np.float32)
        if progress and (lo // chunk) % 8 == 0:
            print(f"simulate: {hi}/{count} images", flush=True)

    dataset = io.Dataset(grid_size=n, pixel_size=grid.pixel_size,
                         k_max=grid.band_limit_shell, oversample=grid.oversample,
                         state_dims=model.state_dim(), noise=noise, synthetic=True,
                         ids=np.arange(count), ctf_rows=ctf_rows, pixels=pixels,
                         true_quats=quats, true_taus=taus, true_shifts=shifts,
                         true_amps=amps)
    ds_path = out_dir / cfg["dataset.path"]
    io.write_dataset(ds_path, dataset)
    truth_path = out_dir / cfg["truth.path"]
    io.save_model_file(truth_path, model, theta)
    cfgmod.emit_config(cfg, out_dir / "resolved_config.txt")
    return {"dataset": ds_path, "truth": truth_path, "fit_reports": fit_reports,
            "sigma": float(noise.sigma_per_shell[0])}


def _stage_schedule(cfg, stage: str, mode: str) -> sampler.UpdateSchedule:
    blocks = [sampler.Block("particle_mh", repeats=cfg[f"{stage}.pose_repeats"],
                            batch_fraction=1.0 if mode == "exact_mcmc"
                            else cfg["sampler.batch_fraction"])]
    if mode == "exact_mcmc":
        blocks.append(sampler.Block(cfg[f"{stage}.theta_kind"],
                                    repeats=cfg[f"{stage}.theta_repeats"]))
    else:
        blocks.append(sampler.Block("theta_sgd", repeats=cfg[f"{stage}.theta_repeats"],
                                    batch_fraction=cfg["sampler.batch_fraction"]))
    return sampler.UpdateSchedule(blocks)


def _sampler_config(cfg, stage: str, seed_offset: int) -> sampler.SamplerConfig:
    shift_prior = cfg["sampler.shift_prior_sigma_px"]
    if shift_prior <= 0:
        shift_prior = max(cfg["dataset.shift_sigma_px"], 0.3)
    amp_prior = cfg["sampler.contrast_prior_sigma_log"]
    if amp_prior <= 0:
        amp_prior = max(cfg["dataset.contrast_sigma_log"], 0.02)
    return sampler.SamplerConfig(
        seed=cfg["seed"] + seed_offset,
        n_iterations=cfg[f"{stage}.iterations"],
        save_every=cfg[f"{stage}.save_every"],
        burn_in=cfg[f"{stage}.burn_in"],
        threads=cfg["threads"],
        mala_step=cfg["sampler.mala_step"],
        hmc_step=cfg["sampler.hmc_step"],
        hmc_leapfrog=cfg["sampler.hmc_leapfrog"],
        sgd_step=cfg["sampler.sgd_step"],
        precond_refresh=cfg["sampler.precond_refresh"],
        k_data_pad=cfg["sampler.k_data_pad"],
        priors=sampler.LatentPriors(shift_sigma=shift_prior, max_shift=cfg.max_shift(),
                                    contrast_sigma_log=amp_prior),
        scales=sampler.ProposalScales(rot=cfg["sampler.scale_rot"],
                                      tau=cfg["sampler.scale_tau"],
                                      shift=cfg["sampler.scale_shift"],
                                      amp=cfg["sampler.scale_amp"]),
    )


def _chain_from_snapshot(snap: dict) -> sampler.ChainState:
    chain = sampler.ChainState(
        theta=snap["theta"], quats=snap["quats"], taus=snap["taus"],
        shifts=snap["shifts"], amps=snap["amps"], iteration=snap["iteration"] + 1,
        seed=snap["stats"]["seed"], k_active=snap["stats"]["k_active"],
        q_active=snap["stats"]["q_active"])
    chain.stats = {
        "loglik": snap["loglik"], "scales": snap["stats"]["scales"],
        "adapt_window": {}, "digest": snap["stats"]["digest"],
        "accept_rates": snap["stats"]["accept_rates"],
    }
    return chain


def reconstruct(cfg, out_dir, resume: bool = False, progress: bool = True) -> dict:
    """Two-stage reconstruction; emits one sample store per stage."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    basis.set_fft_workers(cfg["threads"])
    dataset = io.read_dataset(out_dir / cfg["dataset.path"])
    grid = _grid_from_config(cfg)
    mode = cfg["mode"]
    if mode not in ("exact_mcmc", "approx_sgd"):
        raise DomainError(f"unknown mode {mode}")
    if dataset.n_particles == 0:
        raise DomainError("dataset is empty")

    def engine_factory(k_band):
        return sampler.EngineData(dataset.pixels, dataset.ctf_rows, dataset.noise,
                                  dataset.pixel_size, k_band)

    out = {}
    stage1_chain = None
    if cfg["stage1.enabled"]:
        prior = _prior_from_config(cfg, grid.band_limit_shell, 0)
        model1 = PlainHyperModel(grid, StateBasis(dims=0), prior)
        store_path = out_dir / cfg["stage1.samples_path"]
        stage1_chain = _run_stage(cfg, "stage1", model1, engine_factory, dataset,
                                  store_path, resume, progress, seed_offset=1)
        out["stage1"] = store_path

    if cfg["stage2.enabled"]:
        spec = _phantom_from_config(cfg, grid) if cfg["model.use_phantom_layout"] \
            and cfg["model.kind"] == "composite" else None
        model2 = _model_from_config(cfg, grid, spec)
        store_path = out_dir / cfg["stage2.samples_path"]
        warm = None
        if stage1_chain is not None:
            rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 91]))
            warm = sampler.init_chain(model2, dataset.n_particles, cfg["seed"] + 2,
                                      scales=None, priors=None)
            warm.quats = stage1_chain.quats.copy()
            warm.shifts = stage1_chain.shifts.copy()
            warm.amps = stage1_chain.amps.copy()
            warm.taus = rng.uniform(-1.0, 1.0, size=(dataset.n_particles,
                                                     model2.state_dim()))
            warm.stats["scales"].update(
                {k: stage1_chain.stats["scales"][k] for k in ("rot", "shift", "amp")})
        _run_stage(cfg, "stage2", model2, engine_factory, dataset, store_path,
                   resume, progress, seed_offset=2, warm_chain=warm)
        out["stage2"] = store_path
    cfgmod.emit_config(cfg, out_dir / "resolved_config.txt")
    return out


def _run_stage(cfg, stage: str, model, engine_factory, dataset, store_path,
               resume: bool, progress: bool, seed_offset: int, warm_chain=None):
    scfg = _sampler_config(cfg, stage, seed_offset)
    scfg.progress = progress
    marching = sampler.MarchingSchedule(cfgmod.marching_from_string(cfg[f"{stage}.marching"]))
    final_k, final_q = marching.stages[-1][1], marching.stages[-1][2]
    q_model = max(sb.max_degree for _, sb in model.pool_bases().values())
    if final_k > model.k_max or final_q > q_model:
        raise DomainError(f"{stage}: marching exceeds the model's band/degree")
    schedule = _stage_schedule(cfg, stage, cfg["mode"])
    chain = None
    if resume and Path(store_path).exists():
        snaps = io.SampleStore.read_all(store_path)
        if snaps:
            chain = _chain_from_snapshot(snaps[-1])
            if chain.iteration >= scfg.n_iterations:
                return chain
    if chain is None and warm_chain is not None:
        chain = warm_chain
    store = io.SampleStore(store_path, mode="a" if (resume and Path(store_path).exists()) else "w")
    try:
        chain = sampler.run_chain(model, engine_factory, schedule, marching, scfg,
                                  sinks=(store.append,), chain=chain,
                                  dataset_size=dataset.n_particles)
    finally:
        store.close()
    return chain


def _model_for_eval(cfg, out_dir):
    truth_model, truth_theta = io.load_model_file(Path(out_dir) / cfg["truth.path"])
    return truth_model, truth_theta


def posterior_mean_theta(snaps: list[dict]) -> dict:
    """Average theta over snapshots (synthesis is linear in the pools)."""
    out = {k: np.zeros_like(v) for k, v in snaps[0]["theta"].items()}
    for snap in snaps:
        for k, v in snap["theta"].items():
            out[k] += v
    for k in out:
        out[k] /= len(snaps)
    return out


def select_reference_particles(true_taus: np.ndarray, count: int) -> np.ndarray:
    """Particles spread across the true state space (quantiles of each axis)."""
    n, d = true_taus.shape
    if d == 0:
        return np.linspace(0, n - 1, count).astype(int)
    qs = (np.arange(count) + 0.5) / count
    targets = np.stack([np.quantile(true_taus[:, j], qs) for j in range(d)], axis=1)
    chosen = []
    for t in targets:
        dist = np.linalg.norm(true_taus - t[None, :], axis=1)
        for idx in np.argsort(dist):
            if idx not in chosen:
                chosen.append(int(idx))
                break
    return np.array(chosen)


def evaluate(cfg, out_dir, store_path=None) -> dict:
    """Posterior summaries versus ground truth; writes the report bundle."""
    from . import report as report_mod

    out_dir = Path(out_dir)
    dataset = io.read_dataset(out_dir / cfg["dataset.path"])
    truth_model, truth_theta = _model_for_eval(cfg, out_dir)
    if store_path is None:
        stage = "stage2" if cfg["stage2.enabled"] else "stage1"
        store_path = out_dir / cfg[f"{stage}.samples_path"]
    snaps = io.SampleStore.read_all(store_path)
    burn = int(np.floor(cfg["eval.burn_in_fraction"] * len(snaps)))
    post = snaps[burn:]
    if not post:
        raise DomainError("no post-burn-in samples to evaluate")

    recon_model, _ = _reconstruction_model(cfg, dataset, post[0])
    theta_mean = posterior_mean_theta(post)
    tau_mean = np.mean([s["taus"] for s in post], axis=0)
    d = tau_mean.shape[1]

    refs = select_reference_particles(dataset.true_taus, cfg["eval.tau_points"]) \
        if dataset.synthetic else np.array([0])
    mask = metrics.spherical_mask(dataset.grid_size, cfg["eval.mask_radius_frac"])

    recon_vols, truth_vols = [], []
    for idx in refs:
        tau_r = tau_mean[idx] if d else np.zeros(0)
        tau_t = dataset.true_taus[idx] if dataset.synthetic else tau_r
        recon_vols.append(recon_model.synthesize(theta_mean, tau_r))
        truth_vols.append(truth_model.synthesize(truth_theta, tau_t))
    mean_recon = np.mean(recon_vols, axis=0)
    mean_truth = np.mean(truth_vols, axis=0)
    align = metrics.align_global(mean_truth, mean_recon,
                                 grid_points=cfg["eval.align_grid_points"])

    fsc_results = []
    for vol_r, vol_t in zip(recon_vols, truth_vols):
        vol_used = metrics.reflect_volume(vol_r) if align["reflected"] else vol_r
        aligned = metrics.rotate_volume(vol_used, align["rotation"])
        fsc_results.append(metrics.fsc(vol_t * mask, aligned * mask))
    overall_corr = align["real_space_score"]

    states = None
    if dataset.synthetic and d > 0:
        groups = _permutable_groups(recon_model)
        states = metrics.state_recovery_score(dataset.true_taus, tau_mean,
                                              permutable_groups=groups)
    occupancy = None
    if 1 <= d <= 2:
        from .model import occupancy_histogram

        occupancy = occupancy_histogram(tau_mean)

    drift_flag = False
    if d > 0 and len(post) >= 2:
        early, late = post[0]["taus"], post[-1]["taus"]
        drift = min(abs(metrics.spearman(early[:, j], late[:, j])) for j in range(d))
        drift_flag = drift < 0.9

    accept_hist = [(s["iteration"], s["stats"].get("accept_rates", {}),
                    s["stats"].get("log_posterior", 0.0)) for s in snaps]
    summary = {
        "n_snapshots": len(snaps), "n_post": len(post),
        "alignment_score": overall_corr,
        "alignment_rotation": align["rotation"].tolist(),
        "alignment_reflected": bool(align["reflected"]),
        "fsc": fsc_results, "reference_particles": refs.tolist(),
        "states": states, "occupancy": occupancy,
        "tau_drift_flag": bool(drift_flag),
        "accept_history": accept_hist,
        "third_nyquist_shell": dataset.grid_size // 6,
    }
    report_mod.write_report_bundle(out_dir, cfg, summary, tau_mean,
                                   dataset.true_taus if dataset.synthetic else None)
    return summary


def _reconstruction_model(cfg, dataset, snap):
    grid = VolumeBasis(dataset.grid_size, dataset.pixel_size, dataset.k_max,
                       dataset.oversample)
    if cfg["stage2.enabled"]:
        spec = _phantom_from_config(cfg, grid) if cfg["model.use_phantom_layout"] \
            and cfg["model.kind"] == "composite" else None
        model = _model_from_config(cfg, grid, spec)
    else:
        prior = _prior_from_config(cfg, grid.band_limit_shell, 0)
        model = PlainHyperModel(grid, StateBasis(dims=0), prior)
    return model, grid


def _permutable_groups(model) -> list[tuple[int, ...]]:
    if not isinstance(model, CompositeHyperModel):
        return []
    groups: dict[int, list[int]] = {}
    slices = model.tau_slices()
    for i, comp in enumerate(model.spec.components):
        if comp.share_group is None or comp.state_dims == 0:
            continue
        lo, hi = slices[i]
        if hi - lo == 1:
            groups.setdefault(comp.share_group, []).append(lo)
    return [tuple(v) for v in groups.values() if len(v) > 1]


def export_volumes(cfg, out_dir, store_path=None) -> list:
    """Posterior-mean volumes over a tau grid, in native and MRC layouts."""
    out_dir = Path(out_dir)
    dataset = io.read_dataset(out_dir / cfg["dataset.path"])
    if store_path is None:
        stage = "stage2" if cfg["stage2.enabled"] else "stage1"
        store_path = out_dir / cfg[f"{stage}.samples_path"]
    snaps = io.SampleStore.read_all(store_path)
    burn = int(np.floor(cfg["eval.burn_in_fraction"] * len(snaps)))
    post = snaps[burn:]
    if not post:
        raise DomainError("no post-burn-in samples to export")
    model, _ = _reconstruction_model(cfg, dataset, post[0])
    theta_mean = posterior_mean_theta(post)
    d = model.state_dim()
    taus = [float(t) for t in str(cfg["export.tau_grid"]).split(",")]
    written = []
    for t in taus:
        tau = np.full(d, t)
        vol = model.synthesize(theta_mean, tau)
        tag = f"{t:+.2f}".replace("+", "p").replace("-", "m").replace(".", "_")
        native = out_dir / f"volume_tau{tag}.hvv"
        mrc = out_dir / f"volume_tau{tag}.mrc"
        io.write_volume(native, vol, dataset.pixel_size)
        io.write_mrc(mrc, vol, dataset.pixel_size)
        written.append((native, mrc))
    return written
