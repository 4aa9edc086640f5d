"""Sampler tests: Hastings bookkeeping, MALA/HMC cores, sweeps, marching."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hypervol import basis, forward, model, sampler
from hypervol.errors import DomainError, InvariantError
from hypervol.geometry import random_quats


class TestHastings:
    def test_metropolis_special_case(self):
        assert sampler.hastings_ratio(0.0, 0.0, 0.0, 0.0) == 1.0

    def test_two_log_units_down(self):
        val = sampler.hastings_ratio(-2.0, 0.0, 0.0, 0.0)
        assert abs(val - np.exp(-2.0)) <= 1e-15

    def test_nan_raises(self):
        with pytest.raises(InvariantError):
            sampler.hastings_ratio(np.nan, 0.0, 0.0, 0.0)

    def test_minus_infinity_proposal_rejected(self):
        assert sampler.hastings_ratio(-np.inf, 0.0, 0.0, 0.0) == 0.0

    @given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=100, deadline=None)
    def test_detailed_balance_identity(self, h_x, h_y, q_xy, q_yx):
        # a(x->y) h(x) q(x,y) == a(y->x) h(y) q(y,x) in log space.
        a_xy = sampler.hastings_ratio(h_y, h_x, q_xy, q_yx)
        a_yx = sampler.hastings_ratio(h_x, h_y, q_yx, q_xy)
        lhs = np.log(a_xy) + h_x + q_xy
        rhs = np.log(a_yx) + h_y + q_yx
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


class TestReflection:
    def test_range_million_steps(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=1_000_000)
        stepped = sampler._reflect(x + rng.standard_normal(1_000_000) * 0.7, -1.0, 1.0)
        assert np.all(stepped >= -1.0) and np.all(stepped <= 1.0)

    def test_folded_kernel_is_symmetric(self):
        # The reflected random walk has a symmetric transition density:
        # q(x -> y) = sum over the mirror images of y of the Gaussian step
        # density.  Evaluate that fold analytically for random pairs.
        def folded_density(x, y, s):
            total = 0.0
            for k in range(-6, 7):
                total += np.exp(-((y + 4.0 * k) - x) ** 2 / (2 * s * s))
                total += np.exp(-((2.0 - y + 4.0 * k) - x) ** 2 / (2 * s * s))
            return total

        rng = np.random.default_rng(8)
        for _ in range(50):
            x, y = rng.uniform(-1, 1, 2)
            s = rng.uniform(0.05, 1.5)
            assert abs(folded_density(x, y, s) - folded_density(y, x, s)) <= 1e-12


def gaussian_target(var, mu):
    def target(x):
        d = x - mu
        return float(-0.5 * np.sum(d * d / var)), -d / var
    return target


class TestMalaCore:
    def test_sigma_to_zero_acceptance(self):
        rng = np.random.default_rng(1)
        dim = 12
        var = np.linspace(0.5, 2.0, dim)
        target = gaussian_target(var, np.zeros(dim))
        x = rng.standard_normal(dim)
        f, g = target(x)
        acc = 0
        for _ in range(2000):
            x, f, g, a = sampler.mala_step(x, f, g, target, 1e-6, np.ones(dim), rng)
            acc += a
        assert acc / 2000 >= 0.999

    def test_gaussian_moments(self):
        rng = np.random.default_rng(2)
        dim = 10
        var = np.linspace(0.5, 3.0, dim)
        mu = np.linspace(-1, 1, dim)
        target = gaussian_target(var, mu)
        x = mu.copy()
        f, g = target(x)
        samples = []
        for it in range(30000):
            x, f, g, _ = sampler.mala_step(x, f, g, target, 1.1, var, rng)
            if it >= 5000:
                samples.append(x.copy())
        s = np.asarray(samples)
        assert np.max(np.abs(s.mean(0) - mu)) <= 0.1
        assert np.max(np.abs(s.var(0) / var - 1.0)) <= 0.1

    def test_preconditioner_scalar_equivalence(self):
        # A = c*I with step sigma matches A = I with step sigma*sqrt(c) under
        # paired random draws.
        dim = 8
        var = np.linspace(0.5, 2.0, dim)
        target = gaussian_target(var, np.zeros(dim))
        c = 2.7
        x1 = np.full(dim, 0.3)
        x2 = x1.copy()
        f1, g1 = target(x1)
        f2, g2 = target(x2)
        rng1 = np.random.default_rng(77)
        rng2 = np.random.default_rng(77)
        for _ in range(200):
            x1, f1, g1, a1 = sampler.mala_step(x1, f1, g1, target, 0.3,
                                               np.full(dim, c), rng1)
            x2, f2, g2, a2 = sampler.mala_step(x2, f2, g2, target, 0.3 * np.sqrt(c),
                                               np.ones(dim), rng2)
            assert a1 == a2
            np.testing.assert_allclose(x1, x2, atol=1e-12)

    def test_nonpositive_preconditioner_rejected(self):
        target = gaussian_target(np.ones(2), np.zeros(2))
        x = np.zeros(2)
        f, g = target(x)
        with pytest.raises(DomainError):
            sampler.mala_step(x, f, g, target, 0.1, np.array([1.0, 0.0]),
                              np.random.default_rng(0))


class TestHmcCore:
    def test_energy_error_halving(self):
        dim = 10
        var = np.linspace(0.5, 3.0, dim)
        target = gaussian_target(var, np.zeros(dim))

        def max_dh(eps):
            rng = np.random.default_rng(3)
            worst = 0.0
            for _ in range(20):
                x = rng.standard_normal(dim) * np.sqrt(var)
                p = rng.standard_normal(dim)
                f, g = target(x)
                h0 = -f + 0.5 * np.sum(p * p)
                x1, p1, g1, f1 = sampler.leapfrog(x, p, g, target, eps,
                                                  int(round(1.0 / eps)), np.ones(dim))
                worst = max(worst, abs(-f1 + 0.5 * np.sum(p1 * p1) - h0))
            return worst

        ratio = max_dh(0.02) / max_dh(0.01)
        assert 3.5 <= ratio <= 4.5

    def test_reversibility(self):
        dim = 6
        target = gaussian_target(np.linspace(0.5, 2, dim), np.zeros(dim))
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal(dim)
        p0 = rng.standard_normal(dim)
        f0, g0 = target(x0)
        x1, p1, g1, _ = sampler.leapfrog(x0, p0, g0, target, 0.05, 40, np.ones(dim))
        x2, p2, g2, _ = sampler.leapfrog(x1, -p1, g1, target, 0.05, 40, np.ones(dim))
        assert np.max(np.abs(x2 - x0)) <= 1e-10

    def test_single_leapfrog_close_to_mala_rate(self):
        dim = 10
        var = np.linspace(0.5, 3.0, dim)
        target = gaussian_target(var, np.zeros(dim))
        rng = np.random.default_rng(5)
        x = np.zeros(dim)
        f, g = target(x)
        eps = 0.8
        acc_h = 0
        trials = 4000
        for _ in range(trials):
            x, f, g, a, _ = sampler.hmc_step(x, f, g, target, eps, 1, 1.0 / var, rng)
            acc_h += a
        x2 = np.zeros(dim)
        f2, g2 = target(x2)
        acc_m = 0
        for _ in range(trials):
            x2, f2, g2, a = sampler.mala_step(x2, f2, g2, target, eps, var, rng)
            acc_m += a
        assert abs(acc_h / trials - acc_m / trials) <= 0.10

    def test_divergence_flagged(self):
        dim = 4
        target = gaussian_target(np.full(dim, 1e-8), np.zeros(dim))
        rng = np.random.default_rng(6)
        x = np.full(dim, 1.0)
        f, g = target(x)
        x1, f1, g1, accepted, diverged = sampler.hmc_step(x, f, g, target, 10.0, 3,
                                                          np.ones(dim), rng)
        assert diverged and not accepted
        np.testing.assert_array_equal(x1, x)

    def test_gaussian_moments_hmc(self):
        rng = np.random.default_rng(7)
        dim = 10
        var = np.linspace(0.5, 3.0, dim)
        mu = np.linspace(-1, 1, dim)
        target = gaussian_target(var, mu)
        x = mu.copy()
        f, g = target(x)
        samples = []
        for it in range(12000):
            x, f, g, a, _ = sampler.hmc_step(x, f, g, target, 0.35, 6, 1.0 / var, rng)
            if it >= 2000:
                samples.append(x.copy())
        s = np.asarray(samples)
        assert np.max(np.abs(s.mean(0) - mu)) <= 0.1
        assert np.max(np.abs(s.var(0) / var - 1.0)) <= 0.1


class TestAdapt:
    def test_fixed_point(self):
        stats = {"scales": {"rot": 0.5}, "adapt_window": {"rot": (23, 100)}}
        sampler.adapt_step_sizes(stats, {"rot": 0.23})
        assert abs(stats["scales"]["rot"] - 0.5) <= 1e-12

    def test_persistent_acceptance_grows_scale(self):
        stats = {"scales": {"rot": 0.5}, "adapt_window": {"rot": (100, 100)}}
        previous = 0.5
        for _ in range(5):
            sampler.adapt_step_sizes(stats, {"rot": 0.23})
            stats["adapt_window"]["rot"] = (100, 100)
            assert stats["scales"]["rot"] > previous
            previous = stats["scales"]["rot"]

    def test_below_min_decisions_no_change(self):
        stats = {"scales": {"rot": 0.5}, "adapt_window": {"rot": (10, 20)}}
        sampler.adapt_step_sizes(stats, {"rot": 0.23})
        assert stats["scales"]["rot"] == 0.5


class TestMarching:
    def test_schedule_validation(self):
        with pytest.raises(DomainError):
            sampler.MarchingSchedule([(0, 6, 2), (50, 4, 2)])
        with pytest.raises(DomainError):
            sampler.MarchingSchedule([(50, 4, 0), (0, 6, 2)])

    def test_caps_lookup(self):
        sched = sampler.MarchingSchedule([(0, 3, 0), (40, 6, 1), (80, 10, 2)])
        assert sched.caps(0) == (3, 0)
        assert sched.caps(79) == (6, 1)
        assert sched.caps(200) == (10, 2)

    def test_deactivation_rejected(self):
        sched = sampler.MarchingSchedule([(0, 6, 2)])
        chain = sampler.ChainState(theta={}, quats=np.zeros((1, 4)),
                                   taus=np.zeros((1, 0)), shifts=np.zeros((1, 2)),
                                   amps=np.ones(1))
        chain.k_active, chain.q_active = 8, 2
        with pytest.raises(InvariantError):
            sampler.advance_marching(chain, sched)


def small_problem(n_part=24, seed=0, dims=1, q=1, snr_sigma=0.1):
    rng = np.random.default_rng(seed)
    vb = basis.VolumeBasis(grid_size=12, pixel_size=1.0, band_limit_shell=4)
    sb = basis.StateBasis(dims=dims, max_degree=q)
    pm = model.PlainHyperModel(vb, sb, model.PriorSpec.shell_quadratic(4, q, base=1.0))
    theta = pm.zero_theta()
    raw = rng.standard_normal(theta["main"].shape) + 1j * rng.standard_normal(theta["main"].shape)
    theta["main"] = basis.hermitian_symmetrize(raw) * basis.make_active_mask(vb, sb) * 0.05
    noise = forward.NoiseModel.flat(snr_sigma, 12)
    quats = random_quats(rng, n_part)
    taus = rng.uniform(-1, 1, (n_part, dims))
    shifts = rng.uniform(-0.5, 0.5, (n_part, 2))
    amps = np.exp(rng.normal(0, 0.05, n_part))
    ctf_rows = forward.CtfDistribution().sample(rng, n_part)
    co = basis.HyperCoefficients(theta["main"], vb, sb,
                                 basis.make_active_mask(vb, sb))
    pixels = np.empty((n_part, 12, 12), dtype=np.float32)
    for i in range(n_part):
        lat = forward.PoseLatents(quats[i], taus[i], shifts[i], amps[i])
        rec = forward.simulate_image(co, lat, forward.CtfParams.from_array(ctf_rows[i]),
                                     noise, seed=seed, particle_id=i)
        pixels[i] = forward.image_to_pixels(rec.y_hat).astype(np.float32)
    def factory(k_band):
        return sampler.EngineData(pixels, ctf_rows, noise, 1.0, k_band)
    return pm, theta, factory, (quats, taus, shifts, amps)


class TestParticleUpdates:
    def test_zero_scales_always_accept_identity(self):
        pm, theta, factory, true_latents = small_problem()
        engine = factory(4)
        chain = sampler.init_chain(pm, 24, seed=1)
        chain.k_active, chain.q_active = 4, 1
        chain.theta = pm.copy_theta(theta)
        sampler._refresh_loglik(chain, pm, engine)
        before = (chain.quats.copy(), chain.taus.copy(), chain.shifts.copy(),
                  chain.amps.copy())
        out = sampler.mh_update_particle(3, chain, pm, engine,
                                         sampler.ProposalScales(0.0, 0.0, 0.0, 0.0),
                                         np.random.default_rng(2))
        for key, (acc, tot) in out["accepts"].items():
            assert (acc, tot) == (1, 1)
        np.testing.assert_allclose(chain.quats, before[0], atol=1e-15)
        np.testing.assert_array_equal(chain.taus, before[1])
        np.testing.assert_array_equal(chain.shifts, before[2])
        np.testing.assert_array_equal(chain.amps, before[3])

    def test_particle_update_order_commutes(self):
        # With theta fixed and per-particle draws paired, permuting the chunk
        # order leaves the end state identical.
        pm, theta, factory, _ = small_problem(n_part=16)
        engine = factory(4)

        def run(order):
            chain = sampler.init_chain(pm, 16, seed=3)
            chain.k_active, chain.q_active = 4, 1
            chain.theta = pm.copy_theta(theta)
            sampler._refresh_loglik(chain, pm, engine)
            rng = np.random.default_rng(9)
            draws = sampler._draw_proposals(rng, 16, 1, sampler.ProposalScales())
            cache = pm.build_cache(chain.theta, q_cap=1)
            for idx in order:
                sampler.mh_sweep_chunk(pm, cache, engine, chain, idx,
                                       draws, sampler.LatentPriors())
            return chain

        c1 = run([np.arange(0, 8), np.arange(8, 16)])
        c2 = run([np.arange(8, 16), np.arange(0, 8)])
        np.testing.assert_array_equal(c1.quats, c2.quats)
        np.testing.assert_array_equal(c1.taus, c2.taus)
        np.testing.assert_array_equal(c1.stats["loglik"], c2.stats["loglik"])

    def test_single_particle_posterior_mode(self):
        # Dense-grid oracle for a one-particle state posterior.  The noise is
        # low enough that the posterior concentrates at the true tau, so the
        # chain's tau histogram mode must land within 0.05 of both the true
        # value and the oracle mode.
        pm, theta, factory, (quats, taus, shifts, amps) = small_problem(
            n_part=1, seed=4, snr_sigma=0.004)
        engine = factory(4)
        chain = sampler.init_chain(pm, 1, seed=5)
        chain.k_active, chain.q_active = 4, 1
        chain.theta = pm.copy_theta(theta)
        chain.quats[:] = quats
        chain.shifts[:] = shifts
        chain.amps[:] = amps
        chain.taus[:] = 0.0
        sampler._refresh_loglik(chain, pm, engine)

        # Oracle: exact banded likelihood on a dense tau grid.
        cache = pm.build_cache(chain.theta, q_cap=1)
        grid = np.linspace(-1, 1, 801)
        lls = []
        for t in grid:
            vals = pm.slice_batch(cache, quats, np.array([[t]]), engine.points)
            c = sampler._pose_coeff(engine, np.array([0]), shifts, amps)
            lls.append(sampler._loglik_from_islice(engine, np.array([0]), c * vals)[0])
        oracle_mode = grid[int(np.argmax(lls))]

        scales = sampler.ProposalScales(rot=0.0, tau=0.08, shift=0.0, amp=0.0)
        rng_master = np.random.default_rng(6)
        samples = []
        priors = sampler.LatentPriors()
        for it in range(20000):
            draws = sampler._draw_proposals(rng_master, 1, 1, scales)
            sampler.mh_sweep_chunk(pm, cache, engine, chain, np.array([0]), draws, priors)
            if it >= 2000:
                samples.append(chain.taus[0, 0])
        hist, edges = np.histogram(samples, bins=50, range=(-1, 1))
        chain_mode = 0.5 * (edges[np.argmax(hist)] + edges[np.argmax(hist) + 1])
        assert abs(chain_mode - oracle_mode) <= 0.05
        assert abs(chain_mode - taus[0, 0]) <= 0.05


class TestRunChain:
    def _config(self, iters=30, **kw):
        return sampler.SamplerConfig(seed=11, n_iterations=iters, save_every=10,
                                     burn_in=15, progress=False, **kw)

    def test_no_theta_blocks_leave_theta_bit_identical(self):
        pm, theta, factory, _ = small_problem()
        sched = sampler.UpdateSchedule([sampler.Block("particle_mh")])
        march = sampler.MarchingSchedule([(0, 4, 1)])
        chain = sampler.init_chain(pm, 24, seed=11)
        chain.theta = pm.copy_theta(theta)
        before = chain.theta["main"].copy()
        sampler.run_chain(pm, factory, sched, march, self._config(), chain=chain)
        np.testing.assert_array_equal(chain.theta["main"], before)

    def test_same_seed_identical_streams(self):
        pm, theta, factory, _ = small_problem()
        sched = sampler.UpdateSchedule([sampler.Block("particle_mh"),
                                        sampler.Block("theta_mala")])
        march = sampler.MarchingSchedule([(0, 3, 0), (15, 4, 1)])
        outs = []
        for _ in range(2):
            chain = sampler.run_chain(pm, factory, sched, march, self._config(),
                                      dataset_size=24)
            outs.append((chain.theta["main"].copy(), chain.decision_digest()))
        np.testing.assert_array_equal(outs[0][0], outs[1][0])
        assert outs[0][1] == outs[1][1]

    def test_worker_count_invariance(self):
        pm, theta, factory, _ = small_problem()
        sched = sampler.UpdateSchedule([sampler.Block("particle_mh"),
                                        sampler.Block("theta_mala")])
        march = sampler.MarchingSchedule([(0, 4, 1)])
        c1 = sampler.run_chain(pm, factory, sched, march, self._config(threads=1),
                               dataset_size=24)
        c2 = sampler.run_chain(pm, factory, sched, march, self._config(threads=2),
                               dataset_size=24)
        assert c1.decision_digest() == c2.decision_digest()
        scale = max(np.max(np.abs(c1.theta["main"])), 1e-30)
        assert np.max(np.abs(c1.theta["main"] - c2.theta["main"])) <= 1e-10 * scale

    def test_masked_coefficients_stay_zero(self):
        pm, theta, factory, _ = small_problem()
        sched = sampler.UpdateSchedule([sampler.Block("particle_mh"),
                                        sampler.Block("theta_mala")])
        march = sampler.MarchingSchedule([(0, 3, 0), (60, 4, 1)])
        chain = sampler.run_chain(pm, factory, sched, march, self._config(iters=20),
                                  dataset_size=24)
        mask = basis.make_active_mask(pm.vol_basis, pm.state_basis, 3, 0)
        assert np.all(chain.theta["main"][~mask] == 0.0)
        assert chain.k_active == 3 and chain.q_active == 0

    def test_final_stage_reaches_full_caps(self):
        sched = sampler.MarchingSchedule([(0, 3, 0), (10, 4, 1)])
        assert sched.stages[-1][1:] == (4, 1)

    def test_audit_log_posterior(self):
        pm, theta, factory, _ = small_problem()
        sched = sampler.UpdateSchedule([sampler.Block("particle_mh"),
                                        sampler.Block("theta_mala")])
        march = sampler.MarchingSchedule([(0, 4, 1)])
        cfg = self._config()
        chain = sampler.run_chain(pm, factory, sched, march, cfg, dataset_size=24)
        engine = factory(min(4 + cfg.k_data_pad, 4))
        sampler.audit_log_posterior(chain, pm, engine)

    def test_empty_dataset_rejected(self):
        pm, theta, factory, _ = small_problem()
        sched = sampler.UpdateSchedule([sampler.Block("particle_mh")])
        march = sampler.MarchingSchedule([(0, 4, 1)])
        with pytest.raises(DomainError):
            sampler.run_chain(pm, factory, sched, march, self._config(),
                              dataset_size=0)


class TestSgd:
    def test_full_batch_equals_mala_drift(self):
        pm, theta, factory, _ = small_problem()
        engine = factory(4)
        chain = sampler.init_chain(pm, 24, seed=13)
        chain.k_active, chain.q_active = 4, 1
        chain.theta = pm.copy_theta(theta)
        sampler._refresh_loglik(chain, pm, engine)
        target = sampler.ThetaTarget(pm, engine, chain, 4, 1)
        vec = target.packing.pack(chain.theta)
        _, g = target(vec)
        precond = np.full(vec.size, 0.37)
        sigma = 0.21
        expected = vec + 0.5 * sigma ** 2 * precond * g  # the MALA drift term
        sampler.sgd_approx_step(chain, pm, engine, np.arange(24), 0.5 * sigma ** 2,
                                precond)
        got = target.packing.pack(chain.theta)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_batch_scaling_factor(self):
        pm, theta, factory, _ = small_problem()
        engine = factory(4)
        chain = sampler.init_chain(pm, 24, seed=14)
        chain.k_active, chain.q_active = 4, 1
        chain.theta = pm.copy_theta(theta)
        sampler._refresh_loglik(chain, pm, engine)
        # Gradients through the batch target scale by N/|batch| exactly.
        t_full = sampler.ThetaTarget(pm, engine, chain, 4, 1,
                                     batch_idx=np.arange(12), scale_to_full=True)
        t_half = sampler.ThetaTarget(pm, engine, chain, 4, 1,
                                     batch_idx=np.arange(12), scale_to_full=False)
        vec = t_full.packing.pack(chain.theta)
        theta_clean = {k: np.zeros_like(v) for k, v in chain.theta.items()}
        chain2 = chain
        _, g_scaled = t_full(vec)
        _, g_raw = t_half(vec)
        gp = t_full.packing.pack(pm.grad_log_prior(t_full.packing.unpack(vec)))
        np.testing.assert_allclose(g_scaled - gp, 2.0 * (g_raw - gp), rtol=1e-12)

    def test_empty_batch_rejected(self):
        pm, theta, factory, _ = small_problem()
        engine = factory(4)
        chain = sampler.init_chain(pm, 24, seed=15)
        chain.k_active, chain.q_active = 4, 1
        with pytest.raises(DomainError):
            sampler.sgd_approx_step(chain, pm, engine, np.array([], dtype=int),
                                    0.1, np.ones(4))
