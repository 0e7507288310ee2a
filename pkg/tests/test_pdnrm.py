import math
import json
import numpy as np
import pytest
from numpy.testing import assert_allclose

from nrmlab import (
    Instance,
    LinearDemand,
    DualSet,
    RegularityConstants,
    constants_tuned,
    constants_theory,
    config_from_dict,
    PdNrmPolicy,
    dual_opt_policy,
    grad_est,
    demand_balance,
    primal_opt,
    prox_dual_step,
    DemandOracle,
    SamplingOracle,
    run_episode,
    solve_inner_max,
)
from nrmlab.demand import grad_revenue_f, revenue_f
from nrmlab.pdnrm import epoch_count_bound, loop_count_bound


def unit_regularity():
    return RegularityConstants(B_D=1, sigma_D=1, L_D=1, B_f=1, B_phi=1,
                               sigma_phi=1, B_A=1, sigma_A=1, B_r=1,
                               gamma_min=1, gamma_max=1)


def synthetic_instance(N):
    return Instance(
        model=LinearDemand(np.full(N, 2.0), np.eye(N)),
        A=np.eye(N),
        gamma=np.full(N, 0.5),
        T=1000,
        price_min=0.0,
        price_max=1.0,
        noise="none",
    )


def log_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


class TestConstantsTuned:
    def test_frozen_example(self):
        cfg = constants_tuned(2, 10**5)
        assert cfg.n0 == 239
        assert cfg.kappa1 == pytest.approx(239**0.25, rel=1e-12)
        assert cfg.kappa1 == pytest.approx(3.932, abs=5e-4)
        assert cfg.kappa6 == pytest.approx(math.sqrt(2), rel=1e-12)
        assert cfg.eta1 == cfg.eta2 == cfg.mu == 1.0

    def test_kappa2_squared_equals_kappa5(self):
        for T in (10**3, 10**5, 10**7):
            cfg = constants_tuned(2, T)
            assert cfg.kappa2**2 == pytest.approx(cfg.kappa5, rel=1e-12)

    def test_kappa3_formula(self):
        cfg = constants_tuned(3, 10**4)
        expected = 8 * cfg.kappa1 * math.sqrt(27 * math.log(2 * 3 * 10**4)) \
            + 12 * cfg.kappa1**2
        assert cfg.kappa3 == pytest.approx(expected, rel=1e-12)

    def test_n0_floor(self):
        cfg = constants_tuned(1, 10)
        assert cfg.n0 >= 4


class TestConstantsTheory:
    def test_positive_on_example(self, instance, regularity):
        cfg = constants_theory(instance, regularity, instance.T)
        for name in ("n0", "kappa1", "kappa2", "kappa3", "kappa4", "kappa5",
                     "kappa6", "eta1", "eta2", "mu"):
            assert getattr(cfg, name) > 0
        assert cfg.kappa2**2 == pytest.approx(cfg.kappa5, rel=1e-9)
        assert 0 < cfg.contraction < 1
        assert cfg.kappa5 >= 1.0

    def test_asymptotic_orders_in_n(self):
        # slopes of ln(constant) vs ln(N) with smoothness, dual and radius
        # parameters held at 1, matching the asymptotic-order accounting
        reg = unit_regularity()
        Ns = [4, 8, 16, 32]
        cfgs = [
            constants_theory(synthetic_instance(N), reg, 10**6,
                             dual_set=DualSet(np.full(N, 1.0 / math.sqrt(N))),
                             rho_bar=1.0, rho_lo=1.0)
            for N in Ns
        ]
        assert 3.5 <= log_slope(Ns, [c.n0 for c in cfgs]) <= 4.5
        # kappa3 = 4 d L kappa1 sqrt(N^3 ln) + 3 L kappa1^2 with kappa1 ~ N:
        # the quadratic term (slope 2) carries desk-scale N; the sqrt(N^3)
        # term (slope 2.5) takes over only beyond N ~ 1e4
        assert 0.9 <= log_slope(Ns, [c.kappa1 for c in cfgs]) <= 1.2
        assert 1.8 <= log_slope(Ns, [c.kappa3 for c in cfgs]) <= 3.0
        big = [64, 256]
        cfg_big = [
            constants_theory(synthetic_instance(N), reg, 10**6,
                             dual_set=DualSet(np.full(N, 1.0 / math.sqrt(N))),
                             rho_bar=1.0, rho_lo=1.0)
            for N in big
        ]
        assert 0.35 <= log_slope(big, [c.kappa6 for c in cfg_big]) <= 0.65

    def test_polylog_in_horizon(self):
        reg = unit_regularity()
        inst = synthetic_instance(2)
        Ts = [10**6, 10**9, 10**12]
        cfgs = [constants_theory(inst, reg, T, dual_set=DualSet(np.full(2, 0.7)),
                                 rho_bar=1.0, rho_lo=1.0) for T in Ts]
        assert log_slope(Ts, [c.n0 for c in cfgs]) <= 0.5
        assert log_slope(Ts, [c.kappa3 for c in cfgs]) <= 0.3


class TestConfigValidation:
    def test_n0_floor_enforced(self):
        with pytest.raises(ValueError):
            constants_tuned(2, 10**4, n0=4).validate(2, 10**4)

    def test_kappa2_consistency_enforced(self):
        cfg = constants_tuned(2, 10**4)
        with pytest.raises(ValueError):
            config_from_dict({"mode": "tuned", "kappa2": cfg.kappa2 * 2},
                             instance=synthetic_instance(2), T=10**4)

    def test_explicit_mode_requires_all_constants(self):
        with pytest.raises(ValueError, match="missing"):
            config_from_dict({"mode": "explicit", "n0": 100})

    def test_json_round_trip(self):
        cfg = constants_tuned(2, 10**5, warm_start=False, contraction=0.4)
        doc = json.loads(json.dumps(cfg.to_dict()))
        doc["mode"] = "explicit"
        back = config_from_dict(doc)
        assert back.n0 == cfg.n0
        assert back.kappa5 == pytest.approx(cfg.kappa5, rel=1e-12)
        assert back.contraction == 0.4
        assert back.warm_start is False

    def test_tuned_overrides(self, instance):
        cfg = config_from_dict({"mode": "tuned", "contraction": 0.3,
                                "lambda_max": [4.0, 4.0]}, instance=instance)
        assert cfg.contraction == 0.3
        assert_allclose(cfg.lambda_max, [4.0, 4.0])


class TestGradEst:
    def test_noiseless_bias_bounds(self, noiseless_instance, regularity, rng):
        # second-order-only bias when sampling noise is absent
        inst = noiseless_instance
        cfg = constants_tuned(2, inst.T)
        for n in (10**4, 10**6):
            for _ in range(10):
                p = 1.0 + 3.0 * rng.random(2)
                lam = np.array([1.0, 0.1]) * rng.random(2)
                env = DemandOracle(inst)
                out = grad_est(env, inst, cfg, p, lam, n)
                D = inst.model.mean(p)
                J = inst.model.jacobian(p)
                g = grad_revenue_f(inst.model, p)
                u = out.u
                assert np.max(np.abs(out.D_hat - D)) <= 2 * regularity.L_D * u**2
                for i in range(2):
                    col_err = np.linalg.norm(out.J_hat[:, i] - J[:, i])
                    assert col_err <= 0.5 * regularity.L_D * u
                assert np.linalg.norm(out.grad_f - g) <= \
                    regularity.B_f * u * math.sqrt(2) / 2 + 1e-9

    def test_oracle_cost_is_constant_in_n(self, noiseless_instance):
        env = DemandOracle(noiseless_instance)
        cfg = constants_tuned(2, 10**6)
        grad_est(env, noiseless_instance, cfg, np.array([2.0, 2.0]),
                 np.zeros(2), 10**6)
        assert env.commits == 2 * 2 + 1
        assert env.periods == 10**6

    def test_u_capped_at_box_distance(self, noiseless_instance):
        inst = noiseless_instance
        cfg = constants_tuned(2, inst.T)
        p = np.array([0.85, 2.0])  # 0.05 from the lower edge
        env = DemandOracle(inst)
        out = grad_est(env, inst, cfg, p, np.zeros(2), 10**4)
        assert out.u == pytest.approx(0.05, rel=1e-12)
        p_free = np.array([2.0, 2.0])
        out2 = grad_est(DemandOracle(inst), inst, cfg, p_free, np.zeros(2), 10**4)
        assert out2.u == pytest.approx(math.sqrt(2) / 10, rel=1e-12)

    def test_degrades_when_budget_below_4n(self, noiseless_instance):
        inst = noiseless_instance
        cfg = constants_tuned(2, inst.T)
        env = DemandOracle(inst)
        out = grad_est(env, inst, cfg, np.array([2.0, 2.0]), np.zeros(2), 7)
        assert out.degraded
        assert not out.balancing_feasible
        assert out.periods_consumed == 7

    def test_stochastic_estimates_concentrate(self, instance):
        # over 50 replications the mean deviation stays within 4 standard
        # errors of the noiseless bias
        inst = instance
        cfg = constants_tuned(2, inst.T)
        p = np.array([1.5, 1.5])
        n = 20_000
        m = n // 8
        devs = []
        for rep in range(50):
            env = SamplingOracle(inst, np.random.default_rng(500 + rep))
            out = grad_est(env, inst, cfg, p, np.zeros(2), n)
            devs.append(out.D_hat - inst.model.mean(p))
        devs = np.array(devs)
        se = math.sqrt(1.0 / (16 * m * 50))  # var(D_hat coord) <= 1/(16 m)
        noiseless = grad_est(DemandOracle(inst), inst, cfg, p, np.zeros(2), n)
        bias = np.abs(noiseless.D_hat - inst.model.mean(p))
        assert np.all(np.abs(devs.mean(axis=0)) <= bias + 4 * se)


class TestDemandBalance:
    def setup_method(self):
        self.inst = None

    def test_already_feasible_returns_p(self, instance, fluid_solution):
        inst = instance
        p = fluid_solution.p_star
        D = inst.model.mean(p)
        J = inst.model.jacobian(p)
        cfg = constants_tuned(2, inst.T)
        tilde, ok = demand_balance(D, J, p, fluid_solution.lambda_star, 10**4,
                                   inst.gamma, inst.A, cfg.kappa1, cfg.kappa2,
                                   cfg.kappa3, inst.price_box)
        assert ok
        assert_allclose(tilde, p)

    def test_contradictory_constraints_fall_back(self, instance):
        inst = instance
        p = np.array([0.9, 0.9])
        D = inst.model.mean(p)       # far above gamma
        J = inst.model.jacobian(p)
        tilde, ok = demand_balance(D, J, p, np.zeros(2), 10**8, inst.gamma,
                                   inst.A, kappa1=1e-4, kappa2=1e-6, kappa3=1e-6,
                                   price_box=inst.price_box)
        assert not ok
        assert_allclose(tilde, p)

    def test_sandwich_with_true_demand(self, noiseless_instance, rng):
        # accepted balanced prices keep the true two-phase average consumption
        # inside the target band
        inst = noiseless_instance
        cfg = constants_tuned(2, inst.T)
        accepted = 0
        for _ in range(100):
            p = 1.0 + 2.5 * rng.random(2)
            lam = 2.0 * rng.random(2)
            n = int(10 ** (3 + 3 * rng.random()))
            env = DemandOracle(inst)
            out = grad_est(env, inst, cfg, p, lam, n)
            if not out.balancing_feasible:
                continue
            accepted += 1
            avg = 0.5 * (inst.model.mean(p) + inst.model.mean(out.tilde_p))
            root_n = math.sqrt(n)
            for j in range(2):
                hi = inst.gamma[j] + 2 * cfg.kappa3 / root_n
                assert inst.A[j] @ avg <= hi + 1e-12
                if lam[j] > 0:
                    lo = inst.gamma[j] - cfg.kappa2 / (min(1.0, lam[j]) * root_n) \
                        - 2 * cfg.kappa3 / root_n
                    assert inst.A[j] @ avg >= lo - 1e-12
        assert accepted >= 90

    def test_locality_bound_exact(self, noiseless_instance, rng):
        inst = noiseless_instance
        cfg = constants_tuned(2, inst.T)
        for _ in range(20):
            p = 1.0 + 2.5 * rng.random(2)
            n = 5000
            out = grad_est(DemandOracle(inst), inst, cfg, p, np.array([2.0, 2.0]), n)
            assert np.max(np.abs(out.tilde_p - p)) <= cfg.kappa1 * n**-0.25 + 1e-12


class TestPrimalOpt:
    def test_stopping_rule(self, noiseless_instance):
        inst = noiseless_instance
        cfg = constants_tuned(2, inst.T, kappa5=100.0, kappa2=10.0)
        events = []
        primal_opt(DemandOracle(inst), inst, cfg, np.zeros(2), eps_bar=1.0,
                   events=events)
        n_taus = [e["n_tau"] for e in events if e["kind"] == "loop"]
        assert all(n <= 100 for n in n_taus[:-1])
        assert n_taus[-1] > 100

    def test_noiseless_zero_dual_finds_revenue_max(self, noiseless_instance):
        inst = noiseless_instance
        # margin small enough that the zero-dual maximizer lies inside the
        # inner box, as the primal-dual set assumption requires
        cfg = constants_tuned(2, inst.T, p_margin=0.02)
        p_hat, _ = primal_opt(DemandOracle(inst), inst, cfg, np.zeros(2),
                              eps_bar=2e-4)
        # grid-search oracle for the unconstrained revenue maximum
        grid = np.linspace(inst.price_min, inst.price_max, 400)
        P = np.stack(np.meshgrid(grid, grid, indexing="ij"), axis=-1).reshape(-1, 2)
        vals = np.einsum("kn,kn->k", P, inst.model.mean_batch(P))
        f_best = vals.max()
        assert revenue_f(inst.model, p_hat) >= f_best - 1e-3

    def test_tracks_inner_maximizer_at_fluid_dual(self, noiseless_instance,
                                                  fluid_solution):
        inst = noiseless_instance
        # slower loop growth buys enough gradient steps for one call to converge
        cfg = constants_tuned(2, inst.T, contraction=0.8)
        lam = fluid_solution.lambda_star
        p_opt, _ = solve_inner_max(inst, lam)
        events = []
        primal_opt(DemandOracle(inst), inst, cfg, lam, eps_bar=1e-6, events=events)
        dists = [np.linalg.norm(np.array(e["p"]) - p_opt)
                 for e in events if e["kind"] == "loop"]
        assert len(dists) >= 20
        assert dists[-1] <= 0.05
        # monotone decrease until the perturbation bias floor
        floor = 0.05
        for a, b in zip(dists, dists[1:]):
            if a > floor:
                assert b <= a + 1e-9


class TestProxDualStep:
    def test_shrinkage_example(self):
        out = prox_dual_step(np.array([1.0, 1.0]), np.zeros(2), 1.0, 1.0,
                             np.array([10.0, 10.0]))
        assert_allclose(out, [0.5, 0.5])

    def test_projection_example(self):
        out = prox_dual_step(np.array([0.0, 0.0]), np.array([-1.0, 2.0]), 1.0, 1.0,
                             np.array([10.0, 10.0]))
        assert_allclose(out, [0.5, 0.0])

    def test_minimizes_prox_objective(self, rng):
        lam_s = np.array([1.3, 0.4])
        g = np.array([0.6, -0.9])
        mu, eta2 = 0.7, 1.4
        lam_max = np.array([2.0, 2.0])
        out = prox_dual_step(lam_s, g, mu, eta2, lam_max)

        def objective(lam):
            return (g @ lam + 0.5 * mu * lam @ lam
                    + (0.5 / eta2) * np.sum((lam - lam_s) ** 2))

        samples = rng.random((1_000_000, 2)) * lam_max
        vals = (samples @ g + 0.5 * mu * np.einsum("kn,kn->k", samples, samples)
                + (0.5 / eta2) * np.sum((samples - lam_s) ** 2, axis=1))
        assert objective(out) <= vals.min() + 1e-8


@pytest.fixture(scope="module")
def episode(instance):
    inst = instance.with_horizon(50_000)
    policy = dual_opt_policy(inst, constants_tuned(2, inst.T))
    trace = run_episode(inst, policy, seed=77)
    return inst, policy, trace


class TestDualOptPolicy:
    def test_epoch_count_bound(self, episode):
        inst, policy, trace = episode
        epochs = sum(1 for e in trace.events if e["kind"] == "epoch")
        assert 1 <= epochs <= epoch_count_bound(policy.config, inst.T)

    def test_loop_count_bound(self, episode):
        inst, policy, trace = episode
        per_epoch = {}
        for e in trace.events:
            if e["kind"] == "loop":
                per_epoch[e["s"]] = per_epoch.get(e["s"], 0) + 1
        assert max(per_epoch.values()) <= loop_count_bound(policy.config, inst.T)

    def test_period_accounting_exact(self, episode):
        inst, policy, trace = episode
        assert policy.periods_observed == inst.T

    def test_lambda_stays_in_dual_box(self, episode):
        inst, policy, trace = episode
        for e in trace.events:
            if e["kind"] == "dual":
                lam = np.array(e["lambda_next"])
                assert np.all(lam >= 0)
                assert np.all(lam <= policy.dual_set.lambda_max + 1e-12)

    def test_eps_bar_strictly_decreasing_geometric(self, episode):
        _, policy, trace = episode
        eps = [e["eps_bar"] for e in trace.events if e["kind"] == "epoch"]
        ratio = (1 + policy.config.mu * policy.config.eta2) ** -0.5
        for a, b in zip(eps, eps[1:]):
            assert b == pytest.approx(a * ratio, rel=1e-9)

    def test_loop_lengths_increase_within_epoch(self, episode):
        _, _, trace = episode
        per_epoch = {}
        for e in trace.events:
            if e["kind"] == "loop":
                per_epoch.setdefault(e["s"], []).append(e["n_tau"])
        for lens in per_epoch.values():
            assert all(b > a for a, b in zip(lens, lens[1:]))

    def test_balanced_price_locality_logged(self, episode):
        _, policy, trace = episode
        cfg = policy.config
        checked = 0
        for e in trace.events:
            if e["kind"] == "loop" and e["balancing_feasible"]:
                r = cfg.kappa1 * e["n_tau"] ** -0.25
                gap = np.max(np.abs(np.array(e["tilde_p"]) - np.array(e["p"])))
                assert gap <= r + 1e-12
                checked += 1
        assert checked > 0

    def test_lambda0_must_lie_in_box(self, instance):
        cfg = constants_tuned(2, instance.T, lambda0=np.array([1e6, 0.0]))
        with pytest.raises(ValueError):
            PdNrmPolicy(instance, cfg)

    def test_cold_start_restarts_each_epoch(self, instance):
        inst = instance.with_horizon(20_000)
        cold = PdNrmPolicy(inst, constants_tuned(2, inst.T, warm_start=False))
        run_episode(inst, cold, seed=13)
        starts = {}
        for e in cold.events:
            if e["kind"] == "loop" and e["tau"] == 0:
                starts.setdefault(tuple(e["p"]), 0)
                starts[tuple(e["p"])] += 1
        # every epoch's first loop starts from the same initial price
        assert len(starts) == 1
        warm = PdNrmPolicy(inst, constants_tuned(2, inst.T, warm_start=True))
        run_episode(inst, warm, seed=13)
        warm_starts = {tuple(e["p"]) for e in warm.events
                       if e["kind"] == "loop" and e["tau"] == 0}
        assert len(warm_starts) > 1
