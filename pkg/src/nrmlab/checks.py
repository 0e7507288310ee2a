"""Fast invariant suite behind the `check` CLI subcommand.

Each check returns (name, ok, detail); the suite is a smoke screen over the
module contracts, sized to run in seconds. The pytest suite is the full gate.
"""

import math
import numpy as np

from .demand import sample_demand
from .instance import Instance
from .fluid import (
    solve_fluid,
    dual_Q,
    grad_Q,
    lagrangian_L,
    lagrangian_H,
    default_dual_set,
)
from .sim import run_episode, Policy
from .pdnrm import PdNrmPolicy, constants_tuned, prox_dual_step


class _RecordingPolicy(Policy):
    """Posts a fixed price; verifies the simulator only feeds past data in order."""

    name = "recording"

    def __init__(self, price):
        self.price = np.asarray(price, float)
        self.queries = []
        self.observations = []
        self.ordered = True

    def next_price(self, period):
        if self.observations and self.observations[-1][0] >= period:
            self.ordered = False
        self.queries.append(period)
        return self.price

    def observe(self, period, y):
        if not self.queries or self.queries[-1] != period:
            self.ordered = False
        self.observations.append((period, np.array(y)))


def run_checks(instance: Instance, rng_seed: int = 20240715) -> list:
    rng = np.random.default_rng(rng_seed)
    model = instance.model
    p_lo, p_hi = instance.price_box
    results = []

    def check(name, ok, detail=""):
        results.append((name, bool(ok), detail))

    # demand: inverse round trip
    worst = 0.0
    for _ in range(100):
        p = p_lo + (p_hi - p_lo) * rng.random(instance.N)
        back = model.inverse(model.mean(p))
        worst = max(worst, float(np.max(np.abs(back - p) / np.maximum(np.abs(p), 1e-12))))
    check("demand.round_trip", worst <= 1e-8, f"max rel err {worst:.2e}")

    # demand: analytic Jacobian vs central differences
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        p = (p_lo + h) + (p_hi - p_lo - 2 * h) * rng.random(instance.N)
        J = model.jacobian(p)
        J_fd = np.empty_like(J)
        for i in range(instance.N):
            e = np.zeros(instance.N)
            e[i] = h
            J_fd[:, i] = (model.mean(p + e) - model.mean(p - e)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(J - J_fd)) / max(np.max(np.abs(J)), 1e-12)))
    check("demand.jacobian_fd", worst <= 1e-5, f"max rel err {worst:.2e}")

    # demand: own-price monotonicity
    ok = True
    for _ in range(50):
        p = p_lo + (p_hi - p_lo) * rng.random(instance.N)
        if np.any(np.diag(model.jacobian(p)) >= 0):
            ok = False
    check("demand.monotone", ok)

    # demand: sampler unbiasedness (exact category probabilities + MC smoke)
    p = p_lo + (p_hi - p_lo) * rng.random(instance.N)
    probs = model.mean(p)
    ok = bool(np.all(probs >= 0) and probs.sum() <= 1.0)
    draws = sample_demand(model, p, rng, "multinomial", size=200_000)
    se = np.sqrt(probs * (1 - probs) / draws.shape[0])
    ok = ok and bool(np.all(np.abs(draws.mean(axis=0) - probs) <= 6 * se + 1e-12))
    check("demand.sampler_unbiased", ok)

    # fluid: certificate + weak duality + H/L consistency
    sol = solve_fluid(instance)
    check("fluid.certificate",
          np.all(instance.A @ sol.d_star <= instance.gamma + 1e-6)
          and abs(sol.duality_gap) <= 1e-5,
          f"gap {sol.duality_gap:.2e}")
    dual_set = default_dual_set(instance)
    ok = True
    for _ in range(5):
        lam = dual_set.sample(rng)
        if dual_Q(instance, lam) < sol.value - 1e-6:
            ok = False
    check("fluid.weak_duality", ok)
    ok = True
    for _ in range(20):
        p = p_lo + (p_hi - p_lo) * rng.random(instance.N)
        lam = dual_set.sample(rng)
        L = lagrangian_L(instance, lam, p)
        H = lagrangian_H(instance, lam, model.mean(p))
        if abs(L - H) > 1e-9 * max(1.0, abs(L)):
            ok = False
    check("fluid.H_matches_L", ok)
    lam = sol.lambda_star + 0.1
    g = grad_Q(instance, lam)
    h = 1e-5
    g_fd = np.empty_like(g)
    for j in range(instance.M):
        e = np.zeros(instance.M)
        e[j] = h
        g_fd[j] = (dual_Q(instance, lam + e) - dual_Q(instance, lam - e)) / (2 * h)
    rel = float(np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1e-8))
    check("fluid.grad_q_fd", rel <= 1e-4, f"rel err {rel:.2e}")

    # simulator: determinism, inventory, shutoff, accounting, admissibility
    small = instance.with_horizon(2000)
    pol_a = _RecordingPolicy(sol.p_star)
    tr_a = run_episode(small, pol_a, seed=7, record_periods=True)
    pol_b = _RecordingPolicy(sol.p_star)
    tr_b = run_episode(small, pol_b, seed=7, record_periods=True)
    check("sim.deterministic", tr_a.fingerprint == tr_b.fingerprint
          and tr_a.total_revenue == tr_b.total_revenue)
    check("sim.inventory_nonnegative", tr_a.inventory_ok,
          f"min inventory {tr_a.min_inventory:.3e}")
    check("sim.shutoff_permanent", tr_a.shutoff_ok)
    per = tr_a.periods
    terms = []
    for t in range(per["price"].shape[0]):
        pr = per["price"][t]
        terms.append(float(pr @ per["demand"][t]) if np.all(np.isfinite(pr)) else 0.0)
    recomputed = math.fsum(terms)
    check("sim.revenue_accounting", recomputed == tr_a.total_revenue,
          f"recomputed {recomputed!r} vs {tr_a.total_revenue!r}")
    check("sim.admissible", pol_a.ordered and len(pol_a.observations) == small.T)

    # pdnrm: prox closed form and a short stochastic run
    out = prox_dual_step(np.array([1.0, 1.0]), np.zeros(2), 1.0, 1.0, np.array([10.0, 10.0]))
    check("pdnrm.prox", np.allclose(out, [0.5, 0.5]))
    cfg = constants_tuned(instance.N, 20_000)
    pol = PdNrmPolicy(instance.with_horizon(20_000), cfg)
    trace = run_episode(instance.with_horizon(20_000), pol, seed=11)
    epochs = sum(1 for e in trace.events if e.get("kind") == "epoch")
    bound = 2 * np.log(20_000) / (cfg.mu * cfg.eta2) + 1
    check("pdnrm.epoch_bound", 0 < epochs <= bound, f"{epochs} epochs, bound {bound:.1f}")
    ok = True
    for ev in trace.events:
        if ev.get("kind") == "loop" and ev["balancing_feasible"]:
            r = cfg.kappa1 * ev["n_tau"] ** -0.25
            if np.max(np.abs(np.array(ev["tilde_p"]) - np.array(ev["p"]))) > r + 1e-12:
                ok = False
    check("pdnrm.balance_locality", ok)

    return results
