"""Blind network revenue management laboratory: primal-dual pricing with
demand balancing, an exact fluid/dual oracle, baselines, and a benchmark
harness."""

from .demand import (
    DemandModel,
    LogitDemand,
    LinearDemand,
    LogitDemandParams,
    RegularityConstants,
    estimate_regularity,
    revenue_f,
    revenue_phi,
    sample_demand,
    DomainError,
)
from .instance import Instance, load_instance, save_instance, example_logit_instance
from .fluid import (
    DualSet,
    FluidSolution,
    FluidError,
    lagrangian_L,
    lagrangian_H,
    solve_inner_max,
    dual_Q,
    grad_Q,
    solve_fluid,
    fluid_upper_bound,
    default_dual_set,
)
from .sim import (
    Policy,
    CommitPolicy,
    EpisodeTrace,
    PolicyError,
    run_episode,
    percentage_loss,
    export_trace_csv,
    export_events_jsonl,
    mix64,
)
from .pdnrm import (
    PdNrmConfig,
    PdNrmPolicy,
    GradEstOutput,
    constants_tuned,
    constants_theory,
    config_from_dict,
    grad_est,
    demand_balance,
    primal_opt,
    prox_dual_step,
    dual_opt_policy,
    DemandOracle,
    SamplingOracle,
)
from .baselines import (
    EtcConfig,
    ClairvoyantPolicy,
    ExploreThenCommitPolicy,
    clairvoyant_policy,
    explore_then_commit_policy,
)
from .bench import (
    BenchPlan,
    BenchSummary,
    run_bench,
    loglog_slope,
    plan_from_dict,
    load_plan,
    episode_seed,
    build_policy,
)

__version__ = "0.1.0"
