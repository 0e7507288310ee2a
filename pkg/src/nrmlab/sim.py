"""Discrete-time market simulator: inventory dynamics, hard shutoff, trace recording.

One episode is strictly sequential; distinct episodes may run concurrently,
each owning its RNG. Policies that hold a price for many periods are served
in vectorized blocks; the per-period semantics are unchanged.
"""

import csv
import json
import math
import hashlib
import zlib
import numpy as np
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional

from .instance import Instance

_MASK64 = (1 << 64) - 1
_CHUNK = 1 << 20


def mix64(*parts) -> int:
    """Splittable-counter seed derivation (splitmix64 finalizer folded over parts)."""
    z = 0x9E3779B97F4A7C15
    for part in parts:
        z = (z + int(part) + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z = z ^ (z >> 31)
    return z


def fold_name(seed: int, name: str) -> int:
    return mix64(seed, zlib.crc32(name.encode()))


class Policy(ABC):
    """Admissible pricing policy. next_price at period t may depend only on
    the realized history {p_s, y_s : s < t}; the simulator enforces this by
    construction (it hands the policy nothing else)."""

    name = "policy"

    @abstractmethod
    def next_price(self, period: int) -> Optional[np.ndarray]:
        """Price vector for the 1-based period, or None to request shutoff."""

    @abstractmethod
    def observe(self, period: int, y: np.ndarray) -> None:
        """Realized demand for the given period."""

    def hold(self) -> int:
        """How many upcoming periods (at least 1) the current price persists.
        A batching hint; policies returning >1 must implement observe_block."""
        return 1

    def observe_block(self, period: int, y_sum: np.ndarray, k: int) -> None:
        raise NotImplementedError("per-period policies are observed one period at a time")

    @property
    def events(self) -> list:
        return []


class CommitPolicy(Policy):
    """Policy driven by a generator of (price, length) commitments.

    Subclasses implement _driver(), a generator yielding (price, length) and
    receiving the average realized demand over the commitment. Drivers that
    return are frozen at their last price; the horizon truncates everything.
    """

    def __init__(self, n_products: int):
        self._n = n_products
        self._gen = self._driver()
        self._commit = next(self._gen)
        self._seen = 0
        self._acc = np.zeros(n_products)
        self._done = False
        self.periods_observed = 0

    @abstractmethod
    def _driver(self):
        ...

    def _advance(self):
        avg = self._acc / self._seen
        self._seen = 0
        self._acc = np.zeros(self._n)
        try:
            self._commit = self._gen.send(avg)
        except StopIteration:
            self._done = True
            self._commit = (self._commit[0], 1 << 62)

    def next_price(self, period: int) -> Optional[np.ndarray]:
        return self._commit[0]

    def hold(self) -> int:
        return max(1, int(self._commit[1]) - self._seen)

    def observe(self, period: int, y: np.ndarray) -> None:
        self.observe_block(period, y, 1)

    def observe_block(self, period: int, y_sum: np.ndarray, k: int) -> None:
        self._acc += y_sum
        self._seen += k
        self.periods_observed += k
        if self._seen >= self._commit[1] and not self._done:
            self._advance()


@dataclass
class EpisodeTrace:
    T: int
    seed: int
    policy_name: str
    total_revenue: float
    shutoff_period: Optional[int]
    final_inventory: np.ndarray
    fingerprint: str
    min_inventory: float
    demand_after_shutoff: float
    periods: Optional[dict] = None
    events: list = field(default_factory=list)

    @property
    def inventory_ok(self) -> bool:
        return self.min_inventory >= 0.0

    @property
    def shutoff_ok(self) -> bool:
        return self.demand_after_shutoff == 0.0


class PolicyError(RuntimeError):
    """Policy emitted an out-of-box, non-shutoff price."""


def _price_ok(instance: Instance, p: np.ndarray) -> bool:
    eps = 1e-9 * max(1.0, abs(instance.price_max))
    return bool(
        p.shape == (instance.N,)
        and np.all(np.isfinite(p))
        and np.all(p >= instance.price_min - eps)
        and np.all(p <= instance.price_max + eps)
    )


def run_episode(instance: Instance, policy: Policy, seed: int,
                record_periods: bool = False) -> EpisodeTrace:
    """Run one episode of T periods.

    Each period: query the policy; if shut off, force zero demand; otherwise
    sample demand and attempt fulfillment. A realized purchase that any
    resource cannot fully serve is lost (y := 0) and triggers permanent
    shutoff. Deterministic given the seed.
    """
    T = instance.T
    N, M = instance.N, instance.M
    rng = np.random.default_rng(np.random.PCG64(seed))
    remaining = instance.capacity.astype(float).copy()
    A = instance.A
    A_ext = np.hstack([A, np.zeros((M, 1))])
    noiseless = instance.noise == "none"

    hasher = hashlib.blake2b(digest_size=16)
    revenue_parts: list = []
    min_inventory = float(remaining.min())
    shutoff_period: Optional[int] = None
    demand_after_shutoff = 0.0

    rec = {"price": [], "demand": [], "revenue": [], "inventory": []} if record_periods else None

    t = 0  # completed periods
    while t < T:
        p = policy.next_price(t + 1)
        requested_shutoff = p is None
        if not requested_shutoff:
            p = np.asarray(p, dtype=float)
            if not _price_ok(instance, p):
                raise PolicyError(
                    f"price {p} outside [{instance.price_min}, {instance.price_max}]")
        k = int(min(max(1, policy.hold()), T - t, _CHUNK))

        inv_block = None
        if shutoff_period is not None or requested_shutoff:
            # Market closed: zero demand, no RNG consumption.
            served = 0
            y_sum = np.zeros(N)
            block_rev = np.zeros(k)
            y_block = None
            if record_periods:
                inv_block = np.tile(remaining, (k, 1))
            hasher.update(b"z" + np.int64(k).tobytes())
            if shutoff_period is not None:
                demand_after_shutoff += float(np.sum(y_sum))
        elif noiseless:
            y = instance.model.mean(p)
            cons = A @ y
            n_fit = k
            for j in range(M):
                if cons[j] > 0:
                    cap_j = int(math.floor(remaining[j] / cons[j] + 1e-12))
                    while cap_j > 0 and cap_j * cons[j] > remaining[j]:
                        cap_j -= 1
                    n_fit = min(n_fit, max(cap_j, 0))
            served = n_fit
            if served < k and shutoff_period is None:
                shutoff_period = t + served + 1
            y_sum = y * served
            rem_before = remaining
            if served:
                # served * cons <= remaining was verified componentwise above
                remaining = remaining - served * cons
            per_rev = float(p @ y)
            block_rev = np.full(k, per_rev)
            block_rev[served:] = 0.0
            y_block = np.tile(y, (k, 1)) if record_periods else None
            if y_block is not None:
                y_block[served:] = 0.0
            if record_periods:
                steps = np.minimum(np.arange(1, k + 1), served)
                inv_block = rem_before[None, :] - steps[:, None] * cons[None, :]
                if served:
                    inv_block[served - 1:] = remaining
            hasher.update(p.tobytes() + np.int64(served).tobytes())
        else:
            probs = instance.model.mean(p)
            cum = np.cumsum(probs)
            idx = np.searchsorted(cum, rng.random(k), side="right")
            cons = A_ext[:, idx]
            cum_cons = np.cumsum(cons, axis=1)
            viol = (cum_cons > remaining[:, None]).any(axis=0)
            served = int(np.argmax(viol)) if viol.any() else k
            if served < k and shutoff_period is None:
                shutoff_period = t + served + 1
            counts = np.bincount(idx[:served], minlength=N + 1)[:N].astype(float)
            y_sum = counts
            rem_before = remaining
            if served:
                # exactly the cumulative compared in the depletion scan
                remaining = remaining - cum_cons[:, served - 1]
            block_rev = np.append(p, 0.0)[idx]
            block_rev[served:] = 0.0
            if record_periods:
                y_block = np.zeros((k, N))
                rows = np.nonzero(idx[:served] < N)[0]
                y_block[rows, idx[rows]] = 1.0
                inv_block = np.empty((k, M))
                inv_block[:served] = rem_before[None, :] - cum_cons[:, :served].T
                inv_block[served:] = remaining
            else:
                y_block = None
            hasher.update(p.tobytes() + idx[:served].tobytes() + np.int64(served).tobytes())

        min_inventory = min(min_inventory, float(remaining.min()))
        revenue_parts.append(float(block_rev.sum()))

        if record_periods:
            prices_block = np.full((k, N), np.nan)
            if not requested_shutoff and p is not None:
                # NaN marks the shutoff sentinel for periods after shutoff_period.
                last_open = T if shutoff_period is None else shutoff_period
                n_open = int(np.clip(last_open - t, 0, k))
                prices_block[:n_open] = p
            rec["price"].append(prices_block)
            rec["demand"].append(y_block if y_block is not None else np.zeros((k, N)))
            rec["revenue"].append(block_rev.copy())
            rec["inventory"].append(inv_block)

        if k == 1:
            policy.observe(t + 1, y_sum)
        else:
            policy.observe_block(t + 1, y_sum, k)
        t += k

    if record_periods:
        per_period_rev = np.concatenate(rec["revenue"])
        total = math.fsum(per_period_rev.tolist())
        periods = {
            "price": np.vstack(rec["price"]),
            "demand": np.vstack(rec["demand"]),
            "revenue": per_period_rev,
            "inventory": np.vstack(rec["inventory"]),
        }
    else:
        total = math.fsum(revenue_parts)
        periods = None

    return EpisodeTrace(
        T=T,
        seed=seed,
        policy_name=getattr(policy, "name", type(policy).__name__),
        total_revenue=total,
        shutoff_period=shutoff_period,
        final_inventory=remaining,
        fingerprint=hasher.hexdigest(),
        min_inventory=min_inventory,
        demand_after_shutoff=demand_after_shutoff,
        periods=periods,
        events=list(getattr(policy, "events", [])),
    )


def percentage_loss(instance: Instance, trace: EpisodeTrace, fluid_value: float) -> float:
    """(T phi* - revenue) / (T phi*), with the fluid upper bound standing in
    for the unknown optimal reward (so the reported loss is conservative)."""
    bound = instance.T * fluid_value
    return (bound - trace.total_revenue) / bound


def export_trace_csv(trace: EpisodeTrace, path: str) -> None:
    """Per-period CSV: period, p_1..p_N, y_1..y_N, revenue, inv_1..inv_M."""
    if trace.periods is None:
        raise ValueError("trace was recorded without per-period data")
    price = trace.periods["price"]
    demand = trace.periods["demand"]
    revenue = trace.periods["revenue"]
    inventory = trace.periods["inventory"]
    n = price.shape[1]
    m = inventory.shape[1]
    header = (["period"] + [f"p_{i+1}" for i in range(n)] + [f"y_{i+1}" for i in range(n)]
              + ["revenue"] + [f"inv_{j+1}" for j in range(m)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(price.shape[0]):
            row = [t + 1]
            row += [format(v, ".17g") for v in price[t]]
            row += [format(v, ".17g") for v in demand[t]]
            row.append(format(revenue[t], ".17g"))
            row += [format(v, ".17g") for v in inventory[t]]
            writer.writerow(row)


def export_events_jsonl(trace: EpisodeTrace, path: str) -> None:
    with open(path, "w") as fh:
        for event in trace.events:
            fh.write(json.dumps(event) + "\n")
