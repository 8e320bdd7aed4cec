"""Simulated multi-worker variant of the variance-reduced solver.

The m components are partitioned across p workers.  Every worker keeps
its own three estimators over its shard and samples exclusively from it;
the server averages the worker estimators (weighted by shard size, in
fixed worker order), takes the proximal step, and broadcasts the
iterate.  The simulation is a synchronous round model: no networking,
no failures, and results are independent of worker execution order.

With p = 1 the sampling stream, the arithmetic, and hence the whole
trajectory coincide bit for bit with the centralized solver under the
same seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .composite import (
    CompositeProblem,
    OracleCounter,
    batch_estimates,
    delta_update,
    evaluate_psi,
    gradient_mapping,
)
from .constraints import max_violation
from .solver import (
    SolverConfig,
    SolverReport,
    TrajectoryRecord,
    _select_rng,
)


@dataclass
class DistConfig(SolverConfig):
    """Solver configuration plus worker count and data partition.

    partition maps each worker to the component indices it owns; the
    default is a contiguous equal split with the remainder on the last
    worker.  Worker i samples with a stream seeded by seed ^ i, so
    worker 0 of a single-worker run replays the centralized stream.
    """

    p: int = 1
    partition: Optional[list] = None

    def __post_init__(self):
        super().__post_init__()
        if self.p < 1:
            raise ValueError("worker count must be >= 1")

    def resolve_partition(self, m):
        if self.p > m:
            raise ValueError("more workers than components")
        if self.partition is not None:
            shards = [np.asarray(s, dtype=int) for s in self.partition]
            if len(shards) != self.p:
                raise ValueError("one shard per worker required")
            flat = np.sort(np.concatenate(shards))
            if not np.array_equal(flat, np.arange(m)):
                raise ValueError("partition must assign every index exactly once")
            return shards
        base = m // self.p
        shards = []
        for i in range(self.p):
            hi = (i + 1) * base if i < self.p - 1 else m
            shards.append(np.arange(i * base, hi))
        return shards


def split_batch(total, shard_sizes):
    """Largest-remainder split of a batch across shards, proportional to size."""
    sizes = np.asarray(shard_sizes, dtype=float)
    m = sizes.sum()
    if total < len(shard_sizes):
        raise ValueError(
            f"batch of {total} cannot cover {len(shard_sizes)} workers; "
            "delay the ramp (larger zeta) or reduce the worker count"
        )
    exact = total * sizes / m
    shares = np.floor(exact).astype(int)
    shares = np.maximum(shares, 1)
    while shares.sum() > total:
        k = int(np.argmax(shares))
        shares[k] -= 1
    remainder = exact - shares
    order = np.argsort(-remainder)
    i = 0
    while shares.sum() < total:
        shares[order[i % len(order)]] += 1
        i += 1
    return [int(s) for s in shares]


def dist_expected_oracle_calls(schedule, T, m, p, K=1, partition_sizes=None):
    """Per-device oracle calls per family under the sharded schedule.

    The opening batch term splits across devices (a full batch costs each
    device its shard); the inner term 2*S_t*(tau_t - 1) is paid by every
    device, except that a full inner pass also reduces to the shard.
    """
    if partition_sizes is None:
        base = m // p
        partition_sizes = [base] * (p - 1) + [m - base * (p - 1)]
    totals = [0] * p
    for t in range(1, T + 1):
        tau, S, B = schedule.params(t, m)
        if B >= m:
            b_shares = list(partition_sizes)
        else:
            b_shares = split_batch(B, partition_sizes)
        for i in range(p):
            inner = partition_sizes[i] if S >= m else S
            totals[i] += b_shares[i] + 2 * inner * (tau - 1)
    return [K * t for t in totals]


@dataclass
class DistState:
    """Broadcast iterate plus the per-worker estimator triples."""

    x: np.ndarray
    x_prev: np.ndarray
    ys: list
    zs: list
    ws: list


def _aggregate(parts, weights):
    total = weights[0] * parts[0]
    for w, part in zip(weights[1:], parts[1:]):
        total = total + w * part
    return total


def _merge_counters(device_counters, server_counter):
    total = OracleCounter()
    for c in device_counters:
        total.g_value_calls += c.g_value_calls
        total.g_jacobian_calls += c.g_jacobian_calls
        total.h_gradient_calls += c.h_gradient_calls
    total.f_outer_calls = server_counter.f_outer_calls
    total.prox_calls = server_counter.prox_calls
    total.projection_calls = server_counter.projection_calls
    return total


def dist_run_epoch(problem, state: DistState, t, dcfg: DistConfig, shards,
                   worker_rngs, device_counters, server_counter, *,
                   stage=1, start_time=None, violation_set=None,
                   exec_order=None, candidates=None, probe=None):
    """One synchronous distributed epoch.

    Workers (visited in exec_order, results reduced in fixed index
    order) refresh their shard estimators from their own batches, the
    server forms the global estimate, steps, and broadcasts.  Inner
    steps repeat the pattern with sampled shard deltas.
    """
    m = problem.m
    p = dcfg.p
    tau, S, B = dcfg.schedule.params(t, m)
    t0 = start_time if start_time is not None else time.perf_counter()
    order = list(exec_order) if exec_order is not None else list(range(p))
    sizes = [len(s) for s in shards]
    weights = [size / m for size in sizes]

    x_cur = np.asarray(state.x, dtype=float)
    x_prev = x_cur
    ys = [None] * p
    zs = [None] * p
    ws = [None] * p
    if B >= m:
        b_shares = None
    else:
        b_shares = split_batch(B, sizes)
    for i in order:
        if b_shares is None:
            idx = shards[i]
        else:
            local = worker_rngs[i].integers(0, sizes[i], size=b_shares[i])
            idx = shards[i][local]
        ys[i], zs[i], ws[i] = batch_estimates(problem, idx, x_cur,
                                              device_counters[i])

    records = []
    for j in range(tau):
        if j > 0:
            new_ys = [None] * p
            new_zs = [None] * p
            new_ws = [None] * p
            for i in order:
                if S >= m:
                    y_new, z_new, w_new = batch_estimates(
                        problem, shards[i], x_cur, device_counters[i])
                    y_old, z_old, w_old = batch_estimates(
                        problem, shards[i], x_prev, device_counters[i])
                    new_ys[i] = y_new + (ys[i] - y_old)
                    new_zs[i] = z_new + (zs[i] - z_old)
                    new_ws[i] = w_new + (ws[i] - w_old)
                else:
                    local = worker_rngs[i].integers(0, sizes[i], size=S)
                    idx = shards[i][local]
                    new_ys[i], new_zs[i], new_ws[i] = delta_update(
                        problem, idx, x_cur, x_prev,
                        ys[i], zs[i], ws[i], device_counters[i])
            ys, zs, ws = new_ys, new_zs, new_ws

        y_glob = _aggregate(ys, weights)
        z_glob = _aggregate(zs, weights)
        w_glob = _aggregate(ws, weights)
        _, fprime = problem.f(y_glob, server_counter)
        grad_est = z_glob.T @ fprime + w_glob
        if probe is not None:
            probe(stage, t, j, x_cur, grad_est)
        x_prev = x_cur
        x_cur = problem.r_term.prox(x_cur - dcfg.eta * grad_est, dcfg.eta)
        server_counter.prox_calls += 1
        if candidates is not None:
            candidates.append(x_cur.copy())

        gm = None
        if dcfg.eta > 0:
            at_cadence = (dcfg.grad_map_every > 0
                          and (j + 1) % dcfg.grad_map_every == 0)
            if at_cadence or (dcfg.grad_map_every == 0 and j == tau - 1):
                _, gm = gradient_mapping(problem, dcfg.eta, x_cur)
        viol = None
        if violation_set is not None:
            viol = max_violation(violation_set, x_cur)
        records.append(TrajectoryRecord(
            stage=stage, epoch=t, step=j,
            psi=evaluate_psi(problem, x_cur),
            grad_map_sq=gm, max_violation=viol,
            g_calls=sum(c.g_value_calls for c in device_counters),
            h_calls=sum(c.h_gradient_calls for c in device_counters),
            wall_s=time.perf_counter() - t0,
        ))

    return DistState(x=x_cur, x_prev=x_prev, ys=ys, zs=zs, ws=ws), records


def dist_solve(problem_builder, x0, dcfg: DistConfig, *,
               violation_set=None, exec_order=None, probe=None) -> SolverReport:
    """K warm-started stages of the simulated distributed solver.

    The report carries one OracleCounter per device (that device's g/h
    evaluations) alongside the merged totals; the server-side outer-map
    and prox calls live only in the totals.
    """
    if isinstance(problem_builder, CompositeProblem):
        fixed = problem_builder
        builder = lambda k, x_start: fixed
    else:
        builder = problem_builder

    worker_rngs = [np.random.default_rng(dcfg.seed ^ i) for i in range(dcfg.p)]
    select_rng = _select_rng(dcfg.seed)
    device_counters = [OracleCounter() for _ in range(dcfg.p)]
    server_counter = OracleCounter()
    start = time.perf_counter()

    x = np.asarray(x0, dtype=float)
    records = []
    stage_outputs = []
    problem = None
    for k in range(1, dcfg.K + 1):
        problem = builder(k, x)
        shards = dcfg.resolve_partition(problem.m)
        collect = dcfg.output_rule == "uniform_random_iterate"
        candidates = [x.copy()] if collect else None
        state = DistState(
            x=x, x_prev=x,
            ys=[np.zeros(problem.dim_g)] * dcfg.p,
            zs=[np.zeros((problem.dim_g, problem.dim_x))] * dcfg.p,
            ws=[np.zeros(problem.dim_x)] * dcfg.p,
        )
        for t in range(1, dcfg.T + 1):
            state, recs = dist_run_epoch(
                problem, state, t, dcfg, shards, worker_rngs,
                device_counters, server_counter, stage=k, start_time=start,
                violation_set=violation_set, exec_order=exec_order,
                candidates=candidates, probe=probe,
            )
            records.extend(recs)
        if collect:
            pick = int(select_rng.integers(0, len(candidates)))
            x = candidates[pick]
        else:
            x = state.x
        stage_outputs.append(x.copy())

    return SolverReport(
        trajectory=records,
        counters=_merge_counters(device_counters, server_counter),
        final_x=x,
        wall_time=time.perf_counter() - start,
        final_psi=evaluate_psi(problem, x),
        stage_outputs=stage_outputs,
        per_device_counters=device_counters,
    )
