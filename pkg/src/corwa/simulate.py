"""Closed-loop rollouts with certificate controllers plus the metric
accumulation used in the experiment reports: tracking RMSE, average
time-to-collision over closing pairs, minimum obstacle and inter-agent
distances, mean speed, and unsafe-region violation counts.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .certificate import CoRwaCertificate, solve_positive_p
from .dynamics import euler_step
from .topology import JointState, extended_state


@dataclass
class MetricsReport:
    tracking_rmse: float
    avg_ttc: float
    min_obstacle_distance: float
    min_inter_agent_distance: float
    mean_speed: float
    safety_violations: int

    FIELDS = ("tracking_rmse", "avg_ttc", "min_obstacle_distance",
              "min_inter_agent_distance", "mean_speed", "safety_violations")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class RolloutResult:
    times: np.ndarray
    states: np.ndarray                  # (steps+1, q, n) error coordinates
    controls: np.ndarray                # (steps, q, m)
    clip_flags: np.ndarray              # (steps, q)
    vp: np.ndarray | None               # comparison Lyapunov value per step
    c_min: float | None
    metrics: MetricsReport


def _controls(cert, scn, joint):
    u = np.empty((scn.q, scn.model.m))
    for i in range(scn.q):
        ext = extended_state(joint, scn.topo, i)
        u[i] = cert.control(i, ext.flat)
    return u


def simulate(scenario, cert: CoRwaCertificate, seed=0) -> RolloutResult:
    """Roll out the certified controllers from a sampled initial state.

    Dynamics integrate in error coordinates with masks recomputed each
    step; the platoon additionally tracks its absolute leader channel so
    leader perturbations enter the error state between steps.
    """
    rng = np.random.default_rng(seed)
    dt, steps = scenario.sim_dt, scenario.sim_steps
    q, n, m = scenario.q, scenario.model.n, scenario.model.m
    x = scenario.initial_sample(rng)
    states = np.empty((steps + 1, q, n))
    controls = np.empty((steps, q, m))
    clip_flags = np.zeros((steps, q))
    states[0] = x
    violations = 0
    is_platoon = getattr(scenario, "name", "") == "platoon"
    leader = getattr(scenario, "leader", None)

    joint = JointState(x, 0.0)
    for k in range(steps):
        u = _controls(cert, scenario, joint)
        controls[k] = u
        nxt, clips = euler_step(scenario.model, scenario.topo, joint, u, dt)
        for (agent, _) in clips:
            clip_flags[k, agent] = 1.0
        if is_platoon and leader is not None:
            # leader speed changes shift every follower's velocity error
            dv = leader.velocity((k + 1) * dt) - leader.velocity(k * dt)
            nxt = JointState(nxt.x - np.array([0.0, dv]), nxt.timestamp)
        if any(scenario.region_tag(nxt, i) == "unsafe" for i in range(q)):
            violations += 1
        states[k + 1] = nxt.x
        joint = nxt

    vp = None
    c_min = None
    try:
        p, _, c_min = solve_positive_p(cert.lam)
        vp = np.array([
            float(p @ np.array([cert.v_value(i, states[k, i]) for i in range(q)]))
            for k in range(steps + 1)
        ])
    except (ValueError, ArithmeticError):
        pass

    metrics = _metrics(scenario, states, dt, violations)
    times = np.arange(steps + 1) * dt
    return RolloutResult(times, states, controls, clip_flags, vp, c_min, metrics)


def _metrics(scn, states, dt, violations) -> MetricsReport:
    ctx = scn.metrics_context()
    kind = ctx["kind"]
    steps = states.shape[0]
    q = states.shape[1]
    ttc = []
    min_obs = math.inf
    min_pair = math.inf
    track_sq = 0.0
    track_n = 0
    speeds = []

    if kind == "robot":
        targets = np.asarray(ctx["targets"])
        for k in range(steps):
            pos = states[k, :, :2] + targets
            for i in range(q):
                track_sq += float(np.sum(states[k, i, :2] ** 2))
                track_n += 1
                for (cx, cy, rad) in ctx["obstacles"]:
                    min_obs = min(min_obs,
                                  float(np.linalg.norm(pos[i] - (cx, cy))) - rad)
            for i in range(q):
                for j in range(i + 1, q):
                    d = float(np.linalg.norm(pos[i] - pos[j]))
                    min_pair = min(min_pair, d)
                    if k + 1 < steps:
                        nd = float(np.linalg.norm(
                            states[k + 1, i, :2] + targets[i]
                            - states[k + 1, j, :2] - targets[j]))
                        closing = (d - nd) / dt
                        if closing > 1e-9:
                            ttc.append(d / closing)
            if k + 1 < steps:
                step_d = states[k + 1, :, :2] - states[k, :, :2]
                speeds.extend(np.linalg.norm(step_d, axis=1) / dt)
    elif kind == "platoon":
        gap = ctx["desired_gap"]
        leader = ctx.get("leader")
        for k in range(steps):
            spacing = states[k, :, 0] + gap
            min_pair = min(min_pair, float(spacing.min()))
            for i in range(q):
                track_sq += float(states[k, i, 1] ** 2)
                track_n += 1
                # closing speed: spacing shrinking
                if k + 1 < steps:
                    closing = -(states[k + 1, i, 0] - states[k, i, 0]) / dt
                    if closing > 1e-9:
                        ttc.append(float(spacing[i] / closing))
            v_lead = leader.velocity(k * dt) if leader is not None else 0.0
            speeds.extend(np.abs(v_lead + states[k, :, 1]))
    else:
        for k in range(steps):
            for i in range(q):
                track_sq += float(np.sum(states[k, i] ** 2))
                track_n += 1
            for i in range(q):
                for j in range(i + 1, q):
                    d = abs(float(states[k, i, 0] - states[k, j, 0]))
                    min_pair = min(min_pair, d)
                    if k + 1 < steps:
                        nd = abs(float(states[k + 1, i, 0] - states[k + 1, j, 0]))
                        closing = (d - nd) / dt
                        if closing > 1e-9:
                            ttc.append(d / closing)
            if k + 1 < steps:
                speeds.extend(np.abs(states[k + 1, :, 1]))

    return MetricsReport(
        tracking_rmse=math.sqrt(track_sq / max(track_n, 1)),
        avg_ttc=float(np.mean(ttc)) if ttc else math.inf,
        min_obstacle_distance=min_obs,
        min_inter_agent_distance=min_pair,
        mean_speed=float(np.mean(speeds)) if speeds else 0.0,
        safety_violations=violations,
    )


def write_trajectory_csv(path, result: RolloutResult):
    q, n = result.states.shape[1], result.states.shape[2]
    m = result.controls.shape[2]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "agent"] + [f"x{d}" for d in range(n)]
                   + [f"u{d}" for d in range(m)] + ["clipped"])
        for k, t in enumerate(result.times):
            for i in range(q):
                row = [f"{t:.6f}", i] + [repr(float(v)) for v in result.states[k, i]]
                if k < result.controls.shape[0]:
                    row += [repr(float(v)) for v in result.controls[k, i]]
                    row += [int(result.clip_flags[k, i])]
                else:
                    row += [""] * m + [""]
                w.writerow(row)


def write_metrics(path_json, metrics: MetricsReport):
    with open(path_json, "w") as f:
        json.dump(metrics.to_dict(), f, indent=2)


def write_metrics_csv(path, metrics: MetricsReport):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MetricsReport.FIELDS)
        w.writerow([metrics.to_dict()[k] for k in MetricsReport.FIELDS])


def write_vp_csv(path, result: RolloutResult):
    if result.vp is None:
        return False
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "vp", "bound"])
        v0 = result.vp[0]
        for t, v in zip(result.times, result.vp):
            bound = 1.05 * v0 * math.exp(-result.c_min * t)
            w.writerow([f"{t:.6f}", repr(float(v)), repr(float(bound))])
    return True
