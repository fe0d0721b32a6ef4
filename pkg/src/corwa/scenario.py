"""Scenario wiring: builds models, topologies, set geometry, nominal
controllers, verification query domains, and initial certificates from
a parsed configuration.

Models are expressed in error coordinates (origin = goal), so goal sets
are origin balls and the Lyapunov decrement is verified on the domain
minus a small goal cell; reach-and-stay then follows from the sublevel
set argument. Unsafe sets are slabs (double integrator, platoon) or
pairwise-distance regions covered by a classified cell grid (robots).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .certificate import CertificateMargins, CoRwaCertificate, CouplingParams
from .config import ScenarioConfig
from .dynamics import (
    DynamicsModel,
    double_integrator_model,
    platoon_model,
    robot_model,
    LeaderTrajectory,
)
from .network import FeedForwardNet, Interval, Layer, SquaredNet, append_output_clamp, mlp
from .topology import JointState, SystemTopology
from .training import RobotFieldParams, nominal_platoon_controller, nominal_robot_controller
from .verifier import QueryDomains, box_difference, feasible_patterns


def _center_cell(dim, radius):
    return Interval(-radius * np.ones(dim), radius * np.ones(dim))


class _ScenarioBase:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.sim_dt = cfg.dynamics.sim_dt
        self.sim_steps = cfg.dynamics.sim_steps
        self.goal_radius = cfg.sets.goal_radius

    @property
    def q(self):
        return self.topo.q

    def domain_sample(self, rng):
        return np.stack([
            rng.uniform(self.model.domain[j].lower, self.model.domain[j].upper)
            for j in range(self.q)
        ])

    def initial_sample(self, rng):
        return np.stack([
            rng.uniform(self.initial[j].lower, self.initial[j].upper)
            for j in range(self.q)
        ])

    def _goal_or_interior(self, joint, i):
        x = joint.x[i]
        if float(np.linalg.norm(x)) <= self.goal_radius:
            return "goal"
        if self.initial[i].contains(x):
            return "initial"
        return "interior"


class SlabScenario(_ScenarioBase):
    """Unsafe region = half-space slab on one state coordinate of each
    agent; shared by the coupled double integrator and the platoon."""

    def __init__(self, cfg, model, topo, name):
        super().__init__(cfg)
        self.name = name
        self.model = model
        self.topo = topo
        self.patterns = feasible_patterns(model, topo)
        s = cfg.sets
        self.coord = s.unsafe_coord
        self.threshold = s.unsafe_threshold
        self.above = s.unsafe_side == "above"
        self.band = s.safe_band
        self.initial = [
            Interval(np.array(s.initial_low, dtype=float),
                     np.array(s.initial_high, dtype=float))
        ] * self.q
        for box in self.initial:
            if self._in_unsafe_coord(box.lower[self.coord]) or \
               self._in_unsafe_coord(box.upper[self.coord]):
                raise ValueError("initial box overlaps the unsafe slab")

    def _in_unsafe_coord(self, v):
        return v >= self.threshold if self.above else v <= self.threshold

    def _safe_limit(self):
        return self.threshold - self.band if self.above else self.threshold + self.band

    def region_tag(self, joint, i):
        if self._in_unsafe_coord(joint.x[i, self.coord]):
            return "unsafe"
        return self._goal_or_interior(joint, i)

    def barrier_safe(self, joint, i):
        """Inside the region where h >= eps0 is enforced (the buffer band
        between here and the unsafe slab carries no sign constraint)."""
        v = joint.x[i, self.coord]
        return v <= self._safe_limit() if self.above else v >= self._safe_limit()

    def nominal(self, joint, i):
        raise NotImplementedError

    def sample_unsafe(self, rng):
        x = self.domain_sample(rng)
        i = int(rng.integers(0, self.q))
        box = self.model.domain[i]
        lo, hi = box.lower[self.coord], box.upper[self.coord]
        if self.above:
            x[i, self.coord] = rng.uniform(self.threshold, hi)
        else:
            x[i, self.coord] = rng.uniform(lo, self.threshold)
        return x

    def sample_boundary(self, rng):
        x = self.domain_sample(rng)
        i = int(rng.integers(0, self.q))
        if rng.random() < 0.5:
            spread = self.band
            x[i, self.coord] = self.threshold + rng.uniform(-spread, spread) * (
                -1.0 if self.above else 1.0) * rng.choice([-1.0, 1.0])
        else:
            d = self.model.domain[i]
            direction = rng.normal(size=d.lower.shape[0])
            direction /= max(np.linalg.norm(direction), 1e-9)
            x[i] = np.clip(self.goal_radius * rng.uniform(0.6, 1.6) * direction,
                           d.lower, d.upper)
        return x

    def h_warmstart(self, i):
        dim = self.topo.max_neighborhood[i] * self.model.n
        w = np.zeros(dim)
        k = 4.0 * self.cfg.nets.eps0 / self.band
        mid = self.threshold + (-0.5 if self.above else 0.5) * self.band
        sign = -1.0 if self.above else 1.0
        w[self.coord] = sign * k
        b = -sign * k * mid
        return w, b

    def query_domains(self) -> QueryDomains:
        from .verifier import pattern_feasible_box, _with_self_rows
        s = self.cfg.sets
        decrement, positive = [], []
        increment, safe, unsafe = {}, {}, {}
        for i in range(self.q):
            dom = self.model.domain[i]
            decrement.append(box_difference(dom, _center_cell(self.model.n, self.goal_radius)))
            positive.append(box_difference(dom, _center_cell(self.model.n, s.positivity_radius)))
            safe_self = self._coord_slab(dom, "safe")
            not_unsafe_self = self._coord_slab(dom, "not_unsafe")
            unsafe_self = self._coord_slab(dom, "unsafe")
            for pattern in self.patterns[i]:
                feas = pattern_feasible_box(self.model, self.topo, i, pattern)
                def boxed(piece):
                    b = _with_self_rows(feas, piece, self.model.n)
                    return [b] if b is not None else []
                safe[(i, pattern)] = boxed(safe_self)
                increment[(i, pattern)] = boxed(not_unsafe_self)
                unsafe[(i, pattern)] = boxed(unsafe_self)
        return QueryDomains(decrement, positive, increment, safe, unsafe)

    def _coord_slab(self, dom, which):
        lo = dom.lower.copy()
        hi = dom.upper.copy()
        if self.above:
            if which == "safe":
                hi[self.coord] = self._safe_limit()
            elif which == "not_unsafe":
                hi[self.coord] = self.threshold
            else:
                lo[self.coord] = self.threshold
        else:
            if which == "safe":
                lo[self.coord] = self._safe_limit()
            elif which == "not_unsafe":
                lo[self.coord] = self.threshold
            else:
                hi[self.coord] = self.threshold
        return Interval(lo, hi)


class Di2Scenario(SlabScenario):
    def __init__(self, cfg: ScenarioConfig):
        t = cfg.topology
        s = cfg.sets
        model = double_integrator_model(
            t.q, coupling=cfg.dynamics.coupling, u_max=cfg.dynamics.u_max,
            pos_box=(s.domain_low[0], s.domain_high[0]),
            vel_box=(s.domain_low[1], s.domain_high[1]))
        topo = SystemTopology.all_to_all(t.q, t.m, t.radius, t.position_slice)
        super().__init__(cfg, model, topo, "di2")
        self.k_fb = np.array([0.9, 1.2])

    def nominal(self, joint, i):
        u = -self.k_fb @ joint.x[i]
        return np.clip(np.array([u]), self.model.u_lower, self.model.u_upper)

    def metrics_context(self):
        return {"kind": "di2"}


class PlatoonScenario(SlabScenario):
    def __init__(self, cfg: ScenarioConfig):
        t = cfg.topology
        s = cfg.sets
        model = platoon_model(
            t.q, u_max=cfg.dynamics.u_max,
            spacing_box=(s.domain_low[0], s.domain_high[0]),
            velocity_box=(s.domain_low[1], s.domain_high[1]))
        topo = SystemTopology.chain(t.q, t.radius, t.position_slice)
        super().__init__(cfg, model, topo, "platoon")
        self.leader = LeaderTrajectory(
            base_speed=cfg.dynamics.leader_speed,
            schedule=[tuple(x) for x in cfg.dynamics.leader_schedule],
            sin_amplitude=cfg.dynamics.leader_sin_amplitude,
            sin_period=cfg.dynamics.leader_sin_period)
        self.desired_gap = cfg.dynamics.desired_gap

    def nominal(self, joint, i):
        return nominal_platoon_controller(joint, i, u_max=self.cfg.dynamics.u_max)

    def metrics_context(self):
        return {"kind": "platoon", "desired_gap": self.desired_gap,
                "spacing_floor": self.desired_gap + self.threshold,
                "leader": self.leader}


class RobotScenario(_ScenarioBase):
    """Formation team in error coordinates; unsafe = inter-agent
    distance below the collision threshold (obstacle discs are added
    when they intersect the reachable set)."""

    name = "robot"

    def __init__(self, cfg: ScenarioConfig):
        super().__init__(cfg)
        t = cfg.topology
        d = cfg.dynamics
        s = cfg.sets
        leader = np.array(d.leader_target, dtype=float)
        targets = [leader] + [leader + np.asarray(o, dtype=float) for o in d.offsets]
        if len(targets) < t.q:
            raise ValueError("not enough formation offsets for q agents")
        self.targets = np.stack(targets[: t.q])
        self.obstacles = [tuple(map(float, o)) for o in d.obstacles]
        self.topo = SystemTopology.all_to_all(
            t.q, t.m, t.radius, t.position_slice, offsets=self.targets)
        err_box = (
            (np.array(s.domain_high, dtype=float) - np.array(s.domain_low, dtype=float))
            / 2.0)
        self.model = robot_model(
            self.topo, self.targets, gain=d.gain, eps=d.eps,
            wheel_radius=d.wheel_radius, wheel_offset=d.wheel_offset,
            u_max=d.u_max, err_box=err_box)
        self.patterns = feasible_patterns(self.model, self.topo)
        self.d_min = s.collision_distance
        self.d_safe = s.collision_distance + s.collision_band
        self.pair_grid = s.pair_grid
        self.initial = [
            Interval(np.array(s.initial_low, dtype=float),
                     np.array(s.initial_high, dtype=float))
        ] * self.q
        self.field = RobotFieldParams(u_max=d.u_max)

    def _abs_joint(self, joint):
        x = joint.x.copy()
        x[:, :2] += self.targets
        return JointState(x, joint.timestamp)

    def min_pair_distance(self, joint, i):
        x = self._abs_joint(joint).x
        return min(
            float(np.linalg.norm(x[i, :2] - x[j, :2]))
            for j in range(self.q) if j != i)

    def obstacle_distance(self, joint, i):
        p = self._abs_joint(joint).x[i, :2]
        if not self.obstacles:
            return math.inf
        return min(float(np.linalg.norm(p - np.array(o[:2]))) - o[2]
                   for o in self.obstacles)

    def region_tag(self, joint, i):
        if self.q > 1 and self.min_pair_distance(joint, i) < self.d_min:
            return "unsafe"
        if self.obstacle_distance(joint, i) < 0.0:
            return "unsafe"
        return self._goal_or_interior(joint, i)

    def barrier_safe(self, joint, i):
        if self.q > 1 and self.min_pair_distance(joint, i) < self.d_safe:
            return False
        return self.obstacle_distance(joint, i) >= 0.0

    def nominal(self, joint, i):
        return nominal_robot_controller(
            self._abs_joint(joint), self.topo, i, self.targets, self.obstacles,
            self.field, wheel_radius=self.cfg.dynamics.wheel_radius,
            wheel_offset=self.cfg.dynamics.wheel_offset)

    def sample_unsafe(self, rng):
        if self.q < 2:
            return None
        x = self.domain_sample(rng)
        i, j = rng.choice(self.q, size=2, replace=False)
        # place j within collision range of i in absolute coordinates
        angle = rng.uniform(0.0, 2.0 * math.pi)
        radius = rng.uniform(0.0, self.d_min)
        offset = np.array([math.cos(angle), math.sin(angle)]) * radius
        target_shift = self.targets[i] - self.targets[j]
        x[j, :2] = np.clip(
            x[i, :2] + target_shift + offset,
            self.model.domain[j].lower[:2], self.model.domain[j].upper[:2])
        return x

    def sample_boundary(self, rng):
        x = self.domain_sample(rng)
        i, j = rng.choice(self.q, size=2, replace=False)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        radius = rng.uniform(0.6 * self.d_min, 1.5 * self.d_safe)
        offset = np.array([math.cos(angle), math.sin(angle)]) * radius
        x[j, :2] = np.clip(
            x[i, :2] + self.targets[i] - self.targets[j] + offset,
            self.model.domain[j].lower[:2], self.model.domain[j].upper[:2])
        return x

    def h_warmstart(self, i):
        return None

    def _position_cells(self, lo, hi):
        g = self.pair_grid
        edges = [np.linspace(lo[d], hi[d], g + 1) for d in range(2)]
        cells = []
        for a in range(g):
            for b in range(g):
                cells.append((np.array([edges[0][a], edges[1][b]]),
                              np.array([edges[0][a + 1], edges[1][b + 1]])))
        return cells

    def query_domains(self) -> QueryDomains:
        from .verifier import pattern_feasible_box
        s = self.cfg.sets
        n = self.model.n
        decrement, positive = [], []
        increment, safe, unsafe = {}, {}, {}
        for i in range(self.q):
            dom = self.model.domain[i]
            decrement.append(box_difference(dom, _center_cell(n, self.goal_radius)))
            positive.append(box_difference(dom, _center_cell(n, s.positivity_radius)))
            for pattern in self.patterns[i]:
                feas = pattern_feasible_box(self.model, self.topo, i, pattern)
                if feas is None:
                    continue
                inc, sf, us = self._classify_pattern_boxes(i, pattern, feas)
                increment[(i, pattern)] = inc
                safe[(i, pattern)] = sf
                unsafe[(i, pattern)] = us
        return QueryDomains(decrement, positive, increment, safe, unsafe)

    def _classify_pattern_boxes(self, i, pattern, feas):
        """Cell grid over (self, neighbor) positions classified by the
        interval of the absolute pair distance. Cells that may touch the
        collision region are excluded from the positive-sign family but
        still carry the increment condition unless fully unsafe."""
        n = self.model.n
        self_cells = self._position_cells(feas.lower[:n][:2], feas.upper[:n][:2])
        theta_i = (feas.lower[2], feas.upper[2])
        inc_boxes, safe_boxes, unsafe_boxes = [], [], []
        if not pattern:
            if self._obstacles_clear(i):
                safe_boxes.append(feas)
            inc_boxes.append(feas)
            return inc_boxes, safe_boxes, unsafe_boxes
        j = pattern[0]
        jl = feas.lower[n:2 * n]
        ju = feas.upper[n:2 * n]
        nbr_cells = self._position_cells(jl[:2], ju[:2])
        shift = self.targets[i] - self.targets[j]
        for clo, chi in self_cells:
            for nlo, nhi in nbr_cells:
                # interval of ||(e_i + t_i) - (e_j + t_j)||^2
                d2_lo, d2_hi = 0.0, 0.0
                for d in range(2):
                    a = clo[d] - nhi[d] + shift[d]
                    b = chi[d] - nlo[d] + shift[d]
                    lo_d = 0.0 if a <= 0.0 <= b else min(abs(a), abs(b))
                    hi_d = max(abs(a), abs(b))
                    d2_lo += lo_d * lo_d
                    d2_hi += hi_d * hi_d
                box = self._pair_box(feas, clo, chi, nlo, nhi, theta_i)
                if d2_hi < self.d_min ** 2:
                    unsafe_boxes.append(box)
                    continue
                inc_boxes.append(box)
                if d2_lo > self.d_safe ** 2 and self._obstacles_clear(i):
                    safe_boxes.append(box)
        return inc_boxes, safe_boxes, unsafe_boxes

    def _pair_box(self, feas, clo, chi, nlo, nhi, theta_i):
        n = self.model.n
        lo = feas.lower.copy()
        hi = feas.upper.copy()
        lo[0:2], hi[0:2] = clo, chi
        lo[n:n + 2], hi[n:n + 2] = nlo, nhi
        return Interval(lo, hi)

    def _obstacles_clear(self, i):
        """True when no obstacle disc intersects agent i's reachable set."""
        box = self.model.domain[i]
        reach = float(np.linalg.norm(np.maximum(np.abs(box.lower[:2]),
                                                np.abs(box.upper[:2]))))
        for (cx, cy, rad) in self.obstacles:
            d = float(np.linalg.norm(np.array([cx, cy]) - self.targets[i]))
            if d - rad <= reach:
                return False
        return True

    def metrics_context(self):
        return {"kind": "robot", "targets": self.targets,
                "obstacles": self.obstacles, "collision": self.d_min}


def build_scenario(cfg: ScenarioConfig):
    if cfg.scenario == "di2":
        return Di2Scenario(cfg)
    if cfg.scenario == "platoon":
        return PlatoonScenario(cfg)
    if cfg.scenario == "robot":
        return RobotScenario(cfg)
    raise ValueError(f"unknown scenario {cfg.scenario!r}")


# ---- certificate initialization ------------------------------------------


def init_certificate(scn, seed=0) -> tuple[CoRwaCertificate, CouplingParams]:
    cfg = scn.cfg
    nets = cfg.nets
    rng = np.random.default_rng(seed)
    q, n, m = scn.q, scn.model.n, scn.model.m
    v_nets, h_nets, pi_nets = [], [], []
    for i in range(q):
        dims = [n] + list(nets.v_hidden) + [n]
        acts = ["softplus"] * len(nets.v_hidden) + ["identity"]
        inner = mlp(dims, acts, rng=rng, scale=nets.init_scale)
        if not nets.v_hidden:
            inner.layers[0].w += 0.7 * np.eye(n)
        v_nets.append(SquaredNet(inner, delta=nets.delta))

        dim_ext = scn.topo.max_neighborhood[i] * n
        warm = scn.h_warmstart(i)
        if warm is not None and not nets.h_hidden:
            w, b = warm
            h_nets.append(FeedForwardNet([Layer(w[None, :], np.array([b]), "identity")]))
        else:
            dims = [dim_ext] + list(nets.h_hidden) + [1]
            acts = ["tanh"] * len(nets.h_hidden) + ["identity"]
            h_nets.append(mlp(dims, acts, rng=rng, scale=nets.init_scale))

        dims = [dim_ext] + list(nets.pi_hidden) + [m]
        acts = ["relu"] * len(nets.pi_hidden) + ["identity"]
        head = mlp(dims, acts, rng=rng, scale=0.2 * nets.init_scale)
        pi_nets.append(append_output_clamp(head, scn.model.u_lower, scn.model.u_upper))

    coupling = CouplingParams.init(q, lam_scale=nets.lam_init, ups_scale=nets.ups_init)
    lam, ups = coupling.realize()
    margins = CertificateMargins(
        eps0=nets.eps0, eps1=nets.eps1, eps2=nets.eps2, eps3=nets.eps3,
        eps4=nets.eps4, eps5=nets.eps5,
        sigma1=nets.sigma1, sigma2=nets.sigma2, sigma3=nets.sigma3)
    cert = CoRwaCertificate(v_nets, h_nets, pi_nets, lam, ups, margins)
    return cert, coupling
