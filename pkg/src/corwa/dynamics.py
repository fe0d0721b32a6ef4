"""Benchmark dynamics, forward-Euler discretization, neural surrogate
fitting, and the Lipschitz/error-bound constants used by the verifier
margins.

Both benchmark models are expressed in error coordinates (state minus
its goal value), so the certified equilibrium is the origin:

  * omnidirectional robots: state (e1, e2, e_theta) relative to a fixed
    formation target; the inter-robot drift couples neighbors through
    absolute positions reconstructed from the targets.
  * vehicle platoon: state (spacing error, velocity error) relative to
    the desired gap and the leader speed; each follower senses its
    predecessor only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import FeedForwardNet, Interval, Layer, mlp
from .topology import JointState, SystemTopology, extended_state, interaction_mask


class IntegrationError(RuntimeError):
    def __init__(self, agent, msg):
        super().__init__(f"agent {agent}: {msg}")
        self.agent = agent


# ---- benchmark vector fields ---------------------------------------------


def robot_drift(joint: JointState, topo: SystemTopology, i: int,
                gain: float, eps: float) -> np.ndarray:
    """Pairwise interaction drift of an omnidirectional robot.

    f_il = sum_{j in N_i, j != i} gain * (x_il - x_jl) / (||p_i - p_j|| + eps)
    for the two position coordinates; the orientation drift is zero.
    """
    out = np.zeros(3)
    pi = joint.x[i, :2]
    for j in interaction_mask(joint, topo, i).neighbor_ids:
        pj = joint.x[j, :2]
        d = float(np.linalg.norm(pi - pj))
        out[:2] += gain * (pi - pj) / (d + eps)
    return out


def robot_wheel_geometry(wheel_offset: float) -> np.ndarray:
    """Fixed three-wheel geometry matrix of the omnidirectional platform."""
    c, s = math.cos(math.pi / 6.0), math.sin(math.pi / 6.0)
    return np.array([
        [0.0, c, -c],
        [-1.0, s, s],
        [wheel_offset, wheel_offset, wheel_offset],
    ])


def robot_input_matrix(x_i, wheel_radius: float, wheel_offset: float) -> np.ndarray:
    """g_i = Rot(theta) (J^T)^-1 R with R = wheel_radius * I."""
    x_i = np.asarray(x_i, dtype=float)
    th = float(x_i[2])
    rot = np.array([
        [math.cos(th), -math.sin(th), 0.0],
        [math.sin(th), math.cos(th), 0.0],
        [0.0, 0.0, 1.0],
    ])
    j = robot_wheel_geometry(wheel_offset)
    if abs(np.linalg.det(j)) < 1e-12:
        raise ValueError("wheel geometry matrix is singular")
    return rot @ np.linalg.inv(j.T) * wheel_radius


def platoon_derivative(joint: JointState, i: int, u_i: float,
                       leader_velocity_error: float = 0.0) -> np.ndarray:
    """(spacing_dot, velocity_dot) of follower i in error coordinates.

    The first follower has no in-platoon predecessor and reads the
    leader trajectory channel instead.
    """
    if i == 0:
        v_pred = leader_velocity_error
    else:
        v_pred = joint.x[i - 1, 1]
    return np.array([v_pred - joint.x[i, 1], float(u_i)])


# ---- model container ------------------------------------------------------


@dataclass
class DynamicsModel:
    """Control-affine model x_dot = f_i(xbar_i) + g_i(xbar_i) u_i with
    axis-aligned control and state domain boxes."""

    scenario: str
    n: int
    m: int
    drift_fn: object                      # (joint, topo, i) -> (n,)
    gmat_fn: object                       # (joint, topo, i) -> (n, m)
    u_lower: np.ndarray
    u_upper: np.ndarray
    domain: list[Interval]                # per-agent state box
    agent_tags: list[str]
    analytic_bounds: dict | None = None   # per-agent {l_f, l_g, f_max, g_max}

    def __post_init__(self):
        self.u_lower = np.asarray(self.u_lower, dtype=float)
        self.u_upper = np.asarray(self.u_upper, dtype=float)
        if np.any(self.u_lower >= self.u_upper):
            raise ValueError("control bounds box is empty")

    @property
    def q(self):
        return len(self.domain)

    def drift(self, joint, topo, i):
        return np.asarray(self.drift_fn(joint, topo, i), dtype=float)

    def input_matrix(self, joint, topo, i):
        return np.asarray(self.gmat_fn(joint, topo, i), dtype=float)

    def clip_controls(self, u):
        return np.clip(u, self.u_lower, self.u_upper)

    def u_norm_max(self):
        return float(np.linalg.norm(np.maximum(np.abs(self.u_lower), np.abs(self.u_upper))))


def euler_step(model: DynamicsModel, topo: SystemTopology, joint: JointState,
               controls: np.ndarray, dt: float):
    """One forward-Euler step with masks frozen at the step start.

    Controls outside the bounds are clipped; each clip is recorded as a
    (agent, component) event. Returns (next JointState, clip events).
    """
    if dt <= 0:
        raise ValueError("step size must be positive")
    controls = np.asarray(controls, dtype=float)
    clips = []
    nxt = np.empty_like(joint.x)
    for i in range(topo.q):
        u = controls[i]
        cu = model.clip_controls(u)
        for k in np.nonzero(np.abs(cu - u) > 1e-12)[0]:
            clips.append((i, int(k)))
        deriv = model.drift(joint, topo, i) + model.input_matrix(joint, topo, i) @ cu
        if not np.all(np.isfinite(deriv)):
            raise IntegrationError(i, "non-finite derivative")
        nxt[i] = joint.x[i] + dt * deriv
    return JointState(nxt, joint.timestamp + dt), clips


# ---- benchmark model builders ---------------------------------------------


def robot_model(topo: SystemTopology, targets, gain=0.05, eps=0.1,
                wheel_radius=0.02, wheel_offset=0.2, u_max=40.0,
                err_box=(1.5, 1.5, 0.7)) -> DynamicsModel:
    """Robot team in formation-error coordinates.

    `targets` are the absolute formation target positions (q, 2); error
    row i is (p_i - target_i, theta_i). The drift couples robots through
    absolute positions, so targets re-enter through the error shift.
    """
    targets = np.asarray(targets, dtype=float)

    def drift(joint, topo_, i):
        absolute = joint.x.copy()
        absolute[:, :2] += targets
        return robot_drift(JointState(absolute, joint.timestamp), topo_, i, gain, eps)

    def gmat(joint, topo_, i):
        return robot_input_matrix(joint.x[i], wheel_radius, wheel_offset)

    box = Interval(-np.asarray(err_box, dtype=float), np.asarray(err_box, dtype=float))
    g0 = robot_input_matrix(np.zeros(3), wheel_radius, wheel_offset)
    g_norm = float(np.linalg.svd(g0, compute_uv=False)[0])
    per_agent = {}
    for i in range(topo.q):
        # the mask admits at most M_i - 1 neighbors at a time
        k = max(1, min(topo.max_neighborhood[i] - 1, topo.q - 1))
        per_agent[i] = {
            # drift Jacobian entries scale like 2*gain/eps in the worst case
            "l_f": 2.0 * gain * k / eps,
            "l_g": g_norm,          # |d g / d theta| equals the g norm
            "f_max": 2.0 * gain * k,
            "g_max": g_norm,
        }
    return DynamicsModel(
        scenario="robot", n=3, m=3, drift_fn=drift, gmat_fn=gmat,
        u_lower=np.full(3, -u_max), u_upper=np.full(3, u_max),
        domain=[box] * topo.q,
        agent_tags=[f"robot:{gain}:{eps}:{wheel_radius}:{wheel_offset}"] * topo.q,
        analytic_bounds=per_agent,
    )


def platoon_model(q: int, u_max=5.0, spacing_box=(-18.0, 18.0),
                  velocity_box=(-8.0, 8.0)) -> DynamicsModel:
    """Follower platoon in (spacing error, velocity error) coordinates."""

    def drift(joint, topo_, i):
        return platoon_derivative(joint, i, 0.0)

    g = np.array([[0.0], [1.0]])

    def gmat(joint, topo_, i):
        return g

    box = Interval(
        np.array([spacing_box[0], velocity_box[0]]),
        np.array([spacing_box[1], velocity_box[1]]),
    )
    bounds = {"l_f": math.sqrt(2.0), "l_g": 0.0, "f_max": None, "g_max": 1.0}
    per = dict(bounds)
    per["f_max"] = 2.0 * max(abs(velocity_box[0]), abs(velocity_box[1]))
    return DynamicsModel(
        scenario="platoon", n=2, m=1, drift_fn=drift, gmat_fn=gmat,
        u_lower=np.array([-u_max]), u_upper=np.array([u_max]),
        domain=[box] * q,
        agent_tags=["platoon"] * q,
        analytic_bounds={i: per for i in range(q)},
    )


def double_integrator_model(q: int, coupling=0.3, u_max=1.5,
                            pos_box=(-2.0, 2.0), vel_box=(-2.0, 2.0)) -> DynamicsModel:
    """Coupled double integrators: pos_dot = vel, vel_dot = u + coupling
    * sum over neighbors of (pos_j - pos_i)."""

    def drift(joint, topo_, i):
        acc = 0.0
        for j in interaction_mask(joint, topo_, i).neighbor_ids:
            acc += coupling * (joint.x[j, 0] - joint.x[i, 0])
        return np.array([joint.x[i, 1], acc])

    g = np.array([[0.0], [1.0]])

    def gmat(joint, topo_, i):
        return g

    box = Interval(np.array([pos_box[0], vel_box[0]]), np.array([pos_box[1], vel_box[1]]))
    r = max(abs(pos_box[0]), abs(pos_box[1]))
    v = max(abs(vel_box[0]), abs(vel_box[1]))
    bounds = {
        "l_f": math.sqrt(1.0 + (2.0 * coupling * (q - 1)) ** 2) if q > 1 else 1.0,
        "l_g": 0.0,
        "f_max": math.hypot(v, 2.0 * coupling * (q - 1) * r) if q > 1 else v,
        "g_max": 1.0,
    }
    return DynamicsModel(
        scenario="custom", n=2, m=1, drift_fn=drift, gmat_fn=gmat,
        u_lower=np.array([-u_max]), u_upper=np.array([u_max]),
        domain=[box] * q,
        agent_tags=[f"di:{coupling}"] * q,
        analytic_bounds={i: bounds for i in range(q)},
    )


def scalar_test_model(rate=-1.0, box=(-1.0, 1.0), u_max=1.0) -> DynamicsModel:
    """Single-agent x_dot = rate * x + u, the margin-validation system."""

    def drift(joint, topo_, i):
        return np.array([rate * joint.x[i, 0]])

    g = np.array([[1.0]])

    def gmat(joint, topo_, i):
        return g

    r = max(abs(box[0]), abs(box[1]))
    bounds = {"l_f": abs(rate), "l_g": 0.0, "f_max": abs(rate) * r, "g_max": 1.0}
    return DynamicsModel(
        scenario="custom", n=1, m=1, drift_fn=drift, gmat_fn=gmat,
        u_lower=np.array([-u_max]), u_upper=np.array([u_max]),
        domain=[Interval(np.array([box[0]]), np.array([box[1]]))],
        agent_tags=[f"scalar:{rate}"],
        analytic_bounds={0: bounds},
    )


# ---- leader trajectory channel --------------------------------------------


@dataclass
class LeaderTrajectory:
    """Leader velocity profile: piecewise-constant schedule plus an
    optional sinusoidal perturbation around the base speed."""

    base_speed: float = 20.0
    schedule: list = field(default_factory=list)   # (time, speed) switch points
    sin_amplitude: float = 0.0
    sin_period: float = 20.0

    def velocity(self, t: float) -> float:
        v = self.base_speed
        for when, speed in self.schedule:
            if t >= when:
                v = speed
        if self.sin_amplitude:
            v += self.sin_amplitude * math.sin(2.0 * math.pi * t / self.sin_period)
        return v


# ---- surrogate models ------------------------------------------------------


@dataclass
class SurrogateModel:
    """Per-agent, per-mask-pattern neural approximants of f and g.

    Padding rows of the extended state are fixed at zero inside each
    pattern's sub-domain, so a pattern-specific net sees a consistent
    input distribution. eps_hat is the empirical max approximation error
    of the closed-loop dynamics over the evaluation grid (componentwise
    absolute error, inf-norm over components, grid points, and control
    box corners).
    """

    f_nets: dict                       # (agent, pattern) -> FeedForwardNet
    g_nets: dict                       # (agent, pattern) -> FeedForwardNet
    eps_pattern: dict                  # (agent, pattern) -> float
    grid_deltas: dict                  # (agent, pattern) -> per-dim spacing
    m: int

    def eps_hat(self, i):
        vals = [v for (a, _), v in self.eps_pattern.items() if a == i]
        if not vals:
            raise KeyError(f"no surrogate fitted for agent {i}")
        return max(vals)

    def f(self, i, pattern, ext_flat):
        return self.f_nets[(i, pattern)].forward(ext_flat)

    def g(self, i, pattern, ext_flat):
        flat = self.g_nets[(i, pattern)].forward(ext_flat)
        n = flat.shape[-1] // self.m
        return flat.reshape(flat.shape[:-1] + (n, self.m))

    def closed_loop(self, i, pattern, ext_flat, u):
        return self.f(i, pattern, ext_flat) + self.g(i, pattern, ext_flat) @ u


class SurrogateDivergence(RuntimeError):
    def __init__(self, loss):
        super().__init__(f"surrogate training diverged (final loss {loss})")
        self.final_loss = loss


def _pattern_grid(model, topo, i, pattern, points_per_dim):
    """Rectangular grid over the pattern's extended sub-domain; padding
    rows contribute a single zero sample."""
    m_i = topo.max_neighborhood[i]
    axes = []
    deltas = []
    members = [i] + list(pattern)
    for r in range(m_i):
        if r < len(members):
            box = model.domain[members[r]]
            for d in range(model.n):
                lo, hi = box.lower[d], box.upper[d]
                axes.append(np.linspace(lo, hi, points_per_dim))
                deltas.append((hi - lo) / max(points_per_dim - 1, 1))
        else:
            for _ in range(model.n):
                axes.append(np.zeros(1))
                deltas.append(0.0)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.reshape(-1) for g in mesh], axis=1)
    return pts, np.array(deltas)


def _true_fg_on_points(model, topo, i, pattern, pts):
    """Evaluate analytic f_i, g_i on extended-state grid points.

    The joint state is reconstructed so that the queried agent and its
    pattern neighbors take the grid values; all other agents sit at the
    domain center (they do not influence f_i under the fixed pattern).
    """
    members = [i] + list(pattern)
    f_out = np.empty((pts.shape[0], model.n))
    g_out = np.empty((pts.shape[0], model.n * model.m))
    base = np.stack([model.domain[j].center for j in range(model.q)])
    sub = SystemTopology(
        q=topo.q,
        max_neighborhood=list(topo.max_neighborhood),
        sensing_radius=[1e9] * topo.q,
        communicable=[set(pattern) if a == i else set() for a in range(topo.q)],
        position_slice=list(topo.position_slice),
    )
    for k, p in enumerate(pts):
        x = base.copy()
        rows = p.reshape(-1, model.n)
        for r, j in enumerate(members):
            x[j] = rows[r]
        joint = JointState(x)
        f_out[k] = model.drift(joint, sub, i)
        g_out[k] = model.input_matrix(joint, sub, i).reshape(-1)
    return f_out, g_out


def _fit_net(inputs, targets, hidden, acts, budget, rng):
    """Least squares for affine shapes, Adam on MSE otherwise."""
    din, dout = inputs.shape[1], targets.shape[1]
    if not hidden:
        a = np.hstack([inputs, np.ones((inputs.shape[0], 1))])
        sol, *_ = np.linalg.lstsq(a, targets, rcond=None)
        return FeedForwardNet([Layer(sol[:-1].T, sol[-1], "identity")])
    net = mlp([din] + hidden + [dout], acts, rng=rng, scale=1.0)
    mom = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in net.layers]
    vel = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in net.layers]
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    n = inputs.shape[0]
    bsz = min(256, n)
    loss = np.inf
    for t in range(1, budget + 1):
        idx = rng.integers(0, n, size=bsz)
        xb, yb = inputs[idx], targets[idx]
        pred, cache = net.forward_cached(xb)
        err = pred - yb
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            raise SurrogateDivergence(loss)
        _, grads = net.backprop(cache, 2.0 * err / (bsz * max(err.shape[-1], 1)))
        for k, (dw, db) in enumerate(grads):
            mw, mb = mom[k]
            vw, vb = vel[k]
            mw[:] = b1 * mw + (1 - b1) * dw
            mb[:] = b1 * mb + (1 - b1) * db
            vw[:] = b2 * vw + (1 - b2) * dw * dw
            vb[:] = b2 * vb + (1 - b2) * db * db
            corr1 = 1 - b1 ** t
            corr2 = 1 - b2 ** t
            net.layers[k].w -= lr * (mw / corr1) / (np.sqrt(vw / corr2) + eps)
            net.layers[k].b -= lr * (mb / corr1) / (np.sqrt(vb / corr2) + eps)
    return net


def fit_surrogate(model: DynamicsModel, topo: SystemTopology, patterns: dict,
                  points_per_dim=5, hidden=None, acts=None, budget=3000,
                  seed=0) -> SurrogateModel:
    """Fit f/g surrogates for every (agent, mask pattern) and record the
    empirical closed-loop approximation error on the fitting grid.

    `patterns` maps agent id -> list of ordered neighbor tuples. With
    `hidden` empty (the default) the fit is an exact least squares
    affine regression, which reproduces linear benchmark dynamics to
    machine precision.
    """
    hidden = hidden or []
    acts = acts or (["tanh"] * len(hidden) + ["identity"])
    rng = np.random.default_rng(seed)
    f_nets, g_nets, eps_pat, deltas = {}, {}, {}, {}
    u_corners = _box_corners(model.u_lower, model.u_upper)
    for i in range(topo.q):
        for pattern in patterns[i]:
            pts, delta = _pattern_grid(model, topo, i, pattern, points_per_dim)
            f_true, g_true = _true_fg_on_points(model, topo, i, pattern, pts)
            f_net = _fit_net(pts, f_true, hidden, acts, budget, rng)
            g_net = _fit_net(pts, g_true, hidden, acts, budget, rng)
            f_err = f_net.forward(pts) - f_true
            g_err = g_net.forward(pts) - g_true
            worst = 0.0
            for u in u_corners:
                gu = g_err.reshape(-1, model.n, model.m) @ u
                worst = max(worst, float(np.max(np.abs(f_err + gu))))
            f_nets[(i, pattern)] = f_net
            g_nets[(i, pattern)] = g_net
            eps_pat[(i, pattern)] = worst
            deltas[(i, pattern)] = delta
    return SurrogateModel(f_nets, g_nets, eps_pat, deltas, model.m)


def _box_corners(lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    m = lo.shape[0]
    corners = []
    for mask in range(2 ** m):
        c = np.where([(mask >> k) & 1 for k in range(m)], hi, lo)
        corners.append(c)
    return corners


# ---- Lipschitz budgets -----------------------------------------------------


@dataclass
class LipschitzBudget:
    l_x: np.ndarray
    m_x: np.ndarray
    m_bar: np.ndarray
    l_v: np.ndarray
    l_vdot: np.ndarray
    l_h: np.ndarray
    l_hdot: np.ndarray
    sources: list[str]

    def __post_init__(self):
        for name in ("l_x", "m_x", "m_bar", "l_v", "l_vdot", "l_h", "l_hdot"):
            arr = getattr(self, name)
            if np.any(np.asarray(arr) < 0):
                raise ValueError(f"{name} must be nonnegative")


def dynamics_bounds(model: DynamicsModel, topo: SystemTopology, i: int,
                    rng=None, samples=256, safety=1.2):
    """(l_f, l_g, f_max, g_max, source) over the domain box.

    Uses the model's closed-form bounds when present, otherwise the max
    over sampled joint states times a recorded safety factor.
    """
    if model.analytic_bounds and i in model.analytic_bounds:
        b = model.analytic_bounds[i]
        return b["l_f"], b["l_g"], b["f_max"], b["g_max"], "analytic"
    rng = rng or np.random.default_rng(0)
    f_max = g_max = l_f = l_g = 0.0
    prev = None
    for _ in range(samples):
        x = np.stack([
            rng.uniform(model.domain[j].lower, model.domain[j].upper)
            for j in range(model.q)
        ])
        joint = JointState(x)
        f = model.drift(joint, topo, i)
        g = model.input_matrix(joint, topo, i)
        f_max = max(f_max, float(np.linalg.norm(f)))
        g_max = max(g_max, float(np.linalg.norm(g, 2)))
        if prev is not None:
            dx = np.linalg.norm(x - prev[0])
            if dx > 1e-9:
                l_f = max(l_f, float(np.linalg.norm(f - prev[1]) / dx))
                l_g = max(l_g, float(np.linalg.norm(g - prev[2], 2) / dx))
        prev = (x, f, g)
    return l_f * safety, l_g * safety, f_max * safety, g_max * safety, "sampled*1.2"


def _extended_box(model: DynamicsModel, topo: SystemTopology, i: int) -> Interval:
    """Hull of all extended states of agent i, padding rows included."""
    m_i = topo.max_neighborhood[i]
    lows, highs = [model.domain[i].lower], [model.domain[i].upper]
    cand_low = np.min(np.stack([model.domain[j].lower for j in range(model.q)]), axis=0)
    cand_high = np.max(np.stack([model.domain[j].upper for j in range(model.q)]), axis=0)
    for _ in range(m_i - 1):
        lows.append(np.minimum(cand_low, 0.0))
        highs.append(np.maximum(cand_high, 0.0))
    return Interval(np.concatenate(lows), np.concatenate(highs))


def compute_lipschitz_budget(model: DynamicsModel, cert, topo: SystemTopology,
                             rng=None) -> LipschitzBudget:
    """Aggregate the per-agent constants feeding the verification margins.

    Closed-loop constants compose the dynamics bounds with the network
    Lipschitz bounds: L_x <= L_f + g_max L_pi + L_g u_max and
    M_x <= f_max + g_max u_max. Certificate-rate constants follow
    L_Vdot <= S_V M_x + L_V L_x (and the barrier analogue with the
    neighborhood-aggregated speed).
    """
    for box in model.domain:
        if not np.all(np.isfinite(box.lower)) or not np.all(np.isfinite(box.upper)):
            raise ValueError("domain boxes must be bounded")
    q = topo.q
    u_norm = model.u_norm_max()
    l_x = np.zeros(q)
    m_x = np.zeros(q)
    l_v = np.zeros(q)
    s_v = np.zeros(q)
    l_h = np.zeros(q)
    s_h = np.zeros(q)
    sources = []
    ext_boxes = [_extended_box(model, topo, i) for i in range(q)]
    for i in range(q):
        l_f, l_g, f_max, g_max, src = dynamics_bounds(model, topo, i, rng=rng)
        l_pi = cert.controller_nets[i].lipschitz_on_box(ext_boxes[i])
        l_x[i] = l_f + g_max * l_pi + l_g * u_norm
        m_x[i] = f_max + g_max * u_norm
        l_v[i] = cert.v_nets[i].lipschitz_on_box(model.domain[i])
        s_v[i] = cert.v_nets[i].gradient_lipschitz_on_box(model.domain[i])
        l_h[i] = cert.h_nets[i].lipschitz_on_box(ext_boxes[i])
        s_h[i] = cert.h_nets[i].gradient_lipschitz_upper()
        sources.append(src)
    m_bar = np.zeros(q)
    l_bar = np.zeros(q)
    for i in range(q):
        others = sorted(
            (m_x[j] for j in topo.communicable[i] if j != i), reverse=True
        )[: topo.max_neighborhood[i] - 1]
        m_bar[i] = math.sqrt(m_x[i] ** 2 + sum(v * v for v in others))
        lo = sorted(
            (l_x[j] for j in topo.communicable[i] if j != i), reverse=True
        )[: topo.max_neighborhood[i] - 1]
        l_bar[i] = math.sqrt(l_x[i] ** 2 + sum(v * v for v in lo))
    l_vdot = s_v * m_x + l_v * l_x
    l_hdot = s_h * m_bar + l_h * l_bar
    return LipschitzBudget(l_x, m_x, m_bar, l_v, l_vdot, l_h, l_hdot, sources)
