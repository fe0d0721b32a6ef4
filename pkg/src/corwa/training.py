"""Joint training of controllers, certificates, and coupling matrices by
minibatch gradient descent on the constrained-optimization surrogate
loss: imitation of a nominal controller plus hinge penalties for every
certificate condition, with small slacks for numerical robustness.

Lie derivatives are estimated with a one-step forward difference at the
configured step size, which keeps training consistent with the
discrete-time conditions the verifier checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .certificate import CertificateMargins, CoRwaCertificate, CouplingParams
from .network import FeedForwardNet, SquaredNet
from .topology import JointState, SystemTopology, extended_state, interaction_mask

REGION_TAGS = ("interior", "unsafe", "goal", "initial")


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    decay_factor: float = 0.5
    decay_interval: int = 20
    epochs: int = 50
    batch_size: int = 32
    dataset_size: int = 30000
    val_split: float = 0.2
    seed: int = 0
    lie_step: float = 0.05            # one-step simulation interval
    unsafe_fraction: float = 0.10
    boundary_fraction: float = 0.10

    def __post_init__(self):
        if not (0.0 < self.val_split < 1.0):
            raise ValueError("validation split must be in (0, 1)")
        if self.learning_rate < 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("invalid training hyperparameters")
        if self.lie_step <= 0:
            raise ValueError("lie_step must be positive")

    def lr_at(self, epoch):
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_interval)


@dataclass
class Sample:
    x: np.ndarray                     # joint state (q, n)
    tags: list[str]                   # per-agent region tag
    nominal: np.ndarray | None = None  # (q, m) nominal control labels
    weight: float = 1.0
    barrier_safe: list[bool] | None = None   # per-agent: inside the
    # h >= eps0 region; None means "not unsafe" (no buffer band)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        for t in self.tags:
            if t not in REGION_TAGS:
                raise ValueError(f"unknown region tag {t!r}")


@dataclass
class LossTerms:
    l_ctrl: float
    l_clf: float
    l_cbf: float
    total: float


def sample_dataset(scenario, config: TrainingConfig) -> list[Sample]:
    """Uniform domain samples, stratified so at least the configured
    fractions are unsafe-tagged or near set boundaries; deterministic
    for a fixed seed."""
    rng = np.random.default_rng(config.seed)
    model, topo = scenario.model, scenario.topo
    total = config.dataset_size
    n_unsafe = int(math.ceil(config.unsafe_fraction * total))
    n_boundary = int(math.ceil(config.boundary_fraction * total))
    samples = []

    def uniform_joint():
        return np.stack([
            rng.uniform(model.domain[j].lower, model.domain[j].upper)
            for j in range(topo.q)
        ])

    def finish(x):
        joint = JointState(x)
        tags = [scenario.region_tag(joint, j) for j in range(topo.q)]
        nom = np.stack([scenario.nominal(joint, j) for j in range(topo.q)])
        bs = [bool(scenario.barrier_safe(joint, j)) for j in range(topo.q)]
        return Sample(x, tags, nominal=nom, barrier_safe=bs)

    made_unsafe = 0
    for _ in range(40 * n_unsafe):
        if made_unsafe >= n_unsafe:
            break
        x = scenario.sample_unsafe(rng)
        if x is None:
            break
        s = finish(x)
        if "unsafe" in s.tags:
            samples.append(s)
            made_unsafe += 1
    for _ in range(n_boundary):
        x = scenario.sample_boundary(rng)
        samples.append(finish(x))
    while len(samples) < total:
        samples.append(finish(uniform_joint()))
    return samples[:total]


# ---- loss and gradients -----------------------------------------------------


def _batch_ext(cert, model, topo, xs):
    """Per-agent batched extended states, masks, and dynamics terms."""
    bsz, q = xs.shape[0], topo.q
    data = []
    for i in range(q):
        ext = np.empty((bsz, topo.max_neighborhood[i] * model.n))
        ids = []
        masks = np.empty((bsz, q))
        f = np.empty((bsz, model.n))
        g = np.empty((bsz, model.n, model.m))
        for s in range(bsz):
            joint = JointState(xs[s])
            e = extended_state(joint, topo, i)
            ext[s] = e.flat
            im = interaction_mask(joint, topo, i)
            ids.append([i] + im.neighbor_ids)
            masks[s] = im.mask
            f[s] = model.drift(joint, topo, i)
            g[s] = model.input_matrix(joint, topo, i)
        data.append({"ext": ext, "ids": ids, "mask": masks, "f": f, "g": g})
    return data


def _scalar_grad_batch(net, x):
    """Batched input gradient of a scalar-valued certificate net."""
    if isinstance(net, SquaredNet):
        y, cache = net.inner.forward_cached(x)
        d = y - net._n0
        dx, _ = net.inner.backprop(cache, 2.0 * d)
        return dx + 2.0 * net.delta * x
    y, cache = net.forward_cached(x)
    dx, _ = net.backprop(cache, np.ones_like(y))
    return dx


def _value_batch(net, x):
    out = net.forward(x)
    return out if out.ndim == 1 else out[:, 0]


def loss_terms(cert: CoRwaCertificate, batch: list[Sample], topo: SystemTopology,
               model, lie_step: float) -> LossTerms:
    terms, _ = _loss_core(cert, None, batch, topo, model, lie_step, want_grads=False)
    return terms


def loss_gradients(cert: CoRwaCertificate, coupling: CouplingParams | None,
                   batch: list[Sample], topo: SystemTopology, model,
                   lie_step: float):
    return _loss_core(cert, coupling, batch, topo, model, lie_step, want_grads=True)


def _zeros_like_params(net):
    inner = net.inner if isinstance(net, SquaredNet) else net
    return [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in inner.layers]


def _acc(acc, grads, scale=1.0):
    for (aw, ab), (gw, gb) in zip(acc, grads):
        aw += scale * gw
        ab += scale * gb


def _loss_core(cert, coupling, batch, topo, model, dt, want_grads):
    """Shared loss/gradient evaluation.

    Hinge conventions (margins from the certificate):
      clf:     relu(r_V + eps1), r_V = (V(x+) - V(x))/dt - (lam_i o A)^T V
      cbf:     relu(eps3 - r_h), r_h = (h(xbar+) - h(xbar))/dt - (mu_i o A)^T h
      unsafe:  relu(h + eps0 + eps4)
      safe:    relu(eps5 - h)
    plus relu(eps2 - V) positivity when V is not positive by construction.
    """
    mg = cert.margins
    q = topo.q
    bsz = len(batch)
    if bsz == 0:
        raise ValueError("empty batch")
    xs = np.stack([s.x for s in batch])
    w = np.array([s.weight for s in batch])
    wsum = float(w.sum())
    data = _batch_ext(cert, model, topo, xs)

    # forward quantities per agent
    u = []
    u_cache = []
    flow = []
    for i in range(q):
        ui, ci = cert.controller_nets[i].forward_cached(data[i]["ext"])
        u.append(ui)
        u_cache.append(ci)
        flow.append(data[i]["f"] + np.einsum("bnm,bm->bn", data[i]["g"], ui))
    flow = np.stack(flow, axis=1)                      # (B, q, n)
    x_next = xs + dt * flow

    v_now = np.stack([_value_batch(cert.v_nets[i], xs[:, i]) for i in range(q)], axis=1)
    v_next = np.stack(
        [_value_batch(cert.v_nets[i], x_next[:, i]) for i in range(q)], axis=1)
    h_now = np.stack(
        [_value_batch(cert.h_nets[i], data[i]["ext"]) for i in range(q)], axis=1)

    # next extended states under frozen masks
    ext_next = []
    for i in range(q):
        nxt = data[i]["ext"].copy()
        for s in range(bsz):
            for r, j in enumerate(data[i]["ids"][s]):
                nxt[s, r * model.n:(r + 1) * model.n] += dt * flow[s, j]
        ext_next.append(nxt)
    h_next = np.stack(
        [_value_batch(cert.h_nets[i], ext_next[i]) for i in range(q)], axis=1)

    lam_w = np.stack([data[i]["mask"] * cert.lam[:, i] for i in range(q)], axis=1)
    ups_w = np.stack([data[i]["mask"] * cert.ups[:, i] for i in range(q)], axis=1)
    r_v = (v_next - v_now) / dt - np.einsum("biq,bq->bi", lam_w, v_now)
    r_h = (h_next - h_now) / dt - np.einsum("biq,bq->bi", ups_w, h_now)

    unsafe = np.array([[s.tags[i] == "unsafe" for i in range(q)] for s in batch])
    safe = np.array([
        s.barrier_safe if s.barrier_safe is not None
        else [s.tags[i] != "unsafe" for i in range(q)]
        for s in batch
    ])
    nominal = np.stack([
        s.nominal if s.nominal is not None else np.zeros((q, model.m))
        for s in batch
    ])
    has_nominal = np.array([s.nominal is not None for s in batch], dtype=float)

    du = np.stack(u, axis=1) - nominal                 # (B, q, m)
    ctrl_per = (du * du).sum(axis=2) * has_nominal[:, None]
    clf_hinge = np.maximum(r_v + mg.eps1, 0.0)
    pd_free = [not isinstance(cert.v_nets[i], SquaredNet) for i in range(q)]
    pos_hinge = np.zeros_like(v_now)
    for i in range(q):
        if pd_free[i]:
            pos_hinge[:, i] = np.maximum(mg.eps2 - v_now[:, i], 0.0)
    cbf_hinge = np.maximum(mg.eps3 - r_h, 0.0)
    h_unsafe_hinge = np.where(unsafe, np.maximum(h_now + mg.eps0 + mg.eps4, 0.0), 0.0)
    h_safe_hinge = np.where(safe, np.maximum(mg.eps5 - h_now, 0.0), 0.0)

    def wmean(per_sample_agent):
        return float((w[:, None] * per_sample_agent).sum() / (wsum * q))

    l_ctrl = wmean(ctrl_per)
    l_clf = wmean(clf_hinge) + wmean(pos_hinge)
    l_cbf = wmean(cbf_hinge) + wmean(h_unsafe_hinge) + wmean(h_safe_hinge)
    total = mg.sigma1 * l_ctrl + mg.sigma2 * l_clf + mg.sigma3 * l_cbf
    terms = LossTerms(l_ctrl, l_clf, l_cbf, total)
    if not np.isfinite(total):
        raise TrainingDivergence(-1, total)
    if not want_grads:
        return terms, None

    # ---- backward ----------------------------------------------------
    scale = w / (wsum * q)                             # per-sample weight
    v_grads = [_zeros_like_params(cert.v_nets[i]) for i in range(q)]
    h_grads = [_zeros_like_params(cert.h_nets[i]) for i in range(q)]
    pi_grads = [_zeros_like_params(cert.controller_nets[i]) for i in range(q)]
    d_lam = np.zeros((q, q))
    d_ups = np.zeros((q, q))

    clf_act = mg.sigma2 * scale[:, None] * (clf_hinge > 0.0)             # (B, q)
    cbf_act = -mg.sigma3 * scale[:, None] * (cbf_hinge > 0.0)            # d/dr_h
    # upstream coefficients on raw values
    up_v_next = clf_act / dt                                             # (B, q)
    up_v_now = -clf_act / dt - np.einsum("biq,bi->bq", lam_w, clf_act)
    up_h_next = cbf_act / dt
    up_h_now = -cbf_act / dt - np.einsum("biq,bi->bq", ups_w, cbf_act)
    for i in range(q):
        if pd_free[i]:
            up_v_now[:, i] += -mg.sigma2 * scale * (pos_hinge[:, i] > 0.0)
    up_h_now += mg.sigma3 * scale[:, None] * (
        (h_unsafe_hinge > 0.0).astype(float) - (h_safe_hinge > 0.0).astype(float))

    # coupling matrix gradients: dr_v[b,i]/dlam[j,i] = -mask*v_now[b,j]
    d_lam -= np.einsum("bi,bij,bj->ji", clf_act,
                       np.stack([data[i]["mask"] for i in range(q)], axis=1), v_now)
    d_ups -= np.einsum("bi,bij,bj->ji", cbf_act,
                       np.stack([data[i]["mask"] for i in range(q)], axis=1), h_now)

    # V-net parameter and pi-net chain gradients
    dv_next_dx = []
    for i in range(q):
        _acc(v_grads[i], _v_param_grads(cert.v_nets[i], x_next[:, i], up_v_next[:, i]))
        _acc(v_grads[i], _v_param_grads(cert.v_nets[i], xs[:, i], up_v_now[:, i]))
        dv_next_dx.append(_scalar_grad_batch(cert.v_nets[i], x_next[:, i]))

    # h-net parameter gradients and input grads at the next extended state
    dh_next_dx = []
    for i in range(q):
        yn, cn = cert.h_nets[i].forward_cached(ext_next[i])
        dxn, gn = cert.h_nets[i].backprop(cn, up_h_next[:, i][:, None])
        _acc(h_grads[i], gn)
        y0, c0 = cert.h_nets[i].forward_cached(data[i]["ext"])
        _, g0 = cert.h_nets[i].backprop(c0, up_h_now[:, i][:, None])
        _acc(h_grads[i], g0)
        dh_raw, _ = cert.h_nets[i].backprop(cn, np.ones((bsz, 1)))
        dh_next_dx.append(dh_raw)                      # (B, M_i n)

    # controller gradients: imitation + Lyapunov path + barrier paths
    up_u = [np.zeros((bsz, model.m)) for _ in range(q)]
    for i in range(q):
        up_u[i] += (mg.sigma1 * scale * has_nominal)[:, None] * 2.0 * du[:, i]
        # r_v[i] depends on u_i through x_next_i = x_i + dt (f + g u)
        up_u[i] += dt * up_v_next[:, i][:, None] * np.einsum(
            "bn,bnm->bm", dv_next_dx[i], data[i]["g"])
    # r_h[i] depends on u_j for every member row j of ext_i
    for i in range(q):
        for s in range(bsz):
            c = up_h_next[s, i]
            if c == 0.0:
                continue
            for r, j in enumerate(data[i]["ids"][s]):
                row = dh_next_dx[i][s, r * model.n:(r + 1) * model.n]
                up_u[j][s] += dt * c * (row @ data[j]["g"][s])
    for i in range(q):
        _, gp = cert.controller_nets[i].backprop(u_cache[i], up_u[i])
        _acc(pi_grads[i], gp)

    grads = {"v": v_grads, "h": h_grads, "pi": pi_grads,
             "lam": d_lam, "ups": d_ups}
    return terms, grads


def _v_param_grads(net, x, upstream):
    """Batched parameter gradients of sum_b upstream_b * V(x_b)."""
    if isinstance(net, SquaredNet):
        y, cache = net.inner.forward_cached(x)
        d = y - net._n0
        _, gx = net.inner.backprop(cache, 2.0 * upstream[:, None] * d)
        zero = np.zeros((1, net.input_dim))
        y0, c0 = net.inner.forward_cached(zero)
        up0 = -2.0 * (upstream[:, None] * d).sum(axis=0, keepdims=True)
        _, g0 = net.inner.backprop(c0, up0)
        return [(a[0] + b[0], a[1] + b[1]) for a, b in zip(gx, g0)]
    y, cache = net.forward_cached(x)
    _, g = net.backprop(cache, upstream[:, None])
    return g


# ---- optimizer ---------------------------------------------------------------


def _apply_sgd(net, grads, lr):
    inner = net.inner if isinstance(net, SquaredNet) else net
    n_train = len(inner.layers) - inner.frozen_tail
    for k in range(n_train):
        inner.layers[k].w -= lr * grads[k][0]
        inner.layers[k].b -= lr * grads[k][1]
    if isinstance(net, SquaredNet):
        net.refresh()


def train_round(cert: CoRwaCertificate, coupling: CouplingParams,
                dataset: list[Sample], config: TrainingConfig,
                topo: SystemTopology, model) -> list[dict]:
    """One training round of minibatch gradient descent.

    Re-projects the coupling matrices after every epoch so Lambda stays
    Metzler and Hurwitz and Upsilon stays Metzler. Returns the loss
    curve: one record per epoch with train terms and validation total.
    """
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    n_val = max(1, int(round(config.val_split * n)))
    perm = rng.permutation(n)
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    if len(train_idx) == 0:
        raise ValueError("dataset too small for the configured split")
    train_set = [dataset[k] for k in train_idx]
    val_set = [dataset[k] for k in val_idx]
    curve = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[train_idx[k]] for k in order[start:start + config.batch_size]]
            terms, grads = loss_gradients(cert, coupling, batch, topo, model,
                                          config.lie_step)
            if not np.isfinite(terms.total):
                raise TrainingDivergence(epoch, terms.total)
            if lr > 0.0:
                for i in range(topo.q):
                    _apply_sgd(cert.v_nets[i], grads["v"][i], lr)
                    _apply_sgd(cert.h_nets[i], grads["h"][i], lr)
                    _apply_sgd(cert.controller_nets[i], grads["pi"][i], lr)
                coupling.apply_gradients(grads["lam"], grads["ups"], lr)
                cert.lam, cert.ups = coupling.realize()
        coupling.project_hurwitz()
        cert.lam, cert.ups = coupling.realize()
        # end-of-epoch losses on fixed splits, so the curve reflects the
        # parameters rather than the minibatch partition
        tr = loss_terms(cert, train_set, topo, model, config.lie_step)
        val = loss_terms(cert, val_set, topo, model, config.lie_step)
        curve.append({
            "epoch": epoch,
            "l_ctrl": tr.l_ctrl, "l_clf": tr.l_clf,
            "l_cbf": tr.l_cbf, "total": tr.total,
            "val_total": val.total,
        })
    return curve


# ---- nominal controllers ------------------------------------------------------


@dataclass
class RobotFieldParams:
    k_target: float = 0.8
    k_form: float = 0.8
    k_obs: float = 6.0
    k_agent: float = 1.2
    d_obs: float = 2.5
    d_agent: float = 0.1
    k_cpl: float = 0.1
    eps_cpl: float = 0.1
    v_max: float = 1.0
    u_max: float = 40.0


def nominal_robot_controller(joint: JointState, topo: SystemTopology, i: int,
                             targets, obstacles, params: RobotFieldParams,
                             wheel_radius=0.02, wheel_offset=0.2,
                             is_leader=None) -> np.ndarray:
    """Artificial potential field mapped to wheel velocities.

    Attractive pull toward the formation target, repulsive pushes from
    obstacles (within d_obs) and other agents (within d_agent), plus a
    short-range spring when separations drop below eps_cpl. The planar
    field is clipped to the translational speed limit, augmented with a
    proportional heading term, and mapped through the inverse input
    matrix onto wheel velocities clipped at u_max.

    Positions here are absolute; `targets` holds each agent's formation
    target. Obstacles are (cx, cy, radius) triples.
    """
    from .dynamics import robot_input_matrix

    p = joint.x[i, :2]
    gain = params.k_target if (is_leader is None or is_leader[i]) else params.k_form
    field = -gain * (p - np.asarray(targets[i], dtype=float))
    for (cx, cy, rad) in obstacles:
        delta = p - np.array([cx, cy])
        d = float(np.linalg.norm(delta)) - rad
        if 1e-9 < d < params.d_obs:
            field += params.k_obs * (params.d_obs - d) / params.d_obs * delta / (d + rad)
    for j in range(topo.q):
        if j == i:
            continue
        delta = p - joint.x[j, :2]
        d = float(np.linalg.norm(delta))
        if 1e-9 < d < params.d_agent:
            field += params.k_agent * (params.d_agent - d) / params.d_agent * delta / d
        if 1e-9 < d < params.eps_cpl:
            field += params.k_cpl * (params.eps_cpl - d) * delta / d
    speed = float(np.linalg.norm(field))
    if speed > params.v_max:
        field *= params.v_max / speed
    omega = -gain * joint.x[i, 2]
    g = robot_input_matrix(joint.x[i], wheel_radius, wheel_offset)
    u = np.linalg.solve(g, np.array([field[0], field[1], omega]))
    return np.clip(u, -params.u_max, params.u_max)


def nominal_platoon_controller(joint: JointState, i: int, k_s=0.45, k_v=0.5,
                               u_max=5.0) -> np.ndarray:
    """Linear spacing-velocity feedback on error coordinates:
    u = k_s e_s + k_v (e_v_pred - e_v), clipped to the control bounds."""
    e_s, e_v = joint.x[i]
    e_v_pred = joint.x[i - 1, 1] if i > 0 else 0.0
    u = k_s * e_s + k_v * (e_v_pred - e_v)
    return np.array([float(np.clip(u, -u_max, u_max))])
