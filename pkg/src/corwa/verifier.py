"""Branch-and-bound verification of the discrete-time certificate
conditions with explicit discretization/approximation error margins.

Each query fixes one agent, one condition tag, and one ordered mask
pattern, and asks whether the condition holds over an extended-state
box (self row, neighbor rows nearest-first, padding rows pinned at
zero). Boxes are bounded soundly with interval arithmetic; the
finite-difference terms (V(x + T F) - V(x)) / T are enclosed through
the exact mean-value identity

    (V(x + T F) - V(x)) / T = grad V(xi) . F,   xi on the step segment,

which avoids the 1/T width blow-up a naive interval subtraction would
produce. Counterexamples are re-validated by concrete evaluation on a
reconstructed joint state before being returned.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .certificate import CoRwaCertificate
from .dynamics import DynamicsModel, LipschitzBudget, SurrogateModel
from .network import Interval
from .topology import JointState, SystemTopology, extended_state, interaction_mask

TAGS = (
    "lyap_decrement",
    "barrier_increment",
    "lyap_positive",
    "barrier_safe_positive",
    "barrier_unsafe_negative",
)

VERIFIED = "Verified"
COUNTEREXAMPLE = "Counterexample"
UNKNOWN = "Unknown"

# a witness must violate its condition by more than numerical dust
WITNESS_TOL = 1e-9


@dataclass
class ErrorMargins:
    e_v: np.ndarray
    e_h: np.ndarray

    def __post_init__(self):
        self.e_v = np.asarray(self.e_v, dtype=float)
        self.e_h = np.asarray(self.e_h, dtype=float)
        if np.any(self.e_v < 0) or np.any(self.e_h < 0):
            raise ValueError("error margins must be nonnegative")


def compute_margins(budget: LipschitzBudget, t_step: float, eps_hat) -> ErrorMargins:
    """Margins transferring the discrete checks to the continuous system:

    e^V_i = T/2 (L_V L_x + L_Vdot) Mbar + L_V eps_hat, and the barrier
    analogue with (L_h, L_hdot).
    """
    if t_step < 0:
        raise ValueError("sampling interval must be nonnegative")
    eps_hat = np.asarray(eps_hat, dtype=float)
    if np.any(eps_hat < 0):
        raise ValueError("approximation errors must be nonnegative")
    e_v = 0.5 * t_step * (budget.l_v * budget.l_x + budget.l_vdot) * budget.m_bar \
        + budget.l_v * eps_hat
    e_h = 0.5 * t_step * (budget.l_h * budget.l_x + budget.l_hdot) * budget.m_bar \
        + budget.l_h * eps_hat
    return ErrorMargins(e_v, e_h)


@dataclass
class VerificationQuery:
    agent: int
    tag: str
    pattern: tuple[int, ...]
    box: Interval                    # extended layout, padding rows at zero
    margin: float = 0.0
    max_depth: int = 20
    max_boxes: int = 100_000

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown condition tag {self.tag!r}")
        if self.max_depth <= 0 or self.max_boxes <= 0:
            raise ValueError("budget must be positive")


@dataclass
class VerificationOutcome:
    status: str
    agent: int
    tag: str
    pattern: tuple[int, ...]
    witness: np.ndarray | None = None      # joint state (q, n) when Counterexample
    witness_residual: float = 0.0
    boxes_explored: int = 0
    max_depth_reached: int = 0
    wall_time: float = 0.0
    frontier: list = field(default_factory=list)   # unresolved box centers
    # (joint states) when Unknown; near-violations worth training on

    def to_dict(self):
        return {
            "agent": self.agent,
            "tag": self.tag,
            "pattern": list(self.pattern),
            "status": self.status,
            "witness": None if self.witness is None else self.witness.tolist(),
            "witness_residual": self.witness_residual,
            "boxes": self.boxes_explored,
            "depth": self.max_depth_reached,
            "wall_time": self.wall_time,
        }


@dataclass
class VerificationProblem:
    """Static context shared by all queries of one verification pass."""

    model: DynamicsModel
    topo: SystemTopology
    t_step: float
    margins: ErrorMargins
    patterns: list[list[tuple[int, ...]]]   # fitted mask patterns per agent

    def member_ids(self, i, pattern):
        return [i] + list(pattern)


def enumerate_patterns(topo: SystemTopology, i: int) -> list[tuple[int, ...]]:
    """All ordered neighbor tuples up to length M_i - 1 drawn from the
    communicable set. The dynamic mask is piecewise constant, so the
    verifier case-splits on these patterns."""
    cands = sorted(j for j in topo.communicable[i] if j != i)
    pats = [()]
    for k in range(1, topo.max_neighborhood[i]):
        pats.extend(itertools.permutations(cands, k))
    return pats


def pattern_feasible_box(model: DynamicsModel, topo: SystemTopology, i: int,
                         pattern: tuple[int, ...]) -> Interval | None:
    """Extended-layout box enclosing all states consistent with the
    pattern: each selected neighbor must lie within the sensing radius
    (approximated by inflating the self position box, offsets included),
    and a pattern that still has neighbor slots free may not exclude a
    candidate that can never leave the sensing radius. Returns None for
    infeasible patterns."""
    n = model.n
    m_i = topo.max_neighborhood[i]
    pslice = topo.position_slice
    r = topo.sensing_radius[i]
    off_i = np.zeros(len(pslice)) + topo.offset(i)
    if len(pattern) < m_i - 1:
        for j in sorted(topo.communicable[i]):
            if j == i or j in pattern:
                continue
            gap = 0.0
            off_j = np.zeros(len(pslice)) + topo.offset(j)
            for a, d in enumerate(pslice):
                lo_d = (model.domain[i].lower[d] + off_i[a]) - (
                    model.domain[j].upper[d] + off_j[a])
                hi_d = (model.domain[i].upper[d] + off_i[a]) - (
                    model.domain[j].lower[d] + off_j[a])
                gap += max(abs(lo_d), abs(hi_d)) ** 2
            if gap <= r * r:
                return None        # j is always in range, yet excluded
    lo = np.zeros(m_i * n)
    hi = np.zeros(m_i * n)
    lo[:n] = model.domain[i].lower
    hi[:n] = model.domain[i].upper
    for k, j in enumerate(pattern):
        jl = model.domain[j].lower.copy()
        ju = model.domain[j].upper.copy()
        off_j = np.zeros(len(pslice)) + topo.offset(j)
        for a, d in enumerate(pslice):
            shift = off_i[a] - off_j[a]
            jl[d] = max(jl[d], model.domain[i].lower[d] + shift - r)
            ju[d] = min(ju[d], model.domain[i].upper[d] + shift + r)
            if jl[d] > ju[d]:
                return None
        lo[(k + 1) * n:(k + 2) * n] = jl
        hi[(k + 1) * n:(k + 2) * n] = ju
    return Interval(lo, hi)


def feasible_patterns(model: DynamicsModel, topo: SystemTopology):
    """Per-agent mask patterns whose consistent region is nonempty."""
    out = []
    for i in range(topo.q):
        pats = [p for p in enumerate_patterns(topo, i)
                if pattern_feasible_box(model, topo, i, p) is not None]
        if not pats:
            raise ValueError(f"agent {i} has no feasible mask pattern")
        out.append(pats)
    return out


# ---- interval helpers ------------------------------------------------------


def _idot(al, au, bl, bu):
    """Batched interval dot product along the last axis."""
    cands = np.stack([al * bl, al * bu, au * bl, au * bu])
    return cands.min(axis=0).sum(axis=-1), cands.max(axis=0).sum(axis=-1)


def _imatvec(gl, gu, ul, uu):
    """Batched interval matrix (B,n,m) times interval vector (B,m)."""
    cands = np.stack([
        gl * ul[:, None, :], gl * uu[:, None, :],
        gu * ul[:, None, :], gu * uu[:, None, :],
    ])
    return cands.min(axis=0).sum(axis=-1), cands.max(axis=0).sum(axis=-1)


def _iscale(c, lo, hi):
    return (c * lo, c * hi) if c >= 0 else (c * hi, c * lo)


class _BoundEngine:
    """Batched sound bounds for every condition tag over extended boxes."""

    def __init__(self, cert: CoRwaCertificate, surrogate: SurrogateModel,
                 problem: VerificationProblem):
        self.cert = cert
        self.sur = surrogate
        self.pb = problem

    # -- closed-loop derivative of the queried agent over its own box --

    def _self_flow(self, i, pattern, lo, hi):
        u_l, u_u = self.cert.controller_nets[i].bounds_batch(lo, hi)
        f_l, f_u = self.sur.f_nets[(i, pattern)].bounds_batch(lo, hi)
        g_l, g_u = self.sur.g_nets[(i, pattern)].bounds_batch(lo, hi)
        n, m = self.pb.model.n, self.pb.model.m
        g_l = g_l.reshape(-1, n, m)
        g_u = g_u.reshape(-1, n, m)
        gu_l, gu_u = _imatvec(g_l, g_u, u_l, u_u)
        return f_l + gu_l, f_u + gu_u

    # -- derivative of a neighbor agent, hulled over its own patterns --

    def _neighbor_boxes(self, j, jpat, i, pattern, lo, hi):
        """Extended box of neighbor j under j's pattern jpat, reusing
        query rows where the member agent is visible in the query."""
        n = self.pb.model.n
        members = self.pb.member_ids(i, pattern)
        m_j = self.pb.topo.max_neighborhood[j]
        blo = np.zeros((lo.shape[0], m_j * n))
        bhi = np.zeros((lo.shape[0], m_j * n))
        for r, a in enumerate([j] + list(jpat)):
            sl = slice(r * n, (r + 1) * n)
            if a in members:
                k = members.index(a)
                blo[:, sl] = lo[:, k * n:(k + 1) * n]
                bhi[:, sl] = hi[:, k * n:(k + 1) * n]
            else:
                blo[:, sl] = self.pb.model.domain[a].lower
                bhi[:, sl] = self.pb.model.domain[a].upper
        return blo, bhi

    def _agent_flow_hull(self, j, i, pattern, lo, hi):
        """Hull of j's closed-loop derivative over all of j's patterns."""
        fl = fu = None
        for jpat in self.pb.patterns[j]:
            blo, bhi = self._neighbor_boxes(j, jpat, i, pattern, lo, hi)
            u_l, u_u = self.cert.controller_nets[j].bounds_batch(blo, bhi)
            f_l, f_u = self.sur.f_nets[(j, jpat)].bounds_batch(blo, bhi)
            g_l, g_u = self.sur.g_nets[(j, jpat)].bounds_batch(blo, bhi)
            n, m = self.pb.model.n, self.pb.model.m
            gu_l, gu_u = _imatvec(g_l.reshape(-1, n, m), g_u.reshape(-1, n, m),
                                  u_l, u_u)
            cl, cu = f_l + gu_l, f_u + gu_u
            fl = cl if fl is None else np.minimum(fl, cl)
            fu = cu if fu is None else np.maximum(fu, cu)
        return fl, fu

    def _agent_h_hull(self, j, i, pattern, lo, hi):
        hl = hu = None
        for jpat in self.pb.patterns[j]:
            blo, bhi = self._neighbor_boxes(j, jpat, i, pattern, lo, hi)
            vl, vu = self.cert.h_nets[j].bounds_batch(blo, bhi)
            hl = vl if hl is None else np.minimum(hl, vl)
            hu = vu if hu is None else np.maximum(hu, vu)
        return hl[:, 0], hu[:, 0]

    # -- per-tag residual bounds over batched boxes --------------------

    def bounds(self, query: VerificationQuery, lo, hi):
        """Residual enclosure per box. Sign convention: residual <= 0
        means the condition holds for every tag, so an upper bound <= 0
        proves a box."""
        i, pattern = query.agent, query.pattern
        n = self.pb.model.n
        t = self.pb.t_step
        if query.tag == "lyap_decrement":
            fl, fu = self._self_flow(i, pattern, lo, hi)
            xl, xu = lo[:, :n], hi[:, :n]
            # hull of the Euler step segment
            sl = xl + t * np.minimum(fl, 0.0)
            su = xu + t * np.maximum(fu, 0.0)
            jl, ju = self.cert.v_nets[i].jacobian_bounds_batch(sl, su)
            dl, du = _idot(jl[:, 0, :], ju[:, 0, :], fl, fu)
            cl, cu = self._lam_coupling(i, pattern, lo, hi)
            return dl - cu + query.margin, du - cl + query.margin
        if query.tag == "barrier_increment":
            dl_rows, du_rows = self._stacked_flow(i, pattern, lo, hi)
            sl = lo + t * np.minimum(dl_rows, 0.0)
            su = hi + t * np.maximum(du_rows, 0.0)
            jl, ju = self.cert.h_nets[i].jacobian_bounds_batch(sl, su)
            dl, du = _idot(jl[:, 0, :], ju[:, 0, :], dl_rows, du_rows)
            cl, cu = self._ups_coupling(i, pattern, lo, hi)
            # condition: lie >= coupling + e  ->  residual = coupling + e - lie
            return cl + query.margin - du, cu + query.margin - dl
        if query.tag == "lyap_positive":
            vl, vu = self.cert.v_nets[i].bounds_batch(lo[:, :n], hi[:, :n])
            return -vu[:, 0], -vl[:, 0]
        if query.tag == "barrier_safe_positive":
            hl, hu = self.cert.h_nets[i].bounds_batch(lo, hi)
            e0 = self.cert.margins.eps0
            return e0 - hu[:, 0], e0 - hl[:, 0]
        if query.tag == "barrier_unsafe_negative":
            hl, hu = self.cert.h_nets[i].bounds_batch(lo, hi)
            return hl[:, 0], hu[:, 0]
        raise ValueError(query.tag)

    def _stacked_flow(self, i, pattern, lo, hi):
        n = self.pb.model.n
        m_i = self.pb.topo.max_neighborhood[i]
        bsz = lo.shape[0]
        dl = np.zeros((bsz, m_i * n))
        du = np.zeros((bsz, m_i * n))
        fl, fu = self._self_flow(i, pattern, lo, hi)
        dl[:, :n], du[:, :n] = fl, fu
        for k, j in enumerate(pattern):
            sl = slice((k + 1) * n, (k + 2) * n)
            fl, fu = self._agent_flow_hull(j, i, pattern, lo, hi)
            dl[:, sl], du[:, sl] = fl, fu
        return dl, du       # padding rows stay at zero derivative

    def _lam_coupling(self, i, pattern, lo, hi):
        n = self.pb.model.n
        tot_l = np.zeros(lo.shape[0])
        tot_u = np.zeros(lo.shape[0])
        for k, j in enumerate(self.pb.member_ids(i, pattern)):
            sl = slice(k * n, (k + 1) * n)
            vl, vu = self.cert.v_nets[j].bounds_batch(lo[:, sl], hi[:, sl])
            a, b = _iscale(self.cert.lam[j, i], vl[:, 0], vu[:, 0])
            tot_l += a
            tot_u += b
        return tot_l, tot_u

    def _ups_coupling(self, i, pattern, lo, hi):
        tot_l = np.zeros(lo.shape[0])
        tot_u = np.zeros(lo.shape[0])
        n = self.pb.model.n
        for k, j in enumerate(self.pb.member_ids(i, pattern)):
            if j == i:
                hl, hu = self.cert.h_nets[i].bounds_batch(lo, hi)
                hl, hu = hl[:, 0], hu[:, 0]
            else:
                hl, hu = self._agent_h_hull(j, i, pattern, lo, hi)
            a, b = _iscale(self.cert.ups[j, i], hl, hu)
            tot_l += a
            tot_u += b
        return tot_l, tot_u


# ---- concrete evaluation ---------------------------------------------------


def joint_from_box_point(problem: VerificationProblem, i, pattern, point):
    """Reconstruct a full joint state from an extended-layout point:
    member agents take their rows, all others sit at their domain
    centers (they do not enter the queried condition for q <= 2 and are
    bounded conservatively otherwise)."""
    n = problem.model.n
    x = np.stack([problem.model.domain[j].center for j in range(problem.topo.q)])
    rows = np.asarray(point, dtype=float).reshape(-1, n)
    for r, j in enumerate(problem.member_ids(i, pattern)):
        x[j] = rows[r]
    return JointState(x)


def surrogate_flow(cert, surrogate, problem, joint, j):
    """Closed-loop surrogate derivative of agent j at a joint state,
    using j's state-dependent mask pattern."""
    ids = tuple(interaction_mask(joint, problem.topo, j).neighbor_ids)
    ext = extended_state(joint, problem.topo, j)
    u = cert.control(j, ext.flat)
    return surrogate.closed_loop(j, ids, ext.flat, u)


def concrete_residual(cert, surrogate, problem, query, joint):
    """Concrete value of the queried condition residual at a joint
    state, in the same <= 0 convention as the interval bounds."""
    i = query.agent
    t = problem.t_step
    topo = problem.topo
    if query.tag == "lyap_decrement":
        xi = joint.x[i]
        fi = surrogate_flow(cert, surrogate, problem, joint, i)
        delta = (cert.v_value(i, xi + t * fi) - cert.v_value(i, xi)) / t
        mask = interaction_mask(joint, topo, i).mask
        coupling = float((cert.lam[:, i] * mask) @ cert.v_vector(joint))
        return delta - coupling + query.margin
    if query.tag == "barrier_increment":
        ext = extended_state(joint, topo, i)
        ids = [i] + interaction_mask(joint, topo, i).neighbor_ids
        deriv = np.zeros_like(ext.rows)
        for k, j in enumerate(ids):
            deriv[k] = surrogate_flow(cert, surrogate, problem, joint, j)
        nxt = ext.rows + t * deriv
        delta = (cert.h_value(i, nxt.reshape(-1)) - cert.h_value(i, ext.flat)) / t
        mask = interaction_mask(joint, topo, i).mask
        coupling = float((cert.ups[:, i] * mask) @ cert.h_vector(joint, topo))
        return coupling + query.margin - delta
    if query.tag == "lyap_positive":
        return -cert.v_value(i, joint.x[i])
    ext = extended_state(joint, topo, i)
    h = cert.h_value(i, ext.flat)
    if query.tag == "barrier_safe_positive":
        return cert.margins.eps0 - h
    if query.tag == "barrier_unsafe_negative":
        return h
    raise ValueError(query.tag)


# ---- public operations -----------------------------------------------------


def condition_residual_bound(query: VerificationQuery, cert: CoRwaCertificate,
                             surrogate: SurrogateModel,
                             problem: VerificationProblem,
                             refine: int = 256) -> Interval:
    """Sound enclosure of the condition residual over the query box.

    Splits the box along its widest dimensions into at most `refine`
    pieces and hulls the piecewise bounds, which sharpens the enclosure
    without changing its soundness.
    """
    engine = _BoundEngine(cert, surrogate, problem)
    lo = query.box.lower[None].copy()
    hi = query.box.upper[None].copy()
    width0 = np.maximum(query.box.width, 1e-30)
    while lo.shape[0] * 2 <= refine:
        rows = np.arange(lo.shape[0])
        rel = (hi - lo) / width0
        dim = np.argmax(rel, axis=1)
        if np.all(rel[rows, dim] <= 1e-12):
            break
        mid = 0.5 * (lo[rows, dim] + hi[rows, dim])
        left_hi = hi.copy()
        left_hi[rows, dim] = mid
        right_lo = lo.copy()
        right_lo[rows, dim] = mid
        lo = np.concatenate([lo, right_lo])
        hi = np.concatenate([left_hi, hi])
    rl, ru = engine.bounds(query, lo, hi)
    return Interval(np.array([rl.min()]), np.array([ru.max()]))


def verify_box(query: VerificationQuery, cert: CoRwaCertificate,
               surrogate: SurrogateModel, problem: VerificationProblem,
               batch_size: int = 1024, frontier_cap: int = 8) -> VerificationOutcome:
    """Branch-and-bound over the query box.

    A box whose residual upper bound is <= 0 is proven. Otherwise its
    center is evaluated concretely; a violating center is returned as a
    counterexample (after re-validation), and the box is bisected along
    its widest relative dimension until the depth or box budget runs
    out, which yields Unknown together with a sample of unresolved box
    centers (useful as near-violation training data).
    """
    start = time.monotonic()
    engine = _BoundEngine(cert, surrogate, problem)
    width0 = np.maximum(query.box.width, 1e-30)
    lo = query.box.lower[None].copy()
    hi = query.box.upper[None].copy()
    depth = np.zeros(1, dtype=int)
    explored = 0
    deepest = 0
    exhausted = False
    stuck = []

    def outcome(status, **kw):
        return VerificationOutcome(
            status, query.agent, query.tag, query.pattern,
            boxes_explored=explored, max_depth_reached=deepest,
            wall_time=time.monotonic() - start, **kw)

    def keep_stuck(centers):
        for c in centers:
            if len(stuck) < frontier_cap:
                stuck.append(
                    joint_from_box_point(problem, query.agent, query.pattern, c).x)

    while lo.shape[0] > 0:
        take = min(batch_size, lo.shape[0])
        blo, bhi = lo[:take], hi[:take]
        bdep = depth[:take]
        lo, hi, depth = lo[take:], hi[take:], depth[take:]
        explored += take
        deepest = max(deepest, int(bdep.max()))
        _, ru = engine.bounds(query, blo, bhi)
        open_idx = np.nonzero(ru > 0.0)[0]
        # concrete probe at the centers of still-open boxes
        for k in open_idx:
            center = 0.5 * (blo[k] + bhi[k])
            joint = joint_from_box_point(problem, query.agent, query.pattern, center)
            res = concrete_residual(cert, surrogate, problem, query, joint)
            if res > WITNESS_TOL:
                return outcome(COUNTEREXAMPLE, witness=joint.x,
                               witness_residual=float(res))
        if len(open_idx) == 0:
            continue
        if explored + lo.shape[0] >= query.max_boxes:
            exhausted = True
            keep_stuck(0.5 * (blo[open_idx] + bhi[open_idx]))
            break
        can_split = open_idx[bdep[open_idx] < query.max_depth]
        if len(can_split) < len(open_idx):
            exhausted = True
            capped = np.setdiff1d(open_idx, can_split)
            keep_stuck(0.5 * (blo[capped] + bhi[capped]))
        if len(can_split) == 0:
            continue
        slo, shi = blo[can_split], bhi[can_split]
        rel = (shi - slo) / width0
        dim = np.argmax(rel, axis=1)
        if np.any(rel[np.arange(len(can_split)), dim] <= 1e-12):
            exhausted = True
            keep = rel[np.arange(len(can_split)), dim] > 1e-12
            keep_stuck(0.5 * (slo[~keep] + shi[~keep]))
            can_split = can_split[keep]
            slo, shi, dim = slo[keep], shi[keep], dim[keep]
            if len(can_split) == 0:
                continue
        mid = 0.5 * (slo[np.arange(len(dim)), dim] + shi[np.arange(len(dim)), dim])
        left_hi = shi.copy()
        left_hi[np.arange(len(dim)), dim] = mid
        right_lo = slo.copy()
        right_lo[np.arange(len(dim)), dim] = mid
        ndep = bdep[can_split] + 1
        lo = np.concatenate([lo, slo, right_lo])
        hi = np.concatenate([hi, left_hi, shi])
        depth = np.concatenate([depth, ndep, ndep])
    if exhausted or lo.shape[0] > 0:
        if len(stuck) < frontier_cap and lo.shape[0] > 0:
            keep_stuck(0.5 * (lo + hi))
        return outcome(UNKNOWN, frontier=stuck)
    return outcome(VERIFIED)


@dataclass
class QueryDomains:
    """Box families per condition; built by the scenario layer.

    decrement/positive hold per-agent state-space boxes; the barrier
    families hold per-(agent, pattern) extended-layout boxes. The
    increment family covers everything except the verified-negative
    region (trajectories that keep h >= 0 may cross the buffer band, so
    the increment condition must hold there too); safe holds the
    h >= eps0 region proper.
    """

    decrement: list[list[Interval]]
    positive: list[list[Interval]]
    increment: dict
    safe: dict
    unsafe: dict


def build_queries(problem: VerificationProblem, domains: QueryDomains,
                  margins: ErrorMargins, i: int, max_depth=20,
                  max_boxes=100_000) -> list[VerificationQuery]:
    """All queries of one agent: five tags across its mask patterns."""
    model, topo = problem.model, problem.topo
    n = model.n
    queries = []
    for pattern in problem.patterns[i]:
        feas = pattern_feasible_box(model, topo, i, pattern)
        if feas is None:
            continue
        for piece in domains.decrement[i]:
            box = _with_self_rows(feas, piece, n)
            if box is not None:
                queries.append(VerificationQuery(
                    i, "lyap_decrement", pattern, box,
                    margin=float(margins.e_v[i]),
                    max_depth=max_depth, max_boxes=max_boxes))
        for ext_box in domains.increment.get((i, pattern), []):
            queries.append(VerificationQuery(
                i, "barrier_increment", pattern, ext_box,
                margin=float(margins.e_h[i]),
                max_depth=max_depth, max_boxes=max_boxes))
        for ext_box in domains.safe.get((i, pattern), []):
            queries.append(VerificationQuery(
                i, "barrier_safe_positive", pattern, ext_box,
                max_depth=max_depth, max_boxes=max_boxes))
        for ext_box in domains.unsafe.get((i, pattern), []):
            queries.append(VerificationQuery(
                i, "barrier_unsafe_negative", pattern, ext_box,
                max_depth=max_depth, max_boxes=max_boxes))
    for piece in domains.positive[i]:
        box = _state_only_box(problem, i, piece)
        queries.append(VerificationQuery(
            i, "lyap_positive", (), box,
            max_depth=max_depth, max_boxes=max_boxes))
    return queries


def _with_self_rows(feasible: Interval, piece: Interval, n: int) -> Interval | None:
    lo = feasible.lower.copy()
    hi = feasible.upper.copy()
    lo[:n] = np.maximum(lo[:n], piece.lower)
    hi[:n] = np.minimum(hi[:n], piece.upper)
    if np.any(lo[:n] > hi[:n]):
        return None
    return Interval(lo, hi)


def _state_only_box(problem, i, piece: Interval) -> Interval:
    n = problem.model.n
    m_i = problem.topo.max_neighborhood[i]
    lo = np.zeros(m_i * n)
    hi = np.zeros(m_i * n)
    lo[:n] = piece.lower
    hi[:n] = piece.upper
    return Interval(lo, hi)


def verify_agent(cert: CoRwaCertificate, surrogate: SurrogateModel,
                 problem: VerificationProblem, i: int, domains: QueryDomains,
                 max_depth=20, max_boxes=100_000) -> list[VerificationOutcome]:
    """Run every condition tag of agent i over all applicable mask
    patterns. The agent verdict is the conservative join of the query
    verdicts (any Counterexample dominates, else any Unknown)."""
    queries = build_queries(problem, domains, problem.margins, i,
                            max_depth=max_depth, max_boxes=max_boxes)
    if not queries:
        raise ValueError(f"agent {i} has no verification queries; "
                         "check the domain declarations")
    return [verify_box(q, cert, surrogate, problem) for q in queries]


def agent_verdict(outcomes: list[VerificationOutcome]) -> str:
    if any(o.status == COUNTEREXAMPLE for o in outcomes):
        return COUNTEREXAMPLE
    if any(o.status == UNKNOWN for o in outcomes):
        return UNKNOWN
    return VERIFIED


def box_difference(outer: Interval, inner: Interval) -> list[Interval]:
    """Axis-aligned set difference outer \\ inner as disjoint boxes."""
    inter_lo = np.maximum(outer.lower, inner.lower)
    inter_hi = np.minimum(outer.upper, inner.upper)
    if np.any(inter_lo >= inter_hi):
        return [outer]
    pieces = []
    lo = outer.lower.copy()
    hi = outer.upper.copy()
    for d in range(outer.lower.shape[0]):
        if lo[d] < inter_lo[d]:
            plo, phi = lo.copy(), hi.copy()
            phi[d] = inter_lo[d]
            pieces.append(Interval(plo, phi))
            lo[d] = inter_lo[d]
        if inter_hi[d] < hi[d]:
            plo, phi = lo.copy(), hi.copy()
            plo[d] = inter_hi[d]
            pieces.append(Interval(plo, phi))
            hi[d] = inter_hi[d]
    return pieces
