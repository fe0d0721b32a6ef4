"""Substructure-isomorphism detection and certificate/controller reuse:
train and verify once on a small system, then transfer the per-agent
networks and tile the coupling matrices onto structurally equivalent
larger systems, with a mandatory Metzler/Hurwitz re-check.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .certificate import (
    CoRwaCertificate,
    check_hurwitz,
    check_metzler,
)
from .network import net_from_config
from .topology import SystemTopology


class TransferRejected(RuntimeError):
    def __init__(self, matrix, reason):
        super().__init__(reason)
        self.matrix = matrix


@dataclass(frozen=True)
class SystemSignature:
    """Per-agent dynamics tags (with a stable parameter hash) plus the
    neighborhood template as a labeled directed graph."""

    tags: tuple[str, ...]
    budgets: tuple[int, ...]             # M_i
    radii: tuple[float, ...]
    communicable: tuple[frozenset, ...]

    @property
    def q(self):
        return len(self.tags)

    def tag_hash(self, i):
        return hashlib.sha256(self.tags[i].encode()).hexdigest()[:16]

    @staticmethod
    def of(model, topo: SystemTopology) -> "SystemSignature":
        return SystemSignature(
            tags=tuple(model.agent_tags),
            budgets=tuple(topo.max_neighborhood),
            radii=tuple(float(r) for r in topo.sensing_radius),
            communicable=tuple(frozenset(c) for c in topo.communicable),
        )


def find_embedding(small: SystemSignature, large: SystemSignature):
    """Lexicographically smallest injective map tau from the small
    system into the large one preserving dynamics tags, neighborhood
    budgets/radii, and the communicable structure exactly
    (tau(comm(j)) == comm(tau(j))), or None when no embedding exists."""
    qs, ql = small.q, large.q
    if qs > ql:
        return None

    def compatible(j, t, partial):
        if small.tag_hash(j) != large.tag_hash(t):
            return False
        if small.budgets[j] != large.budgets[t]:
            return False
        if small.radii[j] != large.radii[t]:
            return False
        # communicable degree must match for exact neighborhood mapping
        if len(small.communicable[j]) != len(large.communicable[t]):
            return False
        for a, ta in enumerate(partial):
            if (a in small.communicable[j]) != (ta in large.communicable[t]):
                return False
            if (j in small.communicable[a]) != (t in large.communicable[ta]):
                return False
        return True

    def backtrack(partial):
        j = len(partial)
        if j == qs:
            tau = list(partial)
            for a in range(qs):
                image = {tau[b] for b in small.communicable[a]}
                if image != set(large.communicable[tau[a]]):
                    return tau  # degree checks make this unreachable
            return tau
        for t in range(ql):
            if t in partial:
                continue
            if compatible(j, t, partial):
                result = backtrack(partial + [t])
                if result is not None:
                    return result
        return None

    return backtrack([])


def chain_role_map(q_small: int, q_large: int) -> dict[int, int]:
    """Role classes of a predecessor chain: the leader-adjacent agent
    and each early follower keep their own role, every deeper follower
    repeats the last small-system role."""
    return {j: min(j, q_small - 1) for j in range(q_large)}


def transfer_certificate(cert: CoRwaCertificate, tau: list[int],
                         small_topo: SystemTopology, large_topo: SystemTopology,
                         role_map: dict[int, int] | None = None) -> CoRwaCertificate:
    """Assign V/h/pi networks by template class and tile the coupling
    matrices over the large system's neighborhood structure.

    Agents in the image of tau take their preimage's networks; agents
    outside it require an explicit role map (for chains, the deepest
    role repeats). Off-diagonal coupling entries are copied
    position-wise (communicable partners sorted by id on both sides)
    from the role agent's column, so off-diagonals stay off-diagonal and
    Metzler holds structurally; the Hurwitz re-check must pass or the
    transfer is rejected.
    """
    q_small = cert.q
    q_large = large_topo.q
    inv = {t: j for j, t in enumerate(tau)}
    if role_map is None:
        if len(inv) == q_large:
            role_map = {t: inv[t] for t in inv}
        else:
            raise ValueError("uncovered agents need an explicit role map")
    roles = [role_map[j] for j in range(q_large)]
    if any(not (0 <= r < q_small) for r in roles):
        raise ValueError("role map references invalid small-system agents")

    def clone(net):
        return net_from_config(net.to_config())

    v_nets = [clone(cert.v_nets[roles[j]]) for j in range(q_large)]
    h_nets = [clone(cert.h_nets[roles[j]]) for j in range(q_large)]
    pi_nets = [clone(cert.controller_nets[roles[j]]) for j in range(q_large)]

    lam = _tile_coupling(cert.lam, roles, small_topo, large_topo)
    ups = _tile_coupling(cert.ups, roles, small_topo, large_topo)
    if not check_metzler(lam) or not check_metzler(ups):
        raise TransferRejected(lam, "tiled coupling lost the Metzler property")
    if not check_hurwitz(lam):
        raise TransferRejected(lam, "tiled Lambda is not Hurwitz")
    return CoRwaCertificate(v_nets, h_nets, pi_nets, lam, ups, cert.margins)


def _tile_coupling(mat, roles, small_topo: SystemTopology,
                   large_topo: SystemTopology):
    q_large = large_topo.q
    out = np.zeros((q_large, q_large))
    for b in range(q_large):
        rb = roles[b]
        out[b, b] = mat[rb, rb]
        large_nbrs = sorted(large_topo.communicable[b] - {b})
        small_nbrs = sorted(small_topo.communicable[rb] - {rb})
        for k, a in enumerate(large_nbrs):
            if k < len(small_nbrs):
                out[a, b] = mat[small_nbrs[k], rb]
    return out


@dataclass
class RedVerRow:
    size: int
    train_time: float
    transfer_time: float
    spot_verdict: str
    residual_gap: float

    def to_list(self):
        return [self.size, self.train_time, self.transfer_time,
                self.spot_verdict, self.residual_gap]


def spot_check_residuals(small_scn, small_cert, large_scn, large_cert,
                         tau, rng, samples=16):
    """Max absolute difference between small-system residuals and
    transferred residuals at mapped states whose neighborhoods coincide."""
    from .certificate import cbf_residual, clf_residual
    from .topology import JointState

    gap = 0.0
    q_small = small_scn.q
    for _ in range(samples):
        x_small = small_scn.domain_sample(rng)
        x_large = np.stack([large_scn.model.domain[j].center
                            for j in range(large_scn.q)])
        for j in range(q_small):
            x_large[tau[j]] = x_small[j]
        js, jl = JointState(x_small), JointState(x_large)
        for j in range(q_small):
            # only compare agents whose whole neighborhood is mapped
            from .topology import neighbor_set
            small_nb = neighbor_set(js, small_scn.topo, j)
            large_nb = neighbor_set(jl, large_scn.topo, tau[j])
            if [tau[a] for a in small_nb] != large_nb:
                continue
            r1 = clf_residual(small_cert, small_scn.model, js, small_scn.topo, j,
                              lie_dt=1e-3)
            r2 = clf_residual(large_cert, large_scn.model, jl, large_scn.topo,
                              tau[j], lie_dt=1e-3)
            gap = max(gap, abs(r1 - r2))
            b1 = cbf_residual(small_cert, small_scn.model, js, small_scn.topo, j,
                              lie_dt=1e-3)
            b2 = cbf_residual(large_cert, large_scn.model, jl, large_scn.topo,
                              tau[j], lie_dt=1e-3)
            gap = max(gap, abs(b1 - b2))
    return gap


def red_ver(make_scenario, sizes, train_once, rng_seed=0, spot_samples=16):
    """Reduced-verification workflow: train at the smallest size once,
    then transfer to each larger size with an embedding search, coupling
    tiling, and a residual spot check. Returns one row per size.

    `make_scenario(size)` builds the scenario family member;
    `train_once(scenario)` returns the trained small certificate.
    """
    sizes = sorted(sizes)
    base = make_scenario(sizes[0])
    t0 = time.monotonic()
    small_cert = train_once(base)
    train_time = time.monotonic() - t0
    rows = [RedVerRow(sizes[0], train_time, 0.0, "trained", 0.0)]
    certs = {sizes[0]: small_cert}
    small_sig = SystemSignature.of(base.model, base.topo)
    rng = np.random.default_rng(rng_seed)
    for size in sizes[1:]:
        scn = make_scenario(size)
        t1 = time.monotonic()
        tau = find_embedding(small_sig, SystemSignature.of(scn.model, scn.topo))
        if tau is None:
            rows.append(RedVerRow(size, 0.0, time.monotonic() - t1,
                                  "NoEmbedding", float("nan")))
            continue
        role_map = chain_role_map(base.q, scn.q)
        cert = transfer_certificate(small_cert, tau, base.topo, scn.topo, role_map)
        gap = spot_check_residuals(base, small_cert, scn, cert, tau, rng,
                                   samples=spot_samples)
        rows.append(RedVerRow(size, 0.0, time.monotonic() - t1,
                              "ok" if gap <= 1e-9 else "residual_mismatch", gap))
        certs[size] = cert
    return rows, certs
