"""State-dependent neighborhoods, interaction masks, and padded extended states.

An agent always belongs to its own neighborhood. Among the potentially
communicable agents, at most M_i - 1 within the sensing radius are kept,
ordered nearest first; ties are broken by ascending agent id so that
identical joint states always produce identical masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SystemTopology:
    q: int
    max_neighborhood: list[int]          # M_i, self included
    sensing_radius: list[float]          # R_i^c
    communicable: list[set[int]]         # candidate ids per agent
    position_slice: list[int]            # state coords used for distances
    position_offset: np.ndarray | None = None   # per-agent shift applied to
    # the position slice before measuring distances; lets models work in
    # error coordinates while sensing happens in absolute coordinates

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("need at least one agent")
        if len(self.max_neighborhood) != self.q or len(self.sensing_radius) != self.q:
            raise ValueError("per-agent field lengths must equal q")
        if len(self.communicable) != self.q:
            raise ValueError("per-agent field lengths must equal q")
        for i in range(self.q):
            if self.max_neighborhood[i] < 1:
                raise ValueError("M_i must be >= 1")
            if self.sensing_radius[i] <= 0.0:
                raise ValueError("sensing radius must be positive")
            for j in self.communicable[i]:
                if not (0 <= j < self.q):
                    raise ValueError("communicable set contains invalid agent id")
        if not self.position_slice:
            raise ValueError("position_slice must not be empty")
        if self.position_offset is not None:
            self.position_offset = np.asarray(self.position_offset, dtype=float)
            if self.position_offset.shape != (self.q, len(self.position_slice)):
                raise ValueError("position_offset must be (q, len(position_slice))")

    def offset(self, i):
        if self.position_offset is None:
            return 0.0
        return self.position_offset[i]

    @staticmethod
    def all_to_all(q, m, radius, position_slice, offsets=None):
        comm = [set(range(q)) - {i} for i in range(q)]
        return SystemTopology(q, [m] * q, [radius] * q, comm,
                              list(position_slice), offsets)

    @staticmethod
    def chain(q, radius, position_slice):
        """Directed predecessor chain: agent i may sense agent i-1 only."""
        comm = [set() if i == 0 else {i - 1} for i in range(q)]
        return SystemTopology(q, [2] * q, [radius] * q, comm, list(position_slice))


@dataclass
class JointState:
    x: np.ndarray                         # (q, n)
    timestamp: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2:
            raise ValueError("joint state must be a (q, n) matrix")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("joint state contains non-finite entries")

    @property
    def q(self):
        return self.x.shape[0]

    @property
    def n(self):
        return self.x.shape[1]


@dataclass
class InteractionMask:
    mask: np.ndarray                      # (q,) binary, self entry always 1
    neighbor_ids: list[int]               # selected neighbors, nearest first


@dataclass
class ExtendedState:
    rows: np.ndarray                      # (M_i, n): self, neighbors, padding
    valid_rows: int

    @property
    def flat(self):
        return self.rows.reshape(-1)


def _check_agent(joint: JointState, topo: SystemTopology, i: int):
    if not (0 <= i < topo.q):
        raise ValueError(f"invalid agent id {i}")
    if joint.q != topo.q:
        raise ValueError("joint state row count does not match topology")
    for c in topo.position_slice:
        if not (0 <= c < joint.n):
            raise ValueError("position_slice index out of range for state dim")


def neighbor_set(joint: JointState, topo: SystemTopology, i: int) -> list[int]:
    """At most M_i - 1 communicable agents within R_i^c, nearest first."""
    _check_agent(joint, topo, i)
    pos = joint.x[:, topo.position_slice]
    cands = []
    for j in sorted(topo.communicable[i]):
        if j == i:
            continue
        d = float(np.linalg.norm((pos[i] + topo.offset(i)) - (pos[j] + topo.offset(j))))
        if d <= topo.sensing_radius[i]:
            cands.append((d, j))
    cands.sort()
    return [j for _, j in cands[: topo.max_neighborhood[i] - 1]]


def interaction_mask(joint: JointState, topo: SystemTopology, i: int) -> InteractionMask:
    """Binary indicator over agents: self plus selected neighbors."""
    ids = neighbor_set(joint, topo, i)
    mask = np.zeros(topo.q)
    mask[i] = 1.0
    for j in ids:
        mask[j] = 1.0
    return InteractionMask(mask, ids)


def extended_state(joint: JointState, topo: SystemTopology, i: int) -> ExtendedState:
    """Self state first, neighbors nearest-first, zero-padded to M_i rows."""
    ids = neighbor_set(joint, topo, i)
    m = topo.max_neighborhood[i]
    rows = np.zeros((m, joint.n))
    rows[0] = joint.x[i]
    for k, j in enumerate(ids):
        rows[k + 1] = joint.x[j]
    return ExtendedState(rows, 1 + len(ids))


def extended_from_pattern(joint: JointState, topo: SystemTopology, i: int,
                          pattern: tuple[int, ...]) -> ExtendedState:
    """Extended state under a fixed, ordered neighbor pattern.

    Used by the verifier, which case-splits on mask patterns instead of
    recomputing state-dependent neighborhoods.
    """
    _check_agent(joint, topo, i)
    m = topo.max_neighborhood[i]
    if len(pattern) > m - 1:
        raise ValueError("pattern longer than M_i - 1")
    rows = np.zeros((m, joint.n))
    rows[0] = joint.x[i]
    for k, j in enumerate(pattern):
        rows[k + 1] = joint.x[j]
    return ExtendedState(rows, 1 + len(pattern))


def mask_from_pattern(q: int, i: int, pattern: tuple[int, ...]) -> np.ndarray:
    mask = np.zeros(q)
    mask[i] = 1.0
    for j in pattern:
        mask[j] = 1.0
    return mask
