"""Scenario configuration: one human-editable YAML document per
scenario with an explicit schema version. Unknown keys are rejected and
parse -> serialize -> parse is the identity on the canonical form.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _from_dict(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        val = data[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (
                isinstance(f.type, str) and f.type in _BLOCKS):
            blk = _BLOCKS[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _from_dict(blk, val, sub)
        else:
            kwargs[name] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or cls.__name__}: {e}") from e


def _to_dict(obj):
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = _to_dict(v) if dataclasses.is_dataclass(v) else v
    return out


@dataclass
class TopologyBlock:
    q: int = 2
    m: int = 2                           # neighborhood budget incl. self
    radius: float = 10.0
    communicable: str = "all"            # "all" or "chain"
    position_slice: list = field(default_factory=lambda: [0])


@dataclass
class DynamicsBlock:
    sim_dt: float = 0.05
    sim_steps: int = 600
    # robot constants
    gain: float = 0.05
    eps: float = 0.1
    wheel_radius: float = 0.02
    wheel_offset: float = 0.2
    u_max: float = 40.0
    leader_target: list = field(default_factory=lambda: [20.0, 0.0])
    offsets: list = field(default_factory=lambda: [[-1.0, 1.0], [-1.0, -1.0], [-2.0, 0.0]])
    obstacles: list = field(default_factory=lambda: [
        [6.0, 1.0, 1.0], [10.0, -1.5, 1.2], [14.0, 1.0, 1.1]])
    # platoon constants
    desired_gap: float = 20.0
    leader_speed: float = 20.0
    leader_schedule: list = field(default_factory=list)
    leader_sin_amplitude: float = 0.0
    leader_sin_period: float = 20.0
    # coupled double integrator
    coupling: float = 0.2


@dataclass
class SetsBlock:
    goal_radius: float = 0.4
    initial_low: list = field(default_factory=lambda: [-1.2, -0.3])
    initial_high: list = field(default_factory=lambda: [-0.2, 0.3])
    domain_low: list = field(default_factory=lambda: [-2.0, -2.0])
    domain_high: list = field(default_factory=lambda: [2.0, 2.0])
    # slab-shaped unsafe region: coordinate, threshold, side
    unsafe_coord: int = 0
    unsafe_threshold: float = 1.4
    unsafe_side: str = "above"           # above: coord >= threshold is unsafe
    safe_band: float = 0.4               # buffer between unsafe and h >= eps0
    # robot scenario geometry
    collision_distance: float = 0.3
    collision_band: float = 0.25
    pair_grid: int = 2
    positivity_radius: float = 0.1


@dataclass
class TrainingBlock:
    learning_rate: float = 0.001
    decay_factor: float = 0.5
    decay_interval: int = 20
    epochs: int = 50
    batch_size: int = 32
    dataset_size: int = 30000
    val_split: float = 0.2
    lie_step: float = 0.05
    unsafe_fraction: float = 0.1
    boundary_fraction: float = 0.1


@dataclass
class VerifierBlock:
    t_step: float = 0.0002
    max_depth: int = 20
    max_boxes: int = 100000
    surrogate_points: int = 5
    surrogate_hidden: list = field(default_factory=list)
    surrogate_budget: int = 3000


@dataclass
class CegisBlock:
    max_iterations: int = 100
    augment_count: int = 20
    noise_scale: float = 0.01
    cex_weight: float = 5.0
    cex_weight_decay: float = 0.5


@dataclass
class NetsBlock:
    v_hidden: list = field(default_factory=list)
    h_hidden: list = field(default_factory=list)
    pi_hidden: list = field(default_factory=list)
    delta: float = 1e-3
    init_scale: float = 0.5
    lam_init: float = 0.15
    ups_init: float = 0.3
    eps0: float = 0.05
    eps1: float = 0.01
    eps2: float = 0.01
    eps3: float = 0.01
    eps4: float = 0.01
    eps5: float = 0.01
    sigma1: float = 1.0
    sigma2: float = 1.0
    sigma3: float = 1.0


@dataclass
class ScenarioConfig:
    schema: int = SCHEMA_VERSION
    scenario: str = "di2"
    seed: int = 0
    out: str = "runs/out"
    topology: TopologyBlock = field(default_factory=TopologyBlock)
    dynamics: DynamicsBlock = field(default_factory=DynamicsBlock)
    sets: SetsBlock = field(default_factory=SetsBlock)
    training: TrainingBlock = field(default_factory=TrainingBlock)
    verifier: VerifierBlock = field(default_factory=VerifierBlock)
    cegis: CegisBlock = field(default_factory=CegisBlock)
    nets: NetsBlock = field(default_factory=NetsBlock)

    def __post_init__(self):
        if self.schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {self.schema}")
        if self.scenario not in ("di2", "platoon", "robot"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")

    def to_dict(self):
        return _to_dict(self)


_BLOCKS = {
    "TopologyBlock": TopologyBlock,
    "DynamicsBlock": DynamicsBlock,
    "SetsBlock": SetsBlock,
    "TrainingBlock": TrainingBlock,
    "VerifierBlock": VerifierBlock,
    "CegisBlock": CegisBlock,
    "NetsBlock": NetsBlock,
}


def config_from_dict(data) -> ScenarioConfig:
    return _from_dict(ScenarioConfig, data)


def load_config(path) -> ScenarioConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    return config_from_dict(data or {})


def save_config(cfg: ScenarioConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
