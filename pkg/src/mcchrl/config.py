"""Run configuration: training hyperparameters, simulator block, feature
schemas, profiles, and the config fingerprint embedded in every report."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass
class TrainConfig:
    gamma: float = 0.99
    tau: float = 0.001
    lr_critic: float = 0.001
    lr_actor: float = 0.0001
    batch_size: int = 64
    alpha: float = 0.0
    K: int = 4
    L: int = 32
    history_len: int = 12
    device_latent: int = 16
    device_feat_dim: int = 16
    heads: int = 1
    critic_hidden: tuple = (32, 16)
    fm_linear_out: int = 16
    actor_hidden: tuple = (128,)
    actor_final_act: str = "none"
    explore_sigma0: float = 0.1
    explore_sigma1: float = 0.01
    eta_goal: float = 1.0
    epochs: int = 2
    warmup_epochs: int = 3
    replay_capacity: int = 10000
    episode_len: int = 10
    train_sessions: int = 2000
    critic_update_every: int = 1
    cql_proposals: int = 10
    cql_sigma: float = 0.2
    l1: float = 0.0
    l2: float = 0.0
    reward_scale: float | None = None
    sre_gain: float = 1.0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must be in [0, 1)")
        if not (0.0 < self.tau < 1.0):
            raise ValueError("tau must be in (0, 1)")
        if self.alpha < 0.0:
            raise ValueError("alpha must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        self.critic_hidden = tuple(self.critic_hidden)
        self.actor_hidden = tuple(self.actor_hidden)

    @property
    def effective_reward_scale(self) -> float:
        # tanh critic cannot represent discounted CTR sums > 1; normalizing by
        # the maximum episodic return keeps bellman targets inside its range
        if self.reward_scale is not None:
            return self.reward_scale
        if self.gamma == 0.0:
            return 1.0
        return (1.0 - self.gamma) / (1.0 - self.gamma ** self.episode_len)


@dataclass
class SimConfig:
    delay_d: int = 6
    click_threshold: int = 4
    pool_size: int = 50
    rounds: int = 50
    mf_epochs: int = 12
    mf_lr: float = 0.015
    mf_reg: float = 0.05

    def __post_init__(self):
        if self.delay_d < 0:
            raise ValueError("delay must be >= 0")


@dataclass
class SynthConfig:
    users: int = 300
    sessions: int = 10000
    K: int = 6
    signal_strength: float = 1.0
    n_items: int = 400
    n_apps: int = 20
    n_districts: int = 12
    n_locations: int = 10
    stay_buckets: int = 16
    latent_dim: int = 16
    signal_gain: float = 4.0
    device_noise: float = 0.3
    behavior_beta: float = 1.0
    pool_size: int = 50
    delay_d: int = 10
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.signal_strength <= 1.0):
            raise ValueError("signal_strength must be in [0, 1]")


@dataclass
class AblationFlags:
    no_edge: bool = False
    no_actor: bool = False
    no_critic: bool = False

    def __post_init__(self):
        if self.no_actor and self.no_critic:
            raise ValueError("no_actor and no_critic are contradictory")


@dataclass
class FeatureSchema:
    """Vocabulary manifest: feature family -> size (row 0 reserved for OOV)."""

    n_users: int
    n_items: int
    outra_families: dict
    device_families: dict


@dataclass
class RunConfig:
    profile: str = "simulator"
    train: TrainConfig = field(default_factory=TrainConfig)
    simulator: SimConfig = field(default_factory=SimConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    ml100k_dir: str = "data/ml-100k"
    logs_path: str = ""
    sweep_latencies: tuple = (0, 6, 12)
    sweep_seq_lengths: tuple = (4, 8, 12)
    out_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        if self.profile not in ("simulator", "dataset"):
            raise ValueError("profile must be 'simulator' or 'dataset'")
        self.sweep_latencies = tuple(self.sweep_latencies)
        self.sweep_seq_lengths = tuple(self.sweep_seq_lengths)


def simulator_profile(**overrides) -> TrainConfig:
    base = dict(gamma=0.99, tau=0.001, lr_critic=0.001, lr_actor=0.0001,
                batch_size=64, alpha=0.0, K=4, L=32, history_len=12, heads=1,
                critic_hidden=(32, 16), actor_hidden=(128,), actor_final_act="none",
                warmup_epochs=0)
    base.update(overrides)
    return TrainConfig(**base)


def dataset_profile(**overrides) -> TrainConfig:
    base = dict(gamma=0.9, tau=0.001, lr_critic=0.0001, lr_actor=0.0001,
                batch_size=512, alpha=0.1, K=6, L=16, history_len=50, heads=2,
                critic_hidden=(128, 64, 32), actor_hidden=(64, 32),
                actor_final_act="relu", l1=0.0001, l2=0.00001,
                critic_update_every=16)
    base.update(overrides)
    return TrainConfig(**base)


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def fingerprint(config) -> str:
    """Stable hex digest of a config; identical configs share it, differing ones don't."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def run_config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    for key, cls in (("train", TrainConfig), ("simulator", SimConfig),
                     ("synth", SynthConfig), ("ablation", AblationFlags)):
        if key in data and isinstance(data[key], dict):
            data[key] = _build(cls, data[key])
    return _build(RunConfig, data)


def load_run_config(path: str) -> RunConfig:
    with open(path) as f:
        return run_config_from_dict(json.load(f))


SIMULATOR_OUTRA_FAMILIES = {"hour": 24, "day": 7, "workday": 2}
# zip codes bucketed by their first two digits; bucket 0 reserved for OOV
SIMULATOR_DEVICE_FAMILIES = {"occupation": 22, "zip2": 101}


def synth_schema(synth: SynthConfig) -> FeatureSchema:
    return FeatureSchema(
        n_users=synth.users + 1,
        n_items=synth.n_items + 1,
        outra_families={"hour": 24, "day": 7, "workday": 2,
                        "location": synth.n_locations + 1},
        device_families={"app": synth.n_apps + 1, "stay": synth.stay_buckets,
                         "district": synth.n_districts + 1},
    )
