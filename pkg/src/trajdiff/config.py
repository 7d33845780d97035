"""Run configuration: sectioned, defaulted, strictly validated, and
round-trippable through a canonical TOML rendering whose SHA-256 serves as
the config identity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from trajdiff.datasets import DATASET_KINDS
from trajdiff.losses import PRESETS, LossWeights
from trajdiff.nets import PREDICTION_MODES, SHARING_MODES
from trajdiff.sampling import RENOISE_MODES
from trajdiff.training import OptConfig, TrainConfig


@dataclass
class DataSection:
    kind: str = "gaussian-ring"
    n: int = 8000
    d: int = 2
    k: int = 8

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"[data] kind: {self.kind!r} is not one of {DATASET_KINDS}")
        if self.n < 1 or self.k < 1:
            raise ValueError("[data] n and k must be positive")


@dataclass
class ScheduleSection:
    t: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("[schedule] t must be positive")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError("[schedule] betas must satisfy 0 < start <= end < 1")


@dataclass
class ModelSection:
    hidden: tuple = (128, 128, 128)
    time_dim: int = 16
    cond_dim: int = 16
    prediction_mode: str = "epsilon"
    sharing_mode: str = "shared"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.prediction_mode not in PREDICTION_MODES:
            raise ValueError(f"[model] prediction_mode: {self.prediction_mode!r} "
                             f"is not one of {PREDICTION_MODES}")
        if self.sharing_mode not in SHARING_MODES:
            raise ValueError(f"[model] sharing_mode: {self.sharing_mode!r} "
                             f"is not one of {SHARING_MODES}")


@dataclass
class TrainSection:
    mode: str = "stepwise"
    nfe: int = 4
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-8
    tau: float = 0.95
    loss: str = "l2"
    renoise_mode: str = "convex"
    disc_updates_per_gen: int = 5
    step_list: tuple = ()
    pretrain_steps: int = 0
    init_from: str = ""

    def __post_init__(self):
        self.step_list = tuple(int(t) for t in self.step_list)
        if self.mode not in ("stepwise", "e2e"):
            raise ValueError(f"[train] mode: {self.mode!r} is not 'stepwise' or 'e2e'")
        if self.loss not in PRESETS:
            raise ValueError(f"[train] loss: {self.loss!r} is not one of "
                             f"{tuple(PRESETS)}")
        if self.renoise_mode not in RENOISE_MODES:
            raise ValueError(f"[train] renoise_mode: {self.renoise_mode!r} "
                             f"is not one of {RENOISE_MODES}")
        if self.steps < 0 or self.pretrain_steps < 0:
            raise ValueError("[train] step counts must be non-negative")

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode, nfe=self.nfe,
            step_list=self.step_list or None,
            loss=LossWeights.from_preset(self.loss),
            renoise_mode=self.renoise_mode,
            opt=OptConfig(lr=self.lr, weight_decay=self.weight_decay),
            tau=self.tau, steps=self.steps, batch_size=self.batch_size,
            disc_updates_per_gen=self.disc_updates_per_gen)


@dataclass
class EvalSection:
    n_samples: int = 2000
    nfe: int = 0  # 0: inherit the training nfe
    mmd_bandwidth: float = 1.0
    seeds: tuple = (0,)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.n_samples < 2:
            raise ValueError("[eval] n_samples must be at least 2")
        if self.nfe < 0:
            raise ValueError("[eval] nfe must be non-negative")
        if self.mmd_bandwidth <= 0:
            raise ValueError("[eval] mmd_bandwidth must be positive")
        if not self.seeds:
            raise ValueError("[eval] seeds must not be empty")


@dataclass
class RunSection:
    out_dir: str = "runs"
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.checkpoint_every < 1:
            raise ValueError("[run] checkpoint_every must be positive")


_SECTIONS = (("data", DataSection), ("schedule", ScheduleSection),
             ("model", ModelSection), ("train", TrainSection),
             ("eval", EvalSection), ("run", RunSection))


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> dict:
        out = {}
        for name, _ in _SECTIONS:
            sec = getattr(self, name)
            out[name] = {f.name: _plain(getattr(sec, f.name))
                         for f in fields(sec)}
        return out

    def to_toml(self) -> str:
        lines = []
        for name, _ in _SECTIONS:
            sec = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(sec):
                lines.append(f"{f.name} = {_render(getattr(sec, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _render(v) -> str:
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_render(x) for x in v) + "]"
    raise TypeError(f"cannot render config value {v!r}")


def _coerce(section: str, key: str, want, got):
    if want is float:
        if isinstance(got, bool) or not isinstance(got, (int, float)):
            raise ValueError(f"[{section}] {key}: expected a number, got {got!r}")
        return float(got)
    if want is int:
        if isinstance(got, bool) or not isinstance(got, int):
            raise ValueError(f"[{section}] {key}: expected an integer, got {got!r}")
        return got
    if want is str:
        if not isinstance(got, str):
            raise ValueError(f"[{section}] {key}: expected a string, got {got!r}")
        return got
    if want is tuple:
        if not isinstance(got, (list, tuple)):
            raise ValueError(f"[{section}] {key}: expected a list, got {got!r}")
        return tuple(got)
    raise TypeError(f"unhandled config field type {want}")


def config_from_dict(d: dict) -> RunConfig:
    """Strict construction: unknown sections or keys are rejected with the
    offending name; every omitted field keeps its default."""
    known = dict(_SECTIONS)
    for name in d:
        if name not in known:
            raise ValueError(f"[{name}] is not a config section")
    kwargs = {}
    for name, cls in _SECTIONS:
        got = d.get(name, {})
        if not isinstance(got, dict):
            raise ValueError(f"[{name}] must be a section, got {got!r}")
        defaults = cls()
        names = {f.name for f in fields(cls)}
        sec_kwargs = {}
        for key, val in got.items():
            if key not in names:
                raise ValueError(f"{key!r} is not a key of [{name}]")
            want = type(getattr(defaults, key))
            sec_kwargs[key] = _coerce(name, key, want, val)
        kwargs[name] = cls(**sec_kwargs)
    return RunConfig(**kwargs)


def loads(text: str) -> RunConfig:
    return config_from_dict(tomllib.loads(text))


def load(path) -> RunConfig:
    with open(path, "rb") as f:
        return config_from_dict(tomllib.load(f))


def save(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        f.write(cfg.to_toml())
