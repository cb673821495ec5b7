"""Run configuration: nested JSON with fixed schema, defaults, strict keys."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .crf import FULL, POTTS, Compatibility, PairwiseModel
from .filtering import FEATURE_DIMS, KernelSpec
from .learning import SIGMA_BRUTE, SIGMA_FD, SIGMA_FROZEN, TrainOptions
from .meanfield import MfConfig
from .optim import OptimState
from .unary import PROVIDERS


class ConfigError(ValueError):
    pass


@dataclass
class KernelConfig:
    kind: str = "spatial"
    sigma: list = field(default_factory=lambda: [3.0, 3.0])
    weight: float = 1.0


def _default_kernels():
    return [KernelConfig("spatial", [3.0, 3.0], 0.02),
            KernelConfig("bilateral", [20.0, 20.0, 30.0, 30.0, 30.0], 0.01)]


@dataclass
class CrfConfig:
    enabled: bool = True
    kernels: list = field(default_factory=_default_kernels)
    compatibility: str = POTTS
    compat_matrix: list | None = None
    iterations: int = 5
    filter_mode: str = "brute"
    sigma_grad: str = SIGMA_BRUTE


@dataclass
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_top: float = 0.01
    lr_body: float = 0.001
    lr_crf: float = 0.001
    decay_crf: bool = False


@dataclass
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 20
    seed: int = 0


@dataclass
class RunConfig:
    labels: int = 4
    class_names: list | None = None
    unary: str = "convnet"
    crf: CrfConfig = field(default_factory=CrfConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    loss: str = "mean"

    # -- validation -------------------------------------------------------
    def validate(self) -> "RunConfig":
        if not isinstance(self.labels, int) or self.labels < 2:
            raise ConfigError(f"labels must be an integer >= 2, got {self.labels!r}")
        if self.labels > 255:
            raise ConfigError("at most 255 labels (255 is void)")
        if self.class_names is not None and len(self.class_names) != self.labels:
            raise ConfigError(f"{len(self.class_names)} class names for {self.labels} labels")
        if self.unary not in PROVIDERS:
            raise ConfigError(f"unary must be one of {sorted(PROVIDERS)}, got {self.unary!r}")
        if self.loss not in ("mean", "sum"):
            raise ConfigError(f"loss must be 'mean' or 'sum', got {self.loss!r}")
        c = self.crf
        if c.compatibility not in (POTTS, FULL):
            raise ConfigError(f"unknown compatibility {c.compatibility!r}")
        if c.sigma_grad not in (SIGMA_BRUTE, SIGMA_FD, SIGMA_FROZEN):
            raise ConfigError(f"unknown sigma_grad {c.sigma_grad!r}")
        if c.sigma_grad == SIGMA_BRUTE and c.filter_mode == "lattice":
            raise ConfigError("sigma_grad 'brute' needs filter_mode 'brute'")
        try:
            MfConfig(iterations=c.iterations, filter_mode=c.filter_mode)
            self.model()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        o = self.optimizer
        try:
            OptimState(o.momentum, o.weight_decay, {"top": o.lr_top, "body": o.lr_body, "crf": o.lr_crf})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        t = self.training
        if t.epochs < 0 or t.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        return self

    # -- builders ---------------------------------------------------------
    def model(self) -> PairwiseModel:
        c = self.crf
        for k in c.kernels:
            if k.kind not in FEATURE_DIMS:
                raise ConfigError(f"unknown kernel kind {k.kind!r}")
        specs = [KernelSpec(k.kind, tuple(float(s) for s in k.sigma)) for k in c.kernels]
        if c.compatibility == FULL:
            mat = c.compat_matrix if c.compat_matrix is not None else -np.eye(self.labels)
            compat = Compatibility(FULL, np.array(mat, dtype=np.float64))
            if compat.matrix.shape != (self.labels, self.labels):
                raise ConfigError(f"compatibility matrix must be {self.labels}x{self.labels}")
        else:
            compat = Compatibility(POTTS)
        return PairwiseModel(specs, [k.weight for k in c.kernels], compat)

    def mf_config(self) -> MfConfig:
        return MfConfig(iterations=self.crf.iterations, filter_mode=self.crf.filter_mode)

    def train_options(self, stage: str) -> TrainOptions:
        joint = stage == "joint" and self.crf.enabled
        return TrainOptions(crf_enabled=joint, mf=self.mf_config(), sigma_grad=self.crf.sigma_grad,
                            reduction=self.loss, train_crf=joint)

    def optim_state(self, provider, model: PairwiseModel) -> OptimState:
        o = self.optimizer
        groups = {n: g for g, names in provider.groups.items() for n in names}
        groups["crf.w"] = "crf"
        sig = set()
        for m in range(model.num_kernels):
            groups[f"crf.sigma{m}"] = "crf"
            sig.add(f"crf.sigma{m}")
        groups["crf.mu"] = "crf"
        decay = {"top", "body"} | ({"crf"} if o.decay_crf else set())
        return OptimState(o.momentum, o.weight_decay, {"top": o.lr_top, "body": o.lr_body, "crf": o.lr_crf},
                          groups, frozenset(decay), frozenset(sig))

    def names(self) -> list:
        return list(self.class_names) if self.class_names else [f"class{i}" for i in range(self.labels)]

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{where}.{name}" if where else name
        default = getattr(cls(), name)
        if isinstance(default, (CrfConfig, OptimizerConfig, TrainingConfig)):
            value = _build(type(default), value, sub)
        elif name == "kernels" and cls is CrfConfig:
            if not isinstance(value, list):
                raise ConfigError(f"{sub} must be a list")
            value = [_build(KernelConfig, v, f"{sub}[{i}]") for i, v in enumerate(value)]
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{sub} must be true or false")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{sub} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{sub} must be a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{sub} must be a string")
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, copy.deepcopy(data), "").validate()


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)
