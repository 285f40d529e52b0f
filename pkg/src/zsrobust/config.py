"""Run configurations and their strict JSON loader."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .attacks import STEP_MODES, AttackConfig
from .losses import DEFAULT_TAU, VARIANTS
from .models import ArchConfig

ADAPTATIONS = ("full_ft", "partial_ft", "linear_probe", "vpt_token", "vpt_pixel")
OBJECTIVES = ("ce", "contrastive")


class ConfigError(ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass(frozen=True)
class TrainConfig:
    loss_variant: str
    adaptation: str
    lr: float | None = None
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    tau: float = DEFAULT_TAU
    seed: int = 0
    attack: AttackConfig | None = field(default_factory=AttackConfig.training)
    shots: int | None = None
    unlabeled: bool = False
    prompt_tokens: int = 5
    ft_blocks: int = 1
    head_warmup_epochs: int = 3
    freeze_head: bool = False
    train_dictionary: bool = False
    arch: ArchConfig | None = None

    def __post_init__(self):
        if self.loss_variant not in VARIANTS:
            raise ConfigError("loss_variant", f"must be one of {VARIANTS}")
        if self.adaptation not in ADAPTATIONS:
            raise ConfigError("adaptation", f"must be one of {ADAPTATIONS}")
        if self.adaptation == "linear_probe" and self.loss_variant not in ("ce", "adv"):
            raise ConfigError("adaptation", "linear_probe requires loss_variant 'ce' or 'adv'")
        if self.unlabeled and self.loss_variant != "tecoa":
            raise ConfigError("unlabeled", "unlabeled training requires loss_variant 'tecoa'")
        if self.lr is not None and not self.lr > 0:
            raise ConfigError("lr", "must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", "must lie in [0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau", "τ must be > 0")
        if self.shots is not None and self.shots < 1:
            raise ConfigError("shots", "must be a positive integer")
        if self.prompt_tokens < 1:
            raise ConfigError("prompt_tokens", "must be >= 1")
        if self.ft_blocks < 0:
            raise ConfigError("ft_blocks", "must be >= 0")
        if self.head_warmup_epochs < 0:
            raise ConfigError("head_warmup_epochs", "must be >= 0")

    @property
    def learning_rate(self):
        if self.lr is not None:
            return self.lr
        if self.adaptation in ("vpt_token", "vpt_pixel"):
            return 1e-1
        if self.adaptation == "linear_probe":
            return 1e-2
        return 1e-3

    @property
    def adversarial(self):
        return self.attack is not None and self.loss_variant != "ce"

    def to_dict(self):
        out = asdict(self)
        if self.arch is not None:
            out["arch"] = self.arch.to_dict()
        return out

    def replace(self, **changes):
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return TrainConfig(**data)


@dataclass(frozen=True)
class EvalConfig:
    attack: AttackConfig | None = field(default_factory=AttackConfig.evaluation)
    objective: str = "ce"
    tau: float = DEFAULT_TAU
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError("objective", f"must be one of {OBJECTIVES}")
        if not self.tau > 0:
            raise ConfigError("tau", "τ must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")

    def to_dict(self):
        return asdict(self)


def config_hash(cfg):
    doc = cfg.to_dict() if hasattr(cfg, "to_dict") else cfg
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- loading

_NUM = (int, float)

ATTACK_SCHEMA = {
    "eps": _NUM, "alpha": _NUM, "steps": int, "norm": str, "random_start": bool,
    "best_iterate": bool, "step_mode": str, "restarts": int,
}
ARCH_SCHEMA = {
    "image_shape": list, "patch": int, "width": int, "depth": int, "heads": int,
    "embed_dim": int, "mlp_ratio": int,
}
TRAIN_SCHEMA = {
    "loss_variant": str, "adaptation": str, "lr": (_NUM, None), "momentum": _NUM,
    "epochs": int, "batch_size": int, "tau": _NUM, "seed": int, "attack": (dict, None),
    "shots": (int, None), "unlabeled": bool, "prompt_tokens": int, "ft_blocks": int,
    "head_warmup_epochs": int, "freeze_head": bool, "train_dictionary": bool,
    "arch": (dict, None),
}
EVAL_SCHEMA = {"attack": (dict, None), "objective": str, "tau": _NUM, "batch_size": int, "seed": int}
REQUIRED = {"train": ("loss_variant", "adaptation")}


def _flatten_types(spec):
    out = []
    for t in spec if isinstance(spec, tuple) else (spec,):
        if isinstance(t, tuple):
            out.extend(t)
        else:
            out.append(t)
    return out


def _typed(doc, schema, prefix=""):
    for key, value in doc.items():
        name = prefix + key
        if key not in schema:
            raise ConfigError(name, "unknown key")
        allowed = _flatten_types(schema[key])
        if value is None:
            if None not in allowed:
                raise ConfigError(name, "may not be null")
            continue
        ok = any(
            t is not None and isinstance(value, t) and not (isinstance(value, bool) and t is not bool)
            for t in allowed
        )
        if not ok:
            names = "/".join("null" if t is None else t.__name__ for t in allowed)
            raise ConfigError(name, f"expected {names}, got {type(value).__name__}")
    return doc


def _build(cls, doc, key):
    try:
        return cls(**doc)
    except ConfigError as err:
        raise ConfigError(f"{key}{err.key}" if key else err.key, str(err).split(": ", 1)[1]) from None
    except ValueError as err:
        raise ConfigError(key.rstrip(".") or cls.__name__, str(err)) from None


def parse_attack(doc, prefix=""):
    doc = dict(_typed(doc, ATTACK_SCHEMA, prefix))
    if "step_mode" in doc and doc["step_mode"] not in STEP_MODES:
        raise ConfigError(prefix + "step_mode", f"must be one of {STEP_MODES}")
    for k in ("eps", "alpha"):
        if k in doc:
            doc[k] = float(doc[k])
    return _build(AttackConfig, doc, prefix)


def parse_config(doc, kind):
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    if kind == "attack":
        return parse_attack(doc)
    if kind == "train":
        doc = dict(_typed(doc, TRAIN_SCHEMA))
        for key in REQUIRED["train"]:
            if key not in doc:
                raise ConfigError(key, "required key missing")
        if "attack" in doc:
            base = AttackConfig.training().to_dict()
            doc["attack"] = None if doc["attack"] is None else parse_attack({**base, **doc["attack"]}, "attack.")
        if doc.get("arch") is not None:
            arch = dict(_typed(doc["arch"], ARCH_SCHEMA, "arch."))
            doc["arch"] = _build(ArchConfig, arch, "arch.")
        for k in ("lr", "momentum", "tau"):
            if doc.get(k) is not None:
                doc[k] = float(doc[k])
        return _build(TrainConfig, doc, "")
    if kind == "eval":
        doc = dict(_typed(doc, EVAL_SCHEMA))
        if "attack" in doc:
            base = AttackConfig.evaluation().to_dict()
            doc["attack"] = None if doc["attack"] is None else parse_attack({**base, **doc["attack"]}, "attack.")
        if "tau" in doc:
            doc["tau"] = float(doc["tau"])
        return _build(EvalConfig, doc, "")
    raise ValueError(f"unknown config kind {kind!r}")


def infer_kind(doc):
    if "loss_variant" in doc or "adaptation" in doc:
        return "train"
    if "objective" in doc or "attack" in doc:
        return "eval"
    return "attack"


def load_config(path, kind=None):
    """Load a train/attack/eval config from JSON, rejecting unknown keys."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError("<file>", f"malformed JSON: {err}") from None
    return parse_config(doc, kind or infer_kind(doc))


