"""Run configuration: JSON schema, defaults and named presets."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import jsonschema

from .accel import ACCELERATORS, EnergyTable
from .baselines import FEDPROX_MU, FRACTIONS, SCALES, Strategy, StrategyKind
from .metrics import LITERAL, RECALL
from .models import check_model_spec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_STRATEGY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": [k.value for k in StrategyKind]},
        "accelerator": {"type": "string"},
        "scale": {"type": ["number", "string"]},
        "mu": {"type": "number", "minimum": 0},
        "batch_fraction": {"type": ["number", "string"]},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "model": {
            "type": "object",
            "required": ["arch"],
            "properties": {"arch": {"enum": ["cnn", "resnet", "mlp"]}},
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train": {"type": "string"},
                "test": {"type": "string"},
                "format": {"enum": ["bin", "csv"]},
            },
        },
        "input_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "num_classes": {"type": "integer", "minimum": 2},
        "partition": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["iid", "dirichlet", "rc"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "devices": {"type": "integer", "minimum": 1},
        "experiment": {"type": "string"},
        "groups": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["fraction", "strategy"],
                "properties": {
                    "label": {"type": "string"},
                    "fraction": {"type": ["number", "string"]},
                    "strategy": {"oneOf": [{"type": "string"}, _STRATEGY_SCHEMA]},
                },
            },
        },
        "rounds": {"type": "integer", "minimum": 1},
        "clients_per_round": {"type": "integer", "minimum": 1},
        "local_epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "initial": {"type": "number", "exclusiveMinimum": 0},
                "final": {"type": "number", "minimum": 0},
                "schedule": {"enum": ["cosine", "constant"]},
            },
        },
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "energy_table": {"type": ["string", "null"]},
        "output_dir": {"type": "string"},
        "accuracy_mode": {"enum": [LITERAL, RECALL]},
        "threads": {"type": "integer", "minimum": 1},
        "augment": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"flip": {"type": "boolean"}, "crop": {"type": "integer", "minimum": 0}},
        },
    },
}


@dataclass(frozen=True)
class GroupSpec:
    label: str
    fraction: float
    strategy: Strategy


@dataclass
class RunConfig:
    name: str = "run"
    model: dict = field(default_factory=lambda: {"arch": "cnn"})
    train_path: str = "bundled:synth8x8-train"
    test_path: str = "bundled:synth8x8-test"
    data_format: str = "bin"
    input_shape: tuple | None = None
    num_classes: int | None = None
    partition: str = "iid"
    alpha: float = 0.1
    devices: int = 16
    groups: list = field(default_factory=lambda: [GroupSpec("g1", 1.0, Strategy())])
    experiment: str | None = None
    rounds: int = 30
    clients_per_round: int = 8
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.1
    lr_final: float = 0.001
    lr_schedule: str = "cosine"
    seeds: list = field(default_factory=lambda: [0])
    energy_table: str | None = None
    output_dir: str = "runs"
    accuracy_mode: str = LITERAL
    threads: int = 1
    flip: bool = False
    crop: int = 0
    base_dir: str = "."

    def lr_at(self, r: int) -> float:
        """Learning rate of round r (1-based)."""
        if self.lr_schedule == "constant" or self.rounds == 1:
            return self.lr
        import math
        t = (r - 1) / (self.rounds - 1)
        return self.lr_final + (self.lr - self.lr_final) * 0.5 * (1.0 + math.cos(math.pi * t))

    def load_energy_table(self) -> EnergyTable:
        if self.energy_table is None:
            return EnergyTable()
        return EnergyTable.load(self.resolve(self.energy_table))

    def resolve(self, path: str) -> str:
        if path.startswith("bundled:"):
            return path
        p = Path(path)
        return str(p if p.is_absolute() else Path(self.base_dir) / p)

    @property
    def model_width(self) -> float:
        """Server model width: below 1 only for the small-model baseline."""
        small = [g.strategy.scale for g in self.groups if g.strategy.kind is StrategyKind.SMALL_MODEL]
        return small[0] if small else 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [{"label": g.label, "fraction": g.fraction, "strategy": g.strategy.to_dict()} for g in self.groups]
        d.pop("base_dir")
        return d


# ---------------------------------------------------------------------------
# presets

THIRD = 1.0 / 3.0

MIXTURES = {
    "Mix1": [("C1", 0.2), ("C2", 0.8)],
    "Mix2": [("C1", 0.2), ("C2", 0.2), ("C3", 0.6)],
    "Mix3": [("C1", 0.2), ("C2", 0.2), ("C3", 0.2), ("C4", 0.4)],
    "Mix4": [("C1", 0.2), ("C2", 0.2), ("C3", 0.2), ("C4", 0.2), ("C5", 0.2)],
}


def strategy_preset(name: str) -> Strategy:
    """Resolve a single-group preset name: C1..C5, MIT-x, S1..S4, F1..F3, DropDevices."""
    if name in ACCELERATORS:
        return Strategy(StrategyKind.OURS, accelerator=name)
    if name in SCALES:
        return Strategy(StrategyKind.HETEROFL, scale=SCALES[name])
    if name in FRACTIONS:
        return Strategy(StrategyKind.FEDPROX, mu=FEDPROX_MU, batch_fraction=FRACTIONS[name])
    if name == "DropDevices":
        return Strategy(StrategyKind.DROP)
    raise ConfigError(f"unknown preset {name!r}")


def _three(unconstrained: Strategy, constrained: Strategy) -> list[GroupSpec]:
    return [GroupSpec("g1", THIRD, unconstrained), GroupSpec("g2", THIRD, constrained),
            GroupSpec("g3", THIRD, constrained)]


def experiment_groups(name: str) -> list[GroupSpec]:
    """Expand an experiment preset into per-group strategies.

    Mainline presets put a third of the devices on the unconstrained C1/S1
    baseline (g1) and the rest on the constrained level (g2, g3):

    ``ours:C3``, ``homogeneous:C1``, ``heterofl:S4``, ``fedrolex:S4``,
    ``small:S4``, ``DropDevices``, ``fedprox:F2``, ``fedprox:F2:C4`` and
    ``Mix1``..``Mix4``.
    """
    parts = name.split(":")
    head = parts[0]
    try:
        if name in MIXTURES:
            return [GroupSpec(f"g{i + 1}", f, Strategy(StrategyKind.OURS, accelerator=c))
                    for i, (c, f) in enumerate(MIXTURES[name])]
        if name in ("DropDevices", "drop"):
            return _three(Strategy(), Strategy(StrategyKind.DROP))
        if head == "ours" and len(parts) == 2:
            return _three(Strategy(), Strategy(StrategyKind.OURS, accelerator=parts[1]))
        if head == "homogeneous" and len(parts) == 2:
            s = strategy_preset(parts[1])
            return _three(s, s)
        if head in ("heterofl", "fedrolex") and len(parts) == 2:
            kind = StrategyKind(head)
            return _three(Strategy(kind, scale=1.0), Strategy(kind, scale=SCALES[parts[1]]))
        if head == "small" and len(parts) == 2:
            s = Strategy(StrategyKind.SMALL_MODEL, scale=SCALES[parts[1]])
            return _three(s, s)
        if head == "fedprox" and len(parts) in (2, 3):
            acc = parts[2] if len(parts) == 3 else "C1"
            return _three(Strategy(StrategyKind.FEDPROX, mu=FEDPROX_MU, batch_fraction=1.0),
                          Strategy(StrategyKind.FEDPROX, accelerator=acc, mu=FEDPROX_MU,
                                   batch_fraction=FRACTIONS[parts[1]]))
    except (KeyError, ValueError) as e:
        raise ConfigError(f"experiment {name!r}: {e}") from None
    raise ConfigError(f"unknown experiment preset {name!r}")


def _number(v, path: str) -> float:
    if isinstance(v, str):
        try:
            return float(Fraction(v))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"{path}: cannot parse {v!r} as a number or fraction") from None
    return float(v)


def _strategy(v, path: str) -> Strategy:
    if isinstance(v, str):
        return strategy_preset(v)
    d = dict(v)
    if "scale" in d:
        d["scale"] = SCALES[d["scale"]] if d["scale"] in SCALES else _number(d["scale"], f"{path}.scale")
    if "batch_fraction" in d:
        bf = d["batch_fraction"]
        d["batch_fraction"] = FRACTIONS[bf] if bf in FRACTIONS else _number(bf, f"{path}.batch_fraction")
    try:
        return Strategy(**d)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def _path_of(err: jsonschema.ValidationError) -> str:
    out = ""
    for p in err.absolute_path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def parse_config(doc: dict, base_dir: str = ".") -> RunConfig:
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            if e.validator == "additionalProperties":
                extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
                where = _path_of(e)
                msgs.append(f"unknown key(s) {', '.join(repr(k) for k in extra)} at {where}")
            else:
                msgs.append(f"{_path_of(e)}: {e.message}")
        raise ConfigError("; ".join(msgs))
    cfg = RunConfig(base_dir=base_dir)
    simple = ("name", "devices", "rounds", "clients_per_round", "local_epochs", "batch_size",
              "energy_table", "output_dir", "accuracy_mode", "threads", "num_classes")
    for k in simple:
        if k in doc:
            setattr(cfg, k, doc[k])
    if "seeds" in doc:
        cfg.seeds = list(doc["seeds"])
    if "model" in doc:
        try:
            check_model_spec(doc["model"])
        except ValueError as e:
            raise ConfigError(f"model: {e}") from None
        cfg.model = dict(doc["model"])
    if "input_shape" in doc:
        cfg.input_shape = tuple(doc["input_shape"])
    ds = doc.get("dataset", {})
    cfg.train_path = ds.get("train", cfg.train_path)
    cfg.test_path = ds.get("test", cfg.test_path)
    cfg.data_format = ds.get("format", cfg.data_format)
    part = doc.get("partition", {})
    cfg.partition = part.get("kind", cfg.partition)
    cfg.alpha = float(part.get("alpha", cfg.alpha))
    lr = doc.get("lr", {})
    cfg.lr = float(lr.get("initial", cfg.lr))
    cfg.lr_final = float(lr.get("final", cfg.lr_final))
    cfg.lr_schedule = lr.get("schedule", cfg.lr_schedule)
    aug = doc.get("augment", {})
    cfg.flip = bool(aug.get("flip", False))
    cfg.crop = int(aug.get("crop", 0))

    if "experiment" in doc and "groups" in doc:
        raise ConfigError("give either 'experiment' or 'groups', not both")
    if "experiment" in doc:
        cfg.experiment = doc["experiment"]
        cfg.groups = experiment_groups(doc["experiment"])
    elif "groups" in doc:
        groups = []
        for i, g in enumerate(doc["groups"]):
            path = f"groups[{i}]"
            groups.append(GroupSpec(g.get("label", f"g{i + 1}"), _number(g["fraction"], f"{path}.fraction"),
                                    _strategy(g["strategy"], f"{path}.strategy")))
        cfg.groups = groups
    total = sum(g.fraction for g in cfg.groups)
    if abs(total - 1.0) > 1e-6:
        raise ConfigError(f"groups: fractions sum to {total}, expected 1")
    small = {g.strategy.scale for g in cfg.groups if g.strategy.kind is StrategyKind.SMALL_MODEL}
    if small and (len(small) > 1 or any(g.strategy.kind is not StrategyKind.SMALL_MODEL for g in cfg.groups)):
        raise ConfigError("groups: the small-model baseline must use one scale for every group")
    if cfg.clients_per_round > cfg.devices:
        raise ConfigError("clients_per_round exceeds devices")
    if cfg.energy_table is not None and not Path(cfg.resolve(cfg.energy_table)).is_file():
        raise ConfigError(f"energy_table: file {cfg.energy_table!r} not found")
    for key, p in (("dataset.train", cfg.train_path), ("dataset.test", cfg.test_path)):
        if not p.startswith("bundled:") and not Path(cfg.resolve(p)).is_file():
            raise ConfigError(f"{key}: file {p!r} not found")
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(doc, base_dir=str(p.parent))


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
