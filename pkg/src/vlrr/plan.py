"""Experiment plans: flat ``key = value`` text files.

Blank lines and ``#`` comments are ignored; dotted keys group settings::

    variant = IV
    seed = 7
    data.train = train.vlrd
    data.test = test.vlrd
    network.n = 64,64,32
    coupling.c = 0.50,0.75,0.75
    pretrain.loss = mse

Unknown keys are rejected. ``to_text`` writes every key, so
``parse_plan(plan.to_text()) == plan``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DegradationSpec
from .errors import ConfigError
from .models import DEFAULT_RATIOS, CouplingConfig, NetworkConfig
from .training import FinetuneConfig, PretrainConfig

VARIANTS = ("I", "II", "III", "IV", "V")
COUPLED = ("III", "IV", "V")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


# key -> (section attribute, field name, parser)
_KEYS = {
    "data.train": ("data", "train", str),
    "data.test": ("data", "test", str),
    "degradation.s": ("degradation", "s", int),
    "degradation.sp_fraction": ("degradation", "sp_fraction", float),
    "network.n": ("network", "n", _ints),
    "network.f": ("network", "f", _ints),
    "network.m4": ("network", "m4", int),
    "network.m5": ("network", "m5", int),
    "network.f4": ("network", "f4", int),
    "network.side": ("network", "side", int),
    "network.dropout": ("network", "dropout", float),
    "coupling.c": ("coupling", "c", _floats),
    "pretrain.loss": ("pretrain", "loss", str),
    "pretrain.huber_c": ("pretrain", "huber_c", float),
    "pretrain.lr": ("pretrain", "learning_rate", float),
    "pretrain.batch_size": ("pretrain", "batch_size", int),
    "pretrain.epochs": ("pretrain", "max_epochs", int),
    "pretrain.mode": ("pretrain", "mode", str),
    "finetune.lr": ("finetune", "learning_rate", float),
    "finetune.anneal": ("finetune", "anneal", _bool),
    "finetune.patience": ("finetune", "patience", int),
    "finetune.factor": ("finetune", "factor", float),
    "finetune.min_delta": ("finetune", "min_delta", float),
    "finetune.lr_floor": ("finetune", "lr_floor", float),
    "finetune.epochs": ("finetune", "max_epochs", int),
    "finetune.batch_size": ("finetune", "batch_size", int),
    "finetune.val_fraction": ("finetune", "val_fraction", float),
    "augment.sigma": ("augment", "sigma", float),
}


@dataclass
class DataPaths:
    train: str = "train.vlrd"
    test: str = ""


@dataclass
class ExperimentPlan:
    variant: str = "I"
    seed: int = 0
    out: str = "runs/out"
    data: DataPaths = field(default_factory=DataPaths)
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    coupling_c: tuple[float, float, float] | None = None
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.coupling_c is not None and self.variant not in ("IV", "V"):
            raise ConfigError(f"coupling.c only applies to variants IV and V, not {self.variant}")
        if self.variant == "IV" and self.pretrain.loss != "mse":
            raise ConfigError("variant IV pre-trains with mse; use variant V for huber")
        if self.variant == "V" and self.pretrain.loss != "huber":
            raise ConfigError("variant V pre-trains with huber")
        self.coupling  # validates c against n

    @property
    def coupling(self) -> CouplingConfig | None:
        if self.variant == "III":
            return CouplingConfig.full(self.network)
        if self.variant in ("IV", "V"):
            c = self.coupling_c if self.coupling_c is not None else DEFAULT_RATIOS
            return CouplingConfig.from_ratios(c, self.network.n)
        return None

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if p.is_absolute() or self.base_dir is None:
            return p
        return self.base_dir / p

    # --- text form ---------------------------------------------------------

    def to_dict(self) -> dict[str, str]:
        out = {"variant": self.variant, "seed": str(self.seed), "out": self.out}
        sections = {
            "data": self.data,
            "degradation": self.degradation,
            "network": self.network,
            "pretrain": self.pretrain,
            "finetune": self.finetune,
        }
        for key, (section, name, _) in _KEYS.items():
            if section == "coupling":
                if self.coupling_c is not None:
                    out[key] = _fmt(tuple(self.coupling_c))
            elif section == "augment":
                out[key] = _fmt(self.degradation.gaussian_sigma)
            else:
                out[key] = _fmt(getattr(sections[section], name))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def _defaults_for(variant: str) -> dict[str, str]:
    # coupled models start at 0.01 and keep it
    if variant in COUPLED:
        d = {"pretrain.lr": "0.01"}
        if variant == "V":
            d["pretrain.loss"] = "huber"
        return d
    return {}


def parse_plan(text: str, base_dir: Path | None = None) -> ExperimentPlan:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = key.strip(), value.strip()
        if key not in _KEYS and key not in ("variant", "seed", "out"):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    variant = raw.get("variant", "I")
    merged = {**_defaults_for(variant), **raw}
    sections: dict[str, dict] = {s: {} for s in ("data", "degradation", "network", "pretrain", "finetune")}
    coupling_c = None
    sigma = None
    try:
        for key, value in merged.items():
            if key in ("variant", "seed", "out"):
                continue
            section, name, conv = _KEYS[key]
            if section == "coupling":
                coupling_c = conv(value)
                if len(coupling_c) != 3:
                    raise ConfigError("coupling.c needs three ratios")
            elif section == "augment":
                sigma = conv(value)
            else:
                sections[section][name] = conv(value)
        if sigma is not None:
            sections["degradation"]["gaussian_sigma"] = sigma
        degradation = DegradationSpec(**sections["degradation"])
        pretrain = PretrainConfig(noise_sigma=degradation.gaussian_sigma, **sections["pretrain"])
        finetune = FinetuneConfig(noise_sigma=degradation.gaussian_sigma, **sections["finetune"])
        return ExperimentPlan(
            variant=variant,
            seed=int(merged.get("seed", 0)),
            out=merged.get("out", "runs/out"),
            data=DataPaths(**sections["data"]),
            degradation=degradation,
            network=NetworkConfig(**sections["network"]),
            coupling_c=coupling_c,
            pretrain=pretrain,
            finetune=finetune,
            base_dir=base_dir,
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid plan value: {exc}") from None


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    return parse_plan(path.read_text(encoding="utf-8"), base_dir=path.parent)


def with_overrides(plan: ExperimentPlan, **changes) -> ExperimentPlan:
    """Copy of ``plan`` with top-level fields replaced (re-validated)."""
    values = {f.name: getattr(plan, f.name) for f in fields(plan)}
    values.update({k: v for k, v in changes.items() if v is not None})
    return ExperimentPlan(**values)
