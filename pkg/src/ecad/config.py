"""Experiment configuration: INI-style sections with every default embedded.

    [experiment]  seed, variants, train_days, test_day, shards, use_masks, mask_mode
    [sim]         SimConfig fields
    [windows]     W, V, W_list, V_list, day_granular
    [net]         emb_dim, bottom_dims, tower_dims, alpha
    [train]       learning_rate, decay, epsilon, batch_size, epochs

List values are comma separated. The single experiment seed drives the
simulator, parameter initialization and test sharding.

``replication_preset`` is what ``ecad replicate`` runs without a config:
200k clicks over 11 days with a denser conversion and refund base than
``SimConfig()`` so the refund task has enough positives to rank variants,
and a smaller learning rate than ``TrainConfig()`` so a single epoch ends
calibrated. ``configs/replicate.ini`` holds the same values.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

from .attribution import MASK_MODES, WindowConfig
from .errors import ConfigError
from .models import VARIANTS, NetConfig, TrainConfig
from .simulator import SimConfig


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(" ", "").split(",") if x)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


REPLICATION_SIM = dict(
    cardinality_per_field=500,
    target_cvr=0.05,
    target_rfr=0.4,
    base_cvr_logit_scale=1.5,
    base_rfr_logit_scale=1.5,
    drift_rate=0.08,
    task_correlation=0.9,
)
REPLICATION_LEARNING_RATE = 0.02


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    windows: WindowConfig = field(default_factory=WindowConfig.from_days)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variants: tuple[str, ...] = VARIANTS
    train_days: int = 10
    test_day: int = 11
    shards: int = 10
    use_masks: bool = True
    # label determination rule for training labels, see attribution.attribute_log
    mask_mode: str = "window"
    seed: int = 0

    def __post_init__(self):
        if self.train_days < 1:
            raise ConfigError("train_days must be >= 1")
        if self.test_day <= self.train_days:
            raise ConfigError(f"test day {self.test_day} must come after the training horizon ({self.train_days})")
        if self.test_day > self.sim.horizon_days:
            raise ConfigError(f"test day {self.test_day} beyond simulated horizon {self.sim.horizon_days}")
        if self.shards < 1:
            raise ConfigError("shards must be >= 1")
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variants: {', '.join(unknown)}")
        if not self.variants:
            raise ConfigError("variant list is empty")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        if self.sim.seed != self.seed or self.net.seed != self.seed:
            object.__setattr__(self, "sim", replace(self.sim, seed=self.seed))
            object.__setattr__(self, "net", replace(self.net, seed=self.seed))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {
            "experiment": {
                "seed": self.seed,
                "variants": list(self.variants),
                "train_days": self.train_days,
                "test_day": self.test_day,
                "shards": self.shards,
                "use_masks": self.use_masks,
                "mask_mode": self.mask_mode,
            },
            "sim": self.sim.to_dict(),
            "windows": self.windows.to_dict(),
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
        }

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        d = self.to_dict()
        cp["experiment"] = {
            "seed": str(self.seed),
            "variants": ",".join(self.variants),
            "train_days": str(self.train_days),
            "test_day": str(self.test_day),
            "shards": str(self.shards),
            "use_masks": str(self.use_masks).lower(),
            "mask_mode": self.mask_mode,
        }
        cp["sim"] = {k: (_num(v) if isinstance(v, float) else str(v)) for k, v in d["sim"].items() if k != "seed"}
        wd = d["windows"]
        cp["windows"] = {
            "W": _num(wd["W"]),
            "V": _num(wd["V"]),
            "W_list": ",".join(_num(x) for x in wd["W_list"]),
            "V_list": ",".join(_num(x) for x in wd["V_list"]),
            "day_granular": str(wd["day_granular"]).lower(),
        }
        cp["net"] = {
            "emb_dim": str(self.net.emb_dim),
            "bottom_dims": ",".join(map(str, self.net.bottom_dims)),
            "tower_dims": ",".join(map(str, self.net.tower_dims)),
            "alpha": _num(self.net.alpha),
        }
        cp["train"] = {
            "learning_rate": _num(self.train.learning_rate),
            "decay": _num(self.train.decay),
            "epsilon": repr(self.train.epsilon),
            "batch_size": str(self.train.batch_size),
            "epochs": str(self.train.epochs),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


_SIM_FIELDS = {f.name: f.type for f in dataclasses.fields(SimConfig)}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep W / V case
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from None
    known = {"experiment", "sim", "windows", "net", "train"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    try:
        base = ExperimentConfig()
        ex = cp["experiment"] if cp.has_section("experiment") else {}
        seed = int(ex.get("seed", base.seed))

        sim_kw = {}
        if cp.has_section("sim"):
            for k, v in cp["sim"].items():
                if k not in _SIM_FIELDS or k == "seed":
                    raise ConfigError(f"unknown [sim] key {k!r}")
                sim_kw[k] = int(v) if _SIM_FIELDS[k] in (int, "int") else float(v)
        sim = replace(base.sim, **sim_kw)

        wd = base.windows.to_dict()
        if cp.has_section("windows"):
            canonical = {k.lower(): k for k in wd}
            w = {}
            for k, v in cp["windows"].items():
                if k.lower() not in canonical:
                    raise ConfigError(f"unknown [windows] key {k!r}")
                w[canonical[k.lower()]] = v
            wd = {
                "W": float(w.get("W", wd["W"])),
                "V": float(w.get("V", wd["V"])),
                "W_list": _floats(w["W_list"]) if "W_list" in w else wd["W_list"],
                "V_list": _floats(w["V_list"]) if "V_list" in w else wd["V_list"],
                "day_granular": _bool(w["day_granular"]) if "day_granular" in w else wd["day_granular"],
            }
        windows = WindowConfig.from_dict(wd)

        net = base.net
        if cp.has_section("net"):
            n = cp["net"]
            for k in n:
                if k not in ("emb_dim", "bottom_dims", "tower_dims", "alpha"):
                    raise ConfigError(f"unknown [net] key {k!r}")
            net = NetConfig(
                int(n.get("emb_dim", net.emb_dim)),
                _ints(n["bottom_dims"]) if "bottom_dims" in n else net.bottom_dims,
                _ints(n["tower_dims"]) if "tower_dims" in n else net.tower_dims,
                float(n.get("alpha", net.alpha)),
            )

        train = base.train
        if cp.has_section("train"):
            t = cp["train"]
            for k in t:
                if k not in ("learning_rate", "decay", "epsilon", "batch_size", "epochs"):
                    raise ConfigError(f"unknown [train] key {k!r}")
            train = TrainConfig(
                float(t.get("learning_rate", train.learning_rate)),
                float(t.get("decay", train.decay)),
                float(t.get("epsilon", train.epsilon)),
                int(t.get("batch_size", train.batch_size)),
                int(t.get("epochs", train.epochs)),
            )

        variants = base.variants
        if "variants" in ex:
            variants = tuple(v.strip().upper() for v in ex["variants"].split(",") if v.strip())
        return ExperimentConfig(
            sim=sim,
            windows=windows,
            net=net,
            train=train,
            variants=variants,
            train_days=int(ex.get("train_days", base.train_days)),
            test_day=int(ex.get("test_day", base.test_day)),
            shards=int(ex.get("shards", base.shards)),
            use_masks=_bool(ex["use_masks"]) if "use_masks" in ex else base.use_masks,
            mask_mode=ex.get("mask_mode", base.mask_mode).strip(),
            seed=seed,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def replication_preset(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(
        sim=SimConfig(**REPLICATION_SIM),
        train=TrainConfig(learning_rate=REPLICATION_LEARNING_RATE),
        seed=seed,
    )


def load_config(path: str | Path | None, default: ExperimentConfig | None = None) -> ExperimentConfig:
    if path is None:
        return default if default is not None else ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)
