"""Pipeline configuration: a structured text (INI) file whose numeric
defaults trace back to the production weight table or a documented
default. Unknown sections or keys are rejected, and every command embeds
the config hash in its outputs."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from .errors import FormatError

DEFAULTS = {
    "template": {
        "level": 0,
        "scale": 1.0,
        "soft_offset": 7.0,
        "muscle_offset": 5.0,
        "massage_outer_iterations": 30,
        "massage_inner_iterations": 10,
    },
    "solver_weights": {
        "w_soft": 1.0,
        "w_muscle": 1.0,
        "w_skull": 10.0,
        "w_skin": 10.0,
        "w_vol": 1e3,
        "w_str": 1e2,
        "w_con": 1e3,
        "w_inv": 10.0,
        "w_curv": 0.1,
        "w_rect": 1.0,
        "w_dist": 10.0,
        "w_dist2": 10.0,
        "w_tar": 1e3,
        "n_iterations": 6,
    },
    "fitting": {
        "k_in": 40,
        "k_out": 40,
        "ridge": 1e-3,
        "min_distance": 1.0,
        "w_rel": 0.1,
        "max_centers": 1500,
        "regressor_instances": 40,
    },
    "dataset": {
        "n_identities": 200,
        "expressions_per_identity": 5,
        "zero_weight_rate": 0.05,
    },
    "training": {
        "steps": 20000,
        "batch_size": 128,
        "lr_start": 1e-4,
        "lr_end": 5e-5,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "train_fraction": 0.9,
        "hidden": 512,
        "token": 128,
        "log_every": 100,
    },
}


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=lambda: {
        section: dict(keys) for section, keys in DEFAULTS.items()})

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def hash(self) -> str:
        text = ";".join(f"{s}.{k}={self.values[s][k]!r}"
                        for s in sorted(self.values)
                        for k in sorted(self.values[s]))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def solver_weights(self):
        from .solver import SolverWeights
        sw = {k: v for k, v in self.values["solver_weights"].items()
              if k != "n_iterations"}
        return SolverWeights(**sw)

    def template_spec(self):
        from .lhm import TemplateSpec
        t = self.values["template"]
        return TemplateSpec(level=int(t["level"]), scale=float(t["scale"]),
                            soft_offset=float(t["soft_offset"]),
                            muscle_offset=float(t["muscle_offset"]))

    def training_config(self, seed: int = 0):
        from .neural import TrainingConfig
        t = self.values["training"]
        return TrainingConfig(
            steps=int(t["steps"]), batch_size=int(t["batch_size"]),
            lr_start=float(t["lr_start"]), lr_end=float(t["lr_end"]),
            beta1=float(t["beta1"]), beta2=float(t["beta2"]),
            eps=float(t["eps"]), train_fraction=float(t["train_fraction"]),
            seed=seed, hidden=int(t["hidden"]), token=int(t["token"]),
            log_every=int(t["log_every"]))


def load_config(path=None) -> PipelineConfig:
    """Defaults, overlaid with an INI file when given. Unknown sections
    or keys raise a FormatError naming the offender."""
    cfg = PipelineConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise FormatError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in DEFAULTS:
            raise FormatError(f"{path}: unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in DEFAULTS[section]:
                raise FormatError(f"{path}: unknown key {key!r} in [{section}]")
            default = DEFAULTS[section][key]
            try:
                value = type(default)(raw) if not isinstance(default, int) \
                    else int(float(raw))
            except ValueError:
                raise FormatError(
                    f"{path}: bad value for {section}.{key}: {raw!r}") from None
            cfg.values[section][key] = value
    return cfg


def write_config(cfg: PipelineConfig, path) -> None:
    parser = configparser.ConfigParser()
    for section, keys in cfg.values.items():
        parser[section] = {k: repr(v) if isinstance(v, float) else str(v)
                           for k, v in keys.items()}
    with open(path, "w") as fh:
        parser.write(fh)
