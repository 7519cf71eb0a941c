"""Experiment configuration: a sectioned INI file with a fixed schema.

Sections and keys are listed in :data:`SCHEMA`; anything else is rejected so
a typo never silently falls back to a default. The only environment override
is ``DFA_ENGINE_SEED``; an explicit ``--seed`` on the command line wins over it.
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

TASKS = ("blobs", "sbm", "cora", "char_lm")
MODES = ("bp", "dfa", "shallow")
GRANULARITY_NAMES = {"per_layer": "per_layer", "macro": "macro_block", "micro": "micro_sublayer"}
SEED_ENV = "DFA_ENGINE_SEED"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending ``[section] key``."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",")) if text else ()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


PARSERS = {bool: _parse_bool, int: int, float: float, str: str, tuple: _parse_ints}

# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "experiment": {
        "name": (str, "experiment"),
        "task": (str, "blobs"),
        "mode": (str, "bp"),
        "epochs": (int, 10),
        "seed": (int, 0),
        "output_dir": (str, "runs/experiment"),
        "batch_size": (int, 32),
        "workers": (int, 1),
        "eval_test": (bool, True),
        "record_wall_time": (bool, False),
        "align_every": (int, 1),
    },
    "data": {
        "path": (str, ""),
        "n_per_class": (int, 100),
        "n_classes": (int, 3),
        "dim": (int, 8),
        "spread": (float, 0.5),
        "separation": (float, 1.0),
        "n_per_community": (int, 100),
        "k_communities": (int, 4),
        "p_in": (float, 0.1),
        "p_out": (float, 0.01),
        "feature_noise": (float, 1.0),
        "feature_dim": (int, 0),
        "train_per_class": (int, 20),
        "chunk_length": (int, 128),
        "batch_chunks": (int, 64),
        "max_chars": (int, 0),
        "max_train_chunks": (int, 0),
        "max_eval_chunks": (int, 0),
    },
    "architecture": {
        "hidden": (tuple, (64,)),
        "activation": (str, "relu"),
        "d_model": (int, 128),
        "n_heads": (int, 4),
        "d_ff": (int, 512),
        "n_blocks": (int, 2),
        "block_norm": (str, "pre"),
        "causal": (bool, True),
    },
    "feedback": {
        "granularity": (str, "per_layer"),
        "scale_rule": (str, "target"),
        "shared_master": (bool, False),
    },
    "optimizer": {
        "kind": (str, "adam"),
        "lr": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "weight_decay": (float, 0.0),
        "dropout": (float, 0.0),
        "input_dropout": (float, 0.0),
        "attn_dropout": (float, 0.0),
    },
    "scheduler": {
        "kind": (str, "none"),
        "factor": (float, 0.2),
        "patience": (int, 1),
    },
}


@dataclass
class ExperimentConfig:
    """Parsed configuration, one dict per section, every key present."""

    sections: dict[str, dict] = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()}
                                                               for s, keys in SCHEMA.items()})

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    @property
    def experiment(self) -> dict:
        return self.sections["experiment"]

    @property
    def task(self) -> str:
        return self.experiment["task"]

    @property
    def mode(self) -> str:
        return self.experiment["mode"]

    @property
    def seed(self) -> int:
        return self.experiment["seed"]

    @property
    def granularity(self) -> str:
        """Internal granularity name (per_layer, macro_block or micro_sublayer)."""
        return GRANULARITY_NAMES[self.sections["feedback"]["granularity"]]

    def replace(self, section: str, **values) -> "ExperimentConfig":
        copy = ExperimentConfig({s: dict(v) for s, v in self.sections.items()})
        for k, v in values.items():
            if k not in SCHEMA[section]:
                raise ConfigError(f"[{section}] {k}: unknown key")
            copy.sections[section][k] = v
        copy.validate()
        return copy

    def validate(self) -> None:
        e, a, fb, opt, sch, d = (self.sections[s] for s in
                                 ("experiment", "architecture", "feedback", "optimizer", "scheduler", "data"))
        _choice("experiment", "task", e["task"], TASKS)
        _choice("experiment", "mode", e["mode"], MODES)
        _choice("feedback", "granularity", fb["granularity"], tuple(GRANULARITY_NAMES))
        _choice("feedback", "scale_rule", fb["scale_rule"], ("target", "output"))
        _choice("optimizer", "kind", opt["kind"], ("sgd", "adam"))
        _choice("scheduler", "kind", sch["kind"], ("none", "plateau"))
        _choice("architecture", "block_norm", a["block_norm"], ("pre", "post"))
        _choice("architecture", "activation", a["activation"], ("relu", "tanh", "elu", "identity"))
        if fb["granularity"] in ("macro", "micro") and e["task"] != "char_lm":
            raise ConfigError(f"[feedback] granularity: {fb['granularity']!r} is only valid for task char_lm")
        if e["task"] == "char_lm" and fb["granularity"] == "per_layer" and e["mode"] == "dfa":
            raise ConfigError("[feedback] granularity: char_lm with DFA needs 'macro' or 'micro'")
        _positive("experiment", "batch_size", e["batch_size"])
        _positive("experiment", "workers", e["workers"])
        _positive("experiment", "align_every", e["align_every"])
        if e["epochs"] < 0:
            raise ConfigError(f"[experiment] epochs: must be >= 0, got {e['epochs']}")
        if not 0 <= e["seed"] < 2**64:
            raise ConfigError(f"[experiment] seed: must lie in [0, 2**64), got {e['seed']}")
        if opt["lr"] <= 0:
            raise ConfigError(f"[optimizer] lr: must be positive, got {opt['lr']}")
        for key in ("beta1", "beta2"):
            if not 0 <= opt[key] < 1:
                raise ConfigError(f"[optimizer] {key}: must lie in [0, 1), got {opt[key]}")
        for key in ("dropout", "input_dropout", "attn_dropout"):
            if not 0 <= opt[key] < 1:
                raise ConfigError(f"[optimizer] {key}: must lie in [0, 1), got {opt[key]}")
        if opt["weight_decay"] < 0:
            raise ConfigError(f"[optimizer] weight_decay: must be >= 0, got {opt['weight_decay']}")
        if not 0 < sch["factor"] < 1:
            raise ConfigError(f"[scheduler] factor: must lie in (0, 1), got {sch['factor']}")
        _positive("scheduler", "patience", sch["patience"])
        if e["task"] in ("blobs", "sbm", "cora") and any(h <= 0 for h in a["hidden"]):
            raise ConfigError(f"[architecture] hidden: widths must be positive, got {a['hidden']}")
        if e["task"] == "char_lm":
            for key in ("d_model", "n_heads", "d_ff", "n_blocks"):
                _positive("architecture", key, a[key])
            if a["d_model"] % a["n_heads"]:
                raise ConfigError(f"[architecture] n_heads: {a['n_heads']} does not divide d_model {a['d_model']}")
        if e["task"] in ("cora", "char_lm") and not d["path"]:
            raise ConfigError(f"[data] path: required for task {e['task']}")

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for s, keys in SCHEMA.items():
            cp[s] = {k: _fmt(self.sections[s][k]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in keys.items()}
                for s, keys in self.sections.items()}


def _choice(section, key, value, allowed):
    if value not in allowed:
        raise ConfigError(f"[{section}] {key}: must be one of {list(allowed)}, got {value!r}")


def _positive(section, key, value):
    if value <= 0:
        raise ConfigError(f"[{section}] {key}: must be positive, got {value}")


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = ExperimentConfig()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"[{section}]: unknown section (expected one of {list(SCHEMA)})")
        for key, raw in cp[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"[{section}] {key}: unknown key")
            typ = SCHEMA[section][key][0]
            try:
                cfg.sections[section][key] = PARSERS[typ](raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__} ({exc})") from exc
    cfg.validate()
    return cfg


def preset_names() -> list[str]:
    root = resources.files("dfa_engine") / "presets"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def read_config_text(ref: str) -> tuple[str, str]:
    """Return (text, source) for a config path or a shipped preset name."""
    path = Path(ref)
    if path.is_file():
        return path.read_text(), str(path)
    name = ref[:-4] if ref.endswith(".cfg") else ref
    preset = resources.files("dfa_engine") / "presets" / f"{name}.cfg"
    if preset.is_file():
        return preset.read_text(), f"preset:{name}"
    raise ConfigError(f"config {ref!r} is neither a file nor a preset (presets: {', '.join(preset_names())})")


def load_config(ref: str, seed: int | None = None) -> tuple[ExperimentConfig, str]:
    """Parse a config and apply the seed overrides. Returns (config, original text)."""
    text, source = read_config_text(ref)
    cfg = parse_config(text, source)
    override = seed
    if override is None and os.environ.get(SEED_ENV):
        try:
            override = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}: not an integer: {os.environ[SEED_ENV]!r}") from exc
    if override is not None:
        cfg = cfg.replace("experiment", seed=override)
    return cfg, text
