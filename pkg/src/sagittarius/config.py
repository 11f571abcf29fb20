"""Experiment configuration files.

INI-style documents read with :mod:`configparser`. Every key is optional;
defaults reproduce the reference setup (64-dim embeddings, 2 layers, 10
negatives, Adam at 0.01, unit loss weights)::

    [data]
    path = ml-100k/u.data          ; relative to the config file, ~ expanded
    format = movielens_tab         ; or generic_csv
    split = 0.7, 0.1, 0.2
    split_seed = 0

    [behaviors]                    ; label = score; empty -> rating levels
    click = 1.0
    share = 4.0

    [model]
    embed_dim = 64
    final_dim = 64
    n_layers = 2
    max_seq_len = 50
    seq_targets = prefixes         ; or last

    [training]
    lambda1 = 1.0
    lambda2 = 1.0
    lambda3 = 1.0
    n_negatives = 10
    learning_rate = 0.01
    epochs = 200
    batch_size = 0                 ; quadruples per Adam step, 0 = full batch
    patience = 10
    seed = 0

    [eval]
    k = 10, 20

    [ablation]
    disable_bpr = false
    disable_ctr = false
    disable_seq = false
    disable_behavior_weighting = false

    [output]
    dir = runs/default
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace

from sagittarius.data import FORMATS, BehaviorScoreMap
from sagittarius.model import Hyperparams


class ConfigError(ValueError):
    pass


MODEL_KEYS = ("embed_dim", "final_dim", "n_layers", "max_seq_len", "seq_targets")
TRAINING_KEYS = (
    "lambda1", "lambda2", "lambda3", "n_negatives", "learning_rate", "epochs", "batch_size", "patience", "seed",
)
ABLATION_KEYS = ("disable_bpr", "disable_ctr", "disable_seq", "disable_behavior_weighting")


@dataclass
class ExperimentConfig:
    data_path: str = ""
    data_format: str = "movielens_tab"
    behaviors: dict[str, float] = field(default_factory=dict)
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    k_list: tuple[int, ...] = (10,)
    disable_bpr: bool = False
    disable_ctr: bool = False
    disable_seq: bool = False
    disable_behavior_weighting: bool = False
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.data_format not in FORMATS:
            raise ConfigError(f"data.format must be one of {FORMATS}, got {self.data_format!r}")
        if self.disable_bpr and self.disable_ctr and self.disable_seq:
            raise ConfigError("ablation flags cannot disable all three losses")
        if not self.k_list or any(k < 1 for k in self.k_list):
            raise ConfigError("eval.k values must be >= 1")
        if not self.output_dir:
            raise ConfigError("output.dir must be non-empty")

    def score_map(self) -> BehaviorScoreMap:
        return BehaviorScoreMap(self.behaviors) if self.behaviors else BehaviorScoreMap.rating_levels()

    def effective_hyper(self) -> Hyperparams:
        """Hyperparameters with ablation flags applied to the loss weights."""
        h = self.hyper
        return h.replace(
            lambda1=0.0 if self.disable_bpr else h.lambda1,
            lambda2=0.0 if self.disable_ctr else h.lambda2,
            lambda3=0.0 if self.disable_seq else h.lambda3,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.replace(";", ",").split(",") if x.strip())


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # behavior labels are case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    known = {"data", "behaviors", "model", "training", "eval", "ablation", "output"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")

    kw: dict = {}
    hyper_kw: dict = {}
    try:
        if cp.has_section("data"):
            d = cp["data"]
            if "path" in d:
                path = os.path.expanduser(d["path"])
                kw["data_path"] = path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))
            if "format" in d:
                kw["data_format"] = d["format"]
            if "split" in d:
                kw["split"] = _floats(d["split"])
            if "split_seed" in d:
                kw["split_seed"] = d.getint("split_seed")
        if cp.has_section("behaviors"):
            kw["behaviors"] = {label: float(v) for label, v in cp["behaviors"].items()}
        hyper_fields = {f.name: f.type for f in fields(Hyperparams)}
        for section, keys in (("model", MODEL_KEYS), ("training", TRAINING_KEYS)):
            if not cp.has_section(section):
                continue
            for key, raw in cp[section].items():
                if key not in keys:
                    raise ConfigError(f"unknown key {section}.{key}")
                kind = hyper_fields[key]
                hyper_kw[key] = raw.strip() if kind == "str" else float(raw) if kind == "float" else int(raw)
        if cp.has_section("eval") and "k" in cp["eval"]:
            kw["k_list"] = tuple(int(k) for k in _floats(cp["eval"]["k"]))
        if cp.has_section("ablation"):
            for key in cp["ablation"]:
                if key not in ABLATION_KEYS:
                    raise ConfigError(f"unknown key ablation.{key}")
                kw[key] = cp["ablation"].getboolean(key)
        if cp.has_section("output") and "dir" in cp["output"]:
            out = os.path.expanduser(cp["output"]["dir"])
            kw["output_dir"] = out if os.path.isabs(out) else os.path.normpath(os.path.join(base_dir, out))
        kw["hyper"] = Hyperparams(**hyper_kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(**kw)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


def dump_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config; parsing it back reproduces ``cfg``."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    h = cfg.hyper
    cp["data"] = {
        "path": os.path.abspath(cfg.data_path) if cfg.data_path else "",
        "format": cfg.data_format,
        "split": ", ".join(repr(float(x)) for x in cfg.split),
        "split_seed": str(cfg.split_seed),
    }
    cp["behaviors"] = {label: repr(score) for label, score in cfg.behaviors.items()}
    cp["model"] = {key: str(getattr(h, key)) for key in MODEL_KEYS}
    cp["training"] = {key: repr(getattr(h, key)) for key in TRAINING_KEYS}
    cp["eval"] = {"k": ", ".join(str(k) for k in cfg.k_list)}
    cp["ablation"] = {key: str(getattr(cfg, key)).lower() for key in ABLATION_KEYS}
    cp["output"] = {"dir": os.path.abspath(cfg.output_dir)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
