"""Pipeline configuration: one INI file with a section per module.

Every key has a typed default below. Unknown sections or keys are errors, so
a typo never silently falls back to a default. Per-class values are given as
a single number (all nucleus classes) or a comma list over neu,epi,lym,pla,eos,con.
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import replace
from pathlib import Path

from . import augment, sampler, synthgen
from .metrics import NUM_CLASSES
from .postprocess import FilterConfig, PostprocessConfig, WatershedConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration file or override."""


THREADS_ENV = "NUCPAN_THREADS"

_PER_CLASS = object()   # marker type for per-class float lists
_FLOAT_LIST = object()  # marker type for plain float lists

_AUG = augment.AugmentConfig.default()
_TRAIN = TrainConfig()
_SCENE = synthgen.SceneConfig()
_WS = WatershedConfig.uniform()
_FLT = FilterConfig.uniform()

DEFAULTS: dict[str, dict[str, tuple]] = {
    "run": {
        "threads": (int, 1),
    },
    "synth": {
        "n_tiles": (int, 20),
        "size": (int, 128),
        "density": (float, _SCENE.density),
        "min_gap": (int, _SCENE.min_gap),
        "notch_prob": (float, _SCENE.notch_prob),
        "instance_jitter": (float, _SCENE.instance_jitter),
        "pixel_noise": (float, _SCENE.pixel_noise),
        "seed": (int, 0),
    },
    "targets": {
        "boundary_width": (int, _TRAIN.boundary_width),
    },
    "sampler": {
        "rng": (str, sampler.RNG_ALGORITHM),
        "importance_sampling": (bool, _TRAIN.importance_sampling),
        "epoch_size": (int, 0),               # 0: dataset size
    },
    "loss": {
        "loss_weighting": (bool, _TRAIN.loss_weighting),
        "ema_decay": (float, _TRAIN.ema_decay),
        "rho": (float, _TRAIN.rho),
        "label_smoothing": (float, _TRAIN.label_smoothing),
        "focal_gamma": (float, _TRAIN.focal_gamma),
        "sem_weight": (float, _TRAIN.sem_loss_weight),
        "inst_weight": (float, _TRAIN.inst_loss_weight),
        "vector_weight": (float, _TRAIN.vector_loss_weight),
    },
    "augment": {
        "hed_contrast": (float, _AUG.hed_contrast),
        "rgb_brightness": (float, _AUG.rgb_brightness),
        "rgb_contrast": (float, _AUG.rgb_contrast),
        "blur_prob": (float, _AUG.blur_prob),
        "blur_sigma_max": (float, _AUG.blur_sigma_max),
        "noise_std": (float, _AUG.noise_std),
        "dihedral": (bool, _AUG.dihedral),
        "max_translate": (int, _AUG.max_translate),
    },
    "model": {
        "width": (int, _TRAIN.width),
        "dropout": (float, _TRAIN.dropout),
    },
    "train": {
        "steps": (int, _TRAIN.steps),
        "batch_size": (int, _TRAIN.batch_size),
        "lr_base": (float, _TRAIN.lr_base),
        "lr_min": (float, _TRAIN.lr_min),
        "weight_decay": (float, _TRAIN.weight_decay),
        "val_fraction": (float, 0.2),
        "val_every": (int, _TRAIN.val_every),
        "seed": (int, 0),
    },
    "tta": {
        "passes": (int, 16),
        "hed_range": (float, 0.1),
        "mc_dropout": (bool, True),
        "seed": (int, 0),
    },
    "postprocess": {
        "seed_threshold": (_PER_CLASS, _WS.seed[1:]),
        "fg_threshold": (_PER_CLASS, _WS.fg[1:]),
        "min_seed_area": (int, _WS.min_seed_area),
        "keep_unseeded": (bool, _WS.keep_unseeded),
        "min_area": (_PER_CLASS, _FLT.min_area[1:]),
        "max_area": (_PER_CLASS, _FLT.max_area[1:]),
        "min_solidity": (_PER_CLASS, _FLT.min_solidity[1:]),
        "split_cc": (bool, True),
        "size_filter": (bool, True),
        "solidity_filter": (bool, True),
        "fill_holes": (bool, True),
    },
    "tune": {
        "objective": (str, "mpq"),
        "per_class": (bool, True),
        "rounds": (int, 1),
        "seed_threshold": (_FLOAT_LIST, (0.5, 0.6, 0.7, 0.8)),
        "fg_threshold": (_FLOAT_LIST, (0.3, 0.4, 0.5)),
        "min_area": (_FLOAT_LIST, (5.0, 10.0, 20.0)),
        "min_solidity": (_FLOAT_LIST, (0.7, 0.8, 0.9)),
    },
    "eval": {
        "crop": (int, 0),                     # 0: whole tile
    },
}

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _parse(kind, text: str, where: str):
    text = text.strip()
    try:
        if kind is bool:
            return _BOOL[text.lower()]
        if kind is _PER_CLASS or kind is _FLOAT_LIST:
            vals = tuple(float(v) for v in text.split(",") if v.strip())
            if kind is _PER_CLASS:
                if len(vals) == 1:
                    vals = vals * (NUM_CLASSES - 1)
                if len(vals) != NUM_CLASSES - 1:
                    raise ValueError(f"expected 1 or {NUM_CLASSES - 1} values")
            if not vals:
                raise ValueError("empty list")
            return vals
        return kind(text)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} ({exc})") from None


def _format(kind, value) -> str:
    if kind is bool:
        return "true" if value else "false"
    if kind is _PER_CLASS or kind is _FLOAT_LIST:
        return ", ".join(repr(float(v)) for v in value)
    if kind is float:
        return repr(float(value))
    return str(value)


class PipelineConfig:
    """Resolved values, ``cfg["section"]["key"]``."""

    def __init__(self, values: dict[str, dict]):
        self.values = values

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def load(cls, path: str | Path | None = None, overrides=()) -> "PipelineConfig":
        """Defaults, then the file (if any), then ``section.key=value`` overrides."""
        values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in DEFAULTS.items()}
        env = os.environ.get(THREADS_ENV)
        if env:
            values["run"]["threads"] = _parse(int, env, THREADS_ENV)
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
            text = Path(path).read_text()
            try:
                parser.read_string(text, source=str(path))
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from None
            for section in parser.sections():
                for key, raw in parser.items(section):
                    cls._set(values, section, key, raw, f"{path} [{section}] {key}")
        for ov in overrides:
            name, sep, raw = ov.partition("=")
            section, dot, key = name.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {ov!r} is not of the form section.key=value")
            cls._set(values, section, key, raw, f"override {name.strip()}")
        out = cls(values)
        out.check()
        return out

    @staticmethod
    def _set(values, section, key, raw, where):
        if section not in DEFAULTS:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        values[section][key] = _parse(DEFAULTS[section][key][0], raw, where)

    def check(self) -> None:
        if self["sampler"]["rng"] != sampler.RNG_ALGORITHM:
            raise ConfigError(f"[sampler] rng: only {sampler.RNG_ALGORITHM} is available")
        if self["tune"]["objective"] not in ("mpq", "r2"):
            raise ConfigError("[tune] objective must be mpq or r2")
        if self["run"]["threads"] < 1:
            raise ConfigError("[run] threads must be >= 1")
        if not 0 <= self["model"]["dropout"] < 1:
            raise ConfigError("[model] dropout must lie in [0, 1)")
        try:
            self.postprocess()
        except ValueError as exc:
            raise ConfigError(f"[postprocess] {exc}") from None

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in DEFAULTS.items():
            parser[section] = {k: _format(kind, self.values[section][k])
                               for k, (kind, _) in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def echo(self, out_dir: str | Path) -> None:
        """Write the resolved config next to the artifacts it produced."""
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.ini").write_text(self.to_ini())

    # builders for module configs

    def scene(self) -> synthgen.SceneConfig:
        s = self["synth"]
        return synthgen.SceneConfig(size=s["size"], density=s["density"], min_gap=s["min_gap"],
                                    notch_prob=s["notch_prob"],
                                    instance_jitter=s["instance_jitter"],
                                    pixel_noise=s["pixel_noise"], seed=s["seed"])

    def train(self) -> TrainConfig:
        a, l, t = self["augment"], self["loss"], self["train"]
        aug = augment.AugmentConfig(**a)
        return replace(
            TrainConfig(), steps=t["steps"], batch_size=t["batch_size"], lr_base=t["lr_base"],
            lr_min=t["lr_min"], weight_decay=t["weight_decay"], val_every=t["val_every"],
            seed=t["seed"], importance_sampling=self["sampler"]["importance_sampling"],
            epoch_size=self["sampler"]["epoch_size"] or None,
            loss_weighting=l["loss_weighting"], ema_decay=l["ema_decay"], rho=l["rho"],
            label_smoothing=l["label_smoothing"], focal_gamma=l["focal_gamma"],
            sem_loss_weight=l["sem_weight"], inst_loss_weight=l["inst_weight"],
            vector_loss_weight=l["vector_weight"],
            boundary_width=self["targets"]["boundary_width"],
            width=self["model"]["width"], dropout=self["model"]["dropout"], augment=aug)

    def tta_plan(self, n_models: int = 1) -> augment.TTAPlan:
        t = self["tta"]
        if t["passes"] <= 1:
            return augment.identity_plan(1)
        return augment.make_tta_plan(t["passes"], t["seed"], t["hed_range"], n_models,
                                     t["mc_dropout"])

    def postprocess(self) -> PostprocessConfig:
        p = self["postprocess"]

        def full(vals, pad):
            return (pad,) + tuple(vals)

        ws = WatershedConfig(full(p["seed_threshold"], 0.6), full(p["fg_threshold"], 0.5),
                             p["min_seed_area"], p["keep_unseeded"])
        flt = FilterConfig(full(p["min_area"], 10.0), full(p["max_area"], 1000.0),
                           full(p["min_solidity"], 0.8))
        return PostprocessConfig(ws, flt, p["split_cc"], p["size_filter"],
                                 p["solidity_filter"], p["fill_holes"])

    def tune_grid(self) -> dict:
        t = self["tune"]
        return {k: t[k] for k in ("seed_threshold", "fg_threshold", "min_area", "min_solidity")}


def postprocess_section(cfg: PostprocessConfig) -> str:
    """``[postprocess]`` INI text for a tuned config (background slot dropped)."""
    ws, f = cfg.watershed, cfg.filters
    vals = {"seed_threshold": ws.seed[1:], "fg_threshold": ws.fg[1:],
            "min_seed_area": ws.min_seed_area, "keep_unseeded": ws.keep_unseeded,
            "min_area": f.min_area[1:],
            "max_area": f.max_area[1:], "min_solidity": f.min_solidity[1:],
            "split_cc": cfg.split_cc, "size_filter": cfg.size_filter,
            "solidity_filter": cfg.solidity_filter, "fill_holes": cfg.fill_holes}
    lines = ["[postprocess]"]
    for k, v in vals.items():
        lines.append(f"{k} = {_format(DEFAULTS['postprocess'][k][0], v)}")
    return "\n".join(lines) + "\n"
