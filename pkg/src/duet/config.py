"""Run configuration: flat ``key = value`` text with sections, a typed key
registry that rejects unknown keys, and a canonical resolved dump embedded in
every run's outputs so any behavior difference is traceable to config or seed.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass

import numpy as np

from .codec import CodecSpec, Corpus, build_codec, sample_corpus
from .evaluation import GenSettings
from .model import BackboneConfig
from .training import StageConfig

OUT_ROOT_ENV = "DUET_OUT_ROOT"

# section -> key -> (python type, default). bool parses from 0/1/true/false.
REGISTRY: dict[str, dict[str, tuple[type, object]]] = {
    "model": {
        "width": (int, 64),
        "layers": (int, 4),
        "heads": (int, 4),
        "frame_dim": (int, 8),
        "speaker_dim": (int, 8),
        "cond_dim": (int, 64),
        "max_len": (int, 256),
        "vocab": (int, 32),
        "head_layers": (int, 6),
        "head_width": (int, 64),
    },
    "codec": {
        "seed": (int, 7),
        "vocab": (int, 32),
        "frame_dim": (int, 8),
        "frames_per_phoneme": (int, 4),
        "gamma": (float, 0.3),
        "sigma_obs": (float, 0.05),
    },
    "corpus": {
        "seed": (int, 11),
        "n_train": (int, 32),
        "n_val": (int, 8),
        "len_min": (int, 4),
        "len_max": (int, 12),
        "n_speakers": (int, 6),
        "n_val_speakers": (int, 3),
    },
    "schedule": {
        "T": (int, 1000),
        "s": (float, 0.008),
    },
    "train": {
        "stage": (int, 1),
        "steps": (int, 8500),
        "batch_size": (int, 8),
        "p_mask": (float, 0.3),
        "p_uncond": (float, 0.0),
        "lr_start": (float, 3e-5),
        "lr_peak": (float, 3e-4),
        "lr_warmup": (int, 200),
        "lr_const": (float, 2e-4),
        "eval_every": (int, 2000),
        "patience": (int, 6),
        "eval_steps": (int, 25),
        "val_cap": (int, 4),
        "init_from": (str, ""),
        "dtype": (str, "float32"),
    },
    "infer": {
        "temperature": (float, 0.9),
        "steps": (int, 100),
        "guidance": (float, 1.0),
        "max_frames": (int, 0),
        "criterion": (str, "eos"),
    },
    "seeds": {
        "init": (int, 1),
        "train": (int, 2),
        "eval": (int, 3),
        "generate": (int, 4),
    },
    "paths": {
        "out_root": (str, ""),
        "run_name": (str, "run"),
    },
}


class ConfigError(ValueError):
    """One or more invalid config entries; message lists every problem."""


def _parse_value(raw: str, typ: type, where: str, errors: list[str]):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        errors.append(f"{where}: cannot parse {raw!r} as {typ.__name__}")
        return None


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def dump(self) -> str:
        """Canonical resolved text: every key explicit, registry order."""
        out = io.StringIO()
        for section in REGISTRY:
            out.write(f"[{section}]\n")
            for key in REGISTRY[section]:
                out.write(f"{key} = {self.values[section][key]}\n")
            out.write("\n")
        return out.getvalue()

    def out_root(self) -> str:
        root = str(self.values["paths"]["out_root"])
        if not root:
            root = os.environ.get(OUT_ROOT_ENV, "") or "runs"
        return root

    def build_codec(self) -> CodecSpec:
        c = self.values["codec"]
        return build_codec(seed=int(c["seed"]), V=int(c["vocab"]), d=int(c["frame_dim"]),
                           K=int(c["frames_per_phoneme"]), gamma=float(c["gamma"]),
                           sigma_obs=float(c["sigma_obs"]))

    def build_corpus(self, codec: CodecSpec | None = None) -> Corpus:
        codec = codec or self.build_codec()
        c = self.values["corpus"]
        return sample_corpus(codec, n_train=int(c["n_train"]), n_val=int(c["n_val"]),
                             length_range=(int(c["len_min"]), int(c["len_max"])),
                             n_speakers=int(c["n_speakers"]),
                             n_val_speakers=int(c["n_val_speakers"]), seed=int(c["seed"]))

    def model_config(self) -> BackboneConfig:
        m = self.values["model"]
        return BackboneConfig(width=int(m["width"]), layers=int(m["layers"]),
                              heads=int(m["heads"]), frame_dim=int(m["frame_dim"]),
                              speaker_dim=int(m["speaker_dim"]), cond_dim=int(m["cond_dim"]),
                              max_len=int(m["max_len"]), vocab=int(m["vocab"]),
                              head_layers=int(m["head_layers"]), head_width=int(m["head_width"]))

    def gen_settings(self) -> GenSettings:
        i = self.values["infer"]
        return GenSettings(temperature=float(i["temperature"]), guidance=float(i["guidance"]),
                           max_frames=int(i["max_frames"]), criterion=str(i["criterion"]))

    def stage_config(self) -> StageConfig:
        t = self.values["train"]
        return StageConfig(stage=int(t["stage"]), steps=int(t["steps"]),
                           batch_size=int(t["batch_size"]), p_mask=float(t["p_mask"]),
                           p_uncond=float(t["p_uncond"]), lr_start=float(t["lr_start"]),
                           lr_peak=float(t["lr_peak"]), lr_warmup=int(t["lr_warmup"]),
                           lr_const=float(t["lr_const"]), eval_every=int(t["eval_every"]),
                           patience=int(t["patience"]),
                           schedule_T=int(self.values["schedule"]["T"]),
                           eval_steps=int(t["eval_steps"]), val_cap=int(t["val_cap"]),
                           eval_settings=self.gen_settings())

    def dtype(self):
        return np.float64 if self.values["train"]["dtype"] == "float64" else np.float32


def _cross_checks(values: dict[str, dict[str, object]], errors: list[str]) -> None:
    m, c = values["model"], values["codec"]
    if m["frame_dim"] != c["frame_dim"]:
        errors.append(f"model.frame_dim {m['frame_dim']} != codec.frame_dim {c['frame_dim']}")
    if m["speaker_dim"] != c["frame_dim"]:
        errors.append(
            f"model.speaker_dim {m['speaker_dim']} must equal codec.frame_dim "
            f"{c['frame_dim']}: speaker vectors live in frame space"
        )
    if m["vocab"] != c["vocab"]:
        errors.append(f"model.vocab {m['vocab']} != codec.vocab {c['vocab']}")
    if values["train"]["stage"] == 2 and not values["train"]["init_from"]:
        errors.append("train.stage = 2 requires train.init_from (a stage-1 checkpoint)")
    if values["train"]["dtype"] not in ("float32", "float64"):
        errors.append(f"train.dtype must be float32 or float64, got {values['train']['dtype']!r}")
    if values["infer"]["criterion"] not in ("eos", "oracle_endpoint", "oracle_duration"):
        errors.append(
            "infer.criterion must be eos, oracle_endpoint, or oracle_duration, "
            f"got {values['infer']['criterion']!r}"
        )
    if values["corpus"]["len_min"] < 1 or values["corpus"]["len_min"] > values["corpus"]["len_max"]:
        errors.append("corpus length range invalid: need 1 <= len_min <= len_max")


def load_config(text: str | None = None, path: str | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    """Parse, apply defaults, validate. Every error is collected and reported
    in one exception. ``overrides`` entries look like "section.key=value"."""
    if (text is None) == (path is None):
        raise ValueError("pass exactly one of text or path")
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case: schedule.T must survive a reload
    errors: list[str] = []
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from None

    values = {s: dict((k, d) for k, (t, d) in keys.items()) for s, keys in REGISTRY.items()}
    for section in parser.sections():
        if section not in REGISTRY:
            errors.append(f"unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            if key not in REGISTRY[section]:
                errors.append(f"unknown key {section}.{key}")
                continue
            typ = REGISTRY[section][key][0]
            val = _parse_value(raw, typ, f"{section}.{key}", errors)
            if val is not None:
                values[section][key] = val

    for ov in overrides or []:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            errors.append(f"override {ov!r} is not section.key=value")
            continue
        dotted, raw = ov.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        if section not in REGISTRY or key not in REGISTRY[section]:
            errors.append(f"unknown override key {section}.{key}")
            continue
        typ = REGISTRY[section][key][0]
        val = _parse_value(raw, typ, f"override {section}.{key}", errors)
        if val is not None:
            values[section][key] = val

    if not errors:
        _cross_checks(values, errors)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return RunConfig(values=values)


def default_config() -> RunConfig:
    return load_config(text="")
