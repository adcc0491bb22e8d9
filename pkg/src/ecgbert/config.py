"""Pipeline configuration: one JSON document with a section per stage."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .delineation import DelineationParams, DetectorParams, WaveType
from .model import ModelConfig
from .pipeline import StageParams
from .preprocess import FilterSpec
from .signal_io import PIPELINE_FS, WINDOW_SECONDS
from .training import TrainConfig
from .vocabulary import DEFAULT_K, VocabConfig

CONFIG_VERSION = 1


def _defaults() -> dict:
    vocab = asdict(VocabConfig())
    vocab["k"] = {t.value: k for t, k in DEFAULT_K.items()}
    pre = TrainConfig.for_task("mlm").to_dict()
    fine = TrainConfig.for_task("afib").to_dict()
    return {
        "version": CONFIG_VERSION,
        "seed": 0,
        "fs": PIPELINE_FS,
        "window_seconds": WINDOW_SECONDS,
        "filter": asdict(FilterSpec()),
        "detector": asdict(DetectorParams()),
        "delineation": asdict(DelineationParams()),
        "vocab": vocab,
        "sentences": {"max_seq_len": 128, "mask_rate": 0.15, "bert_style_corruption": False},
        "model": ModelConfig().to_dict(),
        "pretrain": pre,
        "finetune": fine,
        "split": {"test_fraction": 0.2, "mode": "inter_patient"},
        "synth": {"n_patients": 8, "windows_per_patient": 10, "snr_db": 20.0, "irregular_fraction": 0.5},
    }


DEFAULTS = json.loads(json.dumps(_defaults()))  # plain JSON types: lists, not tuples


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise KeyError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k != "k":
            if not isinstance(v, dict):
                raise TypeError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where + ".")
        elif k == "k":
            bad = set(v) - {t.value for t in WaveType}
            if bad:
                raise KeyError(f"unknown wave types in {where!r}: {sorted(bad)}")
            out[k] = dict(v)
        else:
            out[k] = v
    return out


def parse_override(item: str) -> dict:
    """``section.key=value`` to a nested dict; values parse as JSON, else stay strings."""
    if "=" not in item:
        raise ValueError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


@dataclass(frozen=True)
class PipelineConfig:
    data: dict

    @classmethod
    def load(cls, text: str | None = None, overrides: list[str] = ()) -> PipelineConfig:
        cfg = copy.deepcopy(DEFAULTS)
        if text:
            obj = json.loads(text)
            if not isinstance(obj, dict):
                raise TypeError("config file must hold a JSON object")
            if obj.get("version", CONFIG_VERSION) != CONFIG_VERSION:
                raise ValueError(f"unsupported config version {obj.get('version')!r}")
            cfg = _merge(cfg, obj)
        for item in overrides:
            cfg = _merge(cfg, parse_override(item))
        out = cls(cfg)
        out.validate()
        return out

    def to_json(self) -> str:
        return json.dumps(self.data, indent=1, sort_keys=True)

    def __getitem__(self, key):
        return self.data[key]

    def validate(self) -> None:
        self.stage_params()
        self.vocab_config()
        m = self.model_config()
        self.train_config("pretrain")
        self.train_config("finetune")
        if m.window_samples != int(self["fs"] * self["window_seconds"]):
            raise ValueError("model.window_samples must equal fs * window_seconds")
        if self["sentences"]["max_seq_len"] > m.max_seq_len:
            raise ValueError("sentences.max_seq_len exceeds model.max_seq_len")
        if self["split"]["mode"] not in ("inter_patient", "within_patient"):
            raise ValueError("split.mode must be inter_patient or within_patient")

    # ---- typed views

    def stage_params(self) -> StageParams:
        d = dict(self["delineation"])
        d["p_search_s"] = tuple(d["p_search_s"])
        det = dict(self["detector"])
        det["band"] = tuple(det["band"])
        return StageParams(FilterSpec(**self["filter"]), DetectorParams(**det), DelineationParams(**d))

    def vocab_config(self, seed: int | None = None) -> VocabConfig:
        v = dict(self["vocab"])
        v["k"] = {WaveType(t): int(k) for t, k in v["k"].items()}
        if seed is not None:
            v["seed"] = seed
        return VocabConfig(**v)

    def model_config(self, seed: int | None = None) -> ModelConfig:
        m = dict(self["model"])
        if seed is not None:
            m["init_seed"] = seed
        return ModelConfig.from_dict(m)

    def train_config(self, section: str, seed: int | None = None, **overrides) -> TrainConfig:
        t = {**self[section], **overrides}
        if seed is not None:
            t["seed"] = seed
        names = {f.name for f in fields(TrainConfig)}
        unknown = set(t) - names
        if unknown:
            raise KeyError(f"unknown {section} keys {sorted(unknown)}")
        return TrainConfig(**t)


STAGES = ("synth", "vocab", "sentences", "model", "pretrain", "finetune", "split", "mask")


def stage_seed(master: int, stage: str) -> int:
    """Independent per-stage seed derived from the master seed."""
    return int(np.random.SeedSequence([int(master), STAGES.index(stage)]).generate_state(1)[0])
