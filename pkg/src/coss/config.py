"""Run-configuration loading, dotted overrides, and resolution.

A run config is one JSON object with sections: seed, paradigm, stages[],
model, optimizer, rehearsal, data. Any missing field falls back to the desk
defaults below, so `{}` is a complete config. Overrides use dotted keys
("optimizer.peak_lr=3e-4"); `scheduler.seed` is accepted as an alias for the
top-level seed.
"""

from __future__ import annotations

import copy
import json

from .data import DEFAULT_SLOTS
from .errors import ConfigError
from .model import ModelConfig
from .optim import AdamWConfig
from .rehearsal import SamplingConfig
from .scheduler import StagePlan, StageSpec, TrainerConfig
from .tokenizers import TokenizerConfig

DEFAULT_CONFIG = {
    "seed": 0,
    "paradigm": "medcoss",
    "stages": [{"slot": slot, "epochs": 30} for slot in DEFAULT_SLOTS],
    "model": {
        "embed_dim": 64,
        "depth": 4,
        "heads": 4,
        "mlp_ratio": 4.0,
        "decoder_dim": 32,
        "decoder_depth": 2,
        "decoder_heads": 4,
        "vocab_size": 512,
    },
    "optimizer": {
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 0.05,
        "peak_lr": 1.5e-4,
        "warmup_epochs": 4,
        "batch_size": 32,
    },
    "rehearsal": {
        "cluster_fraction": 0.01,
        "per_cluster": 5,
        "max_iter": 100,
        "tol": 1e-4,
        "imm": True,
        "replay_loss": "fd",
        "buffer_sampling": "kmeans",
        "use_buffer": True,
        "er_ratio": 0.05,
    },
    "data": {
        "root": "corpus",
        "text_len": 112,
        "image_size": [224, 224],
        "volume_size": [16, 192, 192],
        "patch2d": [16, 16],
        "patch3d": [16, 16, 16],
        "channels": 1,
        "text_mask_ratio": 0.15,
        "visual_mask_ratio": 0.75,
    },
    "synthetic": {
        "counts": {slot: 50 for slot in DEFAULT_SLOTS},
        "text_states": 60,
        "text_words": [8, 40],
        "n_classes": 3,
        "noise_sigma": 0.05,
        "intensity_offset": 1.5,
    },
    "finetune": {
        "checkpoint": None,
        "vocab": None,
        "task": "mlp2",
        "n_classes": 3,
        "slot": "image2d",
        "epochs": 10,
        "batch_size": 8,
        "lr": 1e-4,
        "splits": [0.6, 0.2, 0.2],
    },
    "evaluate": {
        "checkpoint": None,
        "vocab": None,
    },
    "sample": {
        "checkpoint": None,
        "vocab": None,
        "slot": "text",
    },
}


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return cfg


# Dict-valued settings that are one value, not a section: supplying them
# replaces the default wholesale instead of merging key by key.
_ATOMIC_KEYS = frozenset({"counts", "pos_lengths", "patch_dims"})


def merge_defaults(cfg):
    """Deep-merge cfg over DEFAULT_CONFIG (dicts merge, everything else wins)."""

    def merge(base, over):
        out = copy.deepcopy(base)
        for k, v in over.items():
            if (isinstance(v, dict) and isinstance(out.get(k), dict)
                    and k not in _ATOMIC_KEYS):
                out[k] = merge(out[k], v)
            else:
                out[k] = copy.deepcopy(v)
        return out

    return merge(DEFAULT_CONFIG, cfg)


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg, overrides):
    """Apply "a.b.c=value" strings; values parse as JSON, else raw strings.

    `scheduler.seed` aliases the top-level seed. Intermediate sections must
    already exist; leaves may be created.
    """
    out = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key == "scheduler.seed":
            key = "seed"
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {item!r}: no section {part!r}")
            node = node[part]
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {parts[-2]!r} is not a section")
        node[parts[-1]] = _parse_value(raw)
    return out


def _section(cfg, name, cls_fields):
    sec = cfg.get(name)
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(sec) - set(cls_fields)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return sec


def resolve(cfg):
    """Validate a merged config and build the typed run objects.

    Returns a dict with seed, paradigm, plan, model_cfg, trainer, tok_cfg
    plus the raw merged config under "raw".
    """
    cfg = merge_defaults(cfg)
    seed = cfg.get("seed")
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")

    from .baselines import PARADIGMS
    paradigm = cfg.get("paradigm")
    if paradigm not in PARADIGMS:
        raise ConfigError(f"paradigm must be one of {PARADIGMS}")

    stages_cfg = cfg.get("stages")
    if not isinstance(stages_cfg, list) or not stages_cfg:
        raise ConfigError("stages must be a nonempty list")
    stages = []
    for i, entry in enumerate(stages_cfg):
        if not isinstance(entry, dict) or "slot" not in entry:
            raise ConfigError(f"stages[{i}] needs a slot")
        epochs = entry.get("epochs", 30)
        if not isinstance(epochs, int) or epochs < 0:
            raise ConfigError(f"stages[{i}].epochs must be a non-negative int")
        stages.append(StageSpec(str(entry["slot"]), epochs))

    opt = _section(cfg, "optimizer", ("beta1", "beta2", "eps", "weight_decay",
                                      "peak_lr", "warmup_epochs", "batch_size"))
    data = _section(cfg, "data", ("root", "text_len", "image_size",
                                  "volume_size", "patch2d", "patch3d",
                                  "channels", "text_mask_ratio",
                                  "visual_mask_ratio"))
    reh = _section(cfg, "rehearsal", ("cluster_fraction", "per_cluster",
                                      "max_iter", "tol", "imm", "replay_loss",
                                      "buffer_sampling", "use_buffer",
                                      "er_ratio"))

    try:
        tok_cfg = TokenizerConfig(
            text_len=int(data["text_len"]),
            image_size=tuple(data["image_size"]),
            volume_size=tuple(data["volume_size"]),
            patch2d=tuple(data["patch2d"]),
            patch3d=tuple(data["patch3d"]),
            channels=int(data["channels"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad tokenizer geometry: {exc}") from exc

    try:
        plan = StagePlan(stages,
                         batch_size=int(opt["batch_size"]),
                         warmup_epochs=int(opt["warmup_epochs"]),
                         peak_lr=float(opt["peak_lr"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    model_sec = _section(cfg, "model", ("embed_dim", "depth", "heads",
                                        "mlp_ratio", "decoder_dim",
                                        "decoder_depth", "decoder_heads",
                                        "vocab_size", "pos_lengths",
                                        "patch_dims"))
    pos_lengths = model_sec.get("pos_lengths") or {
        "text": tok_cfg.text_len,
        "image2d": tok_cfg.seq_len("image2d"),
        "volume3d": tok_cfg.seq_len("volume3d"),
    }
    patch_dims = model_sec.get("patch_dims") or {
        "image2d": tok_cfg.patch_dim("image2d"),
        "volume3d": tok_cfg.patch_dim("volume3d"),
    }
    try:
        model_cfg = ModelConfig(
            embed_dim=int(model_sec["embed_dim"]),
            depth=int(model_sec["depth"]),
            heads=int(model_sec["heads"]),
            mlp_ratio=float(model_sec["mlp_ratio"]),
            decoder_dim=int(model_sec["decoder_dim"]),
            decoder_depth=int(model_sec["decoder_depth"]),
            decoder_heads=int(model_sec["decoder_heads"]),
            vocab_size=int(model_sec["vocab_size"]),
            pos_lengths={k: int(v) for k, v in pos_lengths.items()},
            patch_dims={k: int(v) for k, v in patch_dims.items()},
            seed=seed)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad model section: {exc}") from exc

    adamw = AdamWConfig(beta1=float(opt["beta1"]), beta2=float(opt["beta2"]),
                        eps=float(opt["eps"]),
                        weight_decay=float(opt["weight_decay"]))
    sampling = SamplingConfig(cluster_fraction=float(reh["cluster_fraction"]),
                              per_cluster=int(reh["per_cluster"]),
                              max_iter=int(reh["max_iter"]),
                              tol=float(reh["tol"]))
    try:
        trainer = TrainerConfig(
            optimizer=adamw, sampling=sampling, seed=seed,
            use_buffer=bool(reh["use_buffer"]),
            replay_loss=str(reh["replay_loss"]),
            buffer_sampling=str(reh["buffer_sampling"]),
            imm=bool(reh["imm"]),
            text_mask_ratio=float(data["text_mask_ratio"]),
            visual_mask_ratio=float(data["visual_mask_ratio"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    er_ratio = float(reh["er_ratio"])
    if not 0.0 <= er_ratio <= 1.0:
        raise ConfigError("rehearsal.er_ratio must be in [0, 1]")

    return {"seed": seed, "paradigm": paradigm, "plan": plan,
            "model_cfg": model_cfg, "trainer": trainer, "tok_cfg": tok_cfg,
            "data_root": str(data["root"]), "er_ratio": er_ratio,
            "raw": cfg}


def synthetic_spec(cfg):
    """Build the corpus generator settings from a merged config.

    Geometry comes from the data section so generated samples always match
    the tokenizer; counts and texture knobs come from the synthetic section.
    """
    from .data import SyntheticSpec

    cfg = merge_defaults(cfg)
    syn = _section(cfg, "synthetic", ("counts", "text_states", "text_words",
                                      "n_classes", "noise_sigma",
                                      "intensity_offset"))
    data = cfg["data"]
    try:
        return SyntheticSpec(counts=dict(syn["counts"]),
                             image_size=tuple(data["image_size"]),
                             volume_size=tuple(data["volume_size"]),
                             text_states=int(syn["text_states"]),
                             text_words=tuple(syn["text_words"]),
                             n_classes=int(syn["n_classes"]),
                             noise_sigma=float(syn["noise_sigma"]),
                             intensity_offset=float(syn["intensity_offset"]))
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"bad synthetic section: {exc}") from exc


def write_resolved(cfg, path):
    """Persist the fully merged config so the run can be reproduced from it."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
