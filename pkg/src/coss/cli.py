"""Command line entry point.

Verbs: gen-data, pretrain, finetune, evaluate, sample-buffer, inspect-ckpt.
Config-driven verbs take --config/--override/--out/--seed and write the
fully resolved config to OUT/config.json before doing any work, so a result
directory can always be reproduced from what it contains.

Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure
(I/O, bad checkpoint, non-finite loss).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from . import config as cfgmod
from .errors import ConfigError, CossError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of calling sys.exit."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _build_parser():
    parser = _Parser(
        prog="coss",
        description="Continual masked-modeling pre-training over mixed "
                    "1D/2D/3D data, plus fine-tuning and evaluation.",
        epilog="Set COSS_THREADS to cap worker threads and COSS_NUMBA=0 "
               "to force the pure-numpy kernel path.")
    sub = parser.add_subparsers(dest="verb", metavar="VERB")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON run config; missing fields use defaults")
    common.add_argument("--override", action="append", default=[],
                        metavar="K=V", help="dotted config override, repeatable")
    common.add_argument("--out", metavar="DIR", required=True,
                        help="output directory (created if needed)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="master seed (overrides config)")

    sub.add_parser("gen-data", parents=[common],
                   help="generate a synthetic corpus into OUT")
    sub.add_parser("pretrain", parents=[common],
                   help="run the configured pre-training paradigm")
    sub.add_parser("finetune", parents=[common],
                   help="attach a task head to a checkpoint and train it")
    sub.add_parser("evaluate", parents=[common],
                   help="per-slot pretext loss of a checkpoint")
    sub.add_parser("sample-buffer", parents=[common],
                   help="cluster one slot and write the kept sample list")

    ins = sub.add_parser("inspect-ckpt", help="print checkpoint contents")
    ins.add_argument("path", metavar="CKPT")
    return parser


def _load_cfg(args):
    cfg = cfgmod.load_config(args.config) if args.config else {}
    cfg = cfgmod.merge_defaults(cfg)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    cfg = cfgmod.apply_overrides(cfg, args.override)
    os.makedirs(args.out, exist_ok=True)
    cfgmod.write_resolved(cfg, os.path.join(args.out, "config.json"))
    return cfg


def _dataset(root):
    from . import data as D
    manifest = os.path.join(root, "manifest.tsv")
    if not os.path.isfile(manifest):
        raise ConfigError(f"no manifest at {manifest}; run gen-data first "
                          f"or point data.root at a corpus")
    return D.Dataset(root)


def _slot_refs(ds, slot):
    if slot not in ds.by_slot:
        raise ConfigError(f"slot {slot!r} not in dataset "
                          f"(has {sorted(ds.by_slot)})")
    return list(ds.samples_for(slot))


def _load_vocab(section, name, ckpt):
    from .tokenizers import Vocabulary
    path = section.get("vocab") or os.path.join(os.path.dirname(ckpt) or ".",
                                                "vocab.tsv")
    if not os.path.isfile(path):
        raise ConfigError(f"{name}.vocab not found at {path}")
    return Vocabulary.load(path)


def _require_checkpoint(section, name):
    ckpt = section.get("checkpoint")
    if not ckpt:
        raise ConfigError(f"{name}.checkpoint is required")
    return ckpt


def _slot_decoder_map(paradigm, plan):
    """slot -> decoder stage id, matching how pretraining assigned them."""
    from .data import modality_kind
    if paradigm in ("joint_shared", "joint_modal"):
        mapping, order = {}, {}
        for stage in plan.stages:
            key = modality_kind(stage.slot) if paradigm == "joint_shared" \
                else stage.slot
            if key not in order:
                order[key] = len(order) + 1
            mapping.setdefault(stage.slot, order[key])
        return mapping
    return {stage.slot: t for t, stage in enumerate(plan.stages, 1)}


def _cmd_gen_data(args, cfg):
    from . import data as D
    spec = cfgmod.synthetic_spec(cfg)
    D.generate_corpus(spec, args.out, seed=cfg["seed"])
    ds = D.Dataset(args.out)
    for slot in sorted(ds.by_slot):
        print(f"{slot}\t{len(ds.by_slot[slot])}")
    print(f"wrote {len(ds.refs)} samples to {args.out}")
    return 0


def _cmd_pretrain(args, cfg):
    from . import baselines as B
    from . import checkpoint as C
    from .data import load_sample
    from .tokenizers import Vocabulary, build_vocab

    st = cfgmod.resolve(cfg)
    ds = _dataset(st["data_root"])
    for stage in st["plan"].stages:
        _slot_refs(ds, stage.slot)

    if "text" in ds.by_slot:
        texts = [load_sample(ds.root, r) for r in ds.samples_for("text")]
        vocab = build_vocab(texts, max_size=st["model_cfg"].vocab_size)
    else:
        vocab = Vocabulary([])
    vocab.save(os.path.join(args.out, "vocab.tsv"))

    model, logs = B.run_paradigm(st["paradigm"], st["plan"], ds,
                                 st["model_cfg"], st["trainer"], vocab,
                                 st["tok_cfg"], out_dir=args.out,
                                 er_ratio=st["er_ratio"])
    meta = {"paradigm": st["paradigm"],
            "slot_decoders": _slot_decoder_map(st["paradigm"], st["plan"])}
    final = os.path.join(args.out, "final.ckpt")
    C.save_model(final, model, meta=meta)
    print(f"pretrained {st['paradigm']} over {len(st['plan'].stages)} stages; "
          f"checkpoint {final}")
    return 0


def _cmd_evaluate(args, cfg):
    import numpy as np

    from . import checkpoint as C
    from . import scheduler as sched

    st = cfgmod.resolve(cfg)
    section = cfg["evaluate"]
    ckpt = _require_checkpoint(section, "evaluate")
    model, meta = C.load_model(ckpt)
    vocab = _load_vocab(section, "evaluate", ckpt)
    ds = _dataset(st["data_root"])

    mapping = meta.get("slot_decoders") or _slot_decoder_map(
        st["paradigm"], st["plan"])
    losses = {}
    for slot in sorted(mapping, key=lambda s: (mapping[s], s)):
        dec = int(mapping[slot])
        if dec not in model.decoders or slot not in ds.by_slot:
            continue
        losses[slot] = float(sched.pretext_eval_loss(
            model, ds.samples_for(slot), dec,
            eval_point=len(st["plan"].stages), root=ds.root, vocab=vocab,
            tok_cfg=st["tok_cfg"], seed=st["seed"],
            batch_size=st["plan"].batch_size,
            text_ratio=st["trainer"].text_mask_ratio,
            visual_ratio=st["trainer"].visual_mask_ratio))
    if not losses:
        raise ConfigError("no evaluable slot: checkpoint decoders and "
                          "dataset slots do not overlap")
    report = {"checkpoint": ckpt, "losses": losses,
              "combined": float(np.mean(list(losses.values())))}
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for slot, loss in losses.items():
        print(f"{slot}\t{loss:.6f}")
    print(f"combined\t{report['combined']:.6f}")
    return 0


def _cmd_finetune(args, cfg):
    from . import finetune as F
    from .data import modality_kind
    from .seeds import DATA, rng_for

    st = cfgmod.resolve(cfg)
    section = cfg["finetune"]
    ckpt = _require_checkpoint(section, "finetune")
    vocab = _load_vocab(section, "finetune", ckpt)
    ds = _dataset(st["data_root"])
    slot = str(section["slot"])
    refs = _slot_refs(ds, slot)

    fracs = section["splits"]
    if (not isinstance(fracs, (list, tuple)) or len(fracs) != 3
            or any(f <= 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-6):
        raise ConfigError("finetune.splits must be three positive "
                          "fractions summing to 1")
    n = len(refs)
    n_train = max(1, int(round(fracs[0] * n)))
    n_val = max(1, int(round(fracs[1] * n)))
    if n_train + n_val >= n:
        raise ConfigError(f"slot {slot!r} has only {n} samples; "
                          f"splits leave no test data")
    perm = rng_for(st["seed"], DATA, 9001).permutation(n)
    parts = {"train": [refs[i] for i in perm[:n_train]],
             "val": [refs[i] for i in perm[n_train:n_train + n_val]],
             "test": [refs[i] for i in perm[n_train + n_val:]]}

    try:
        spec = F.TaskSpec(str(section["task"]), int(section["n_classes"]),
                          modality=modality_kind(slot))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    task_model = F.attach_head(ckpt, spec, seed=st["seed"],
                               tok_cfg=st["tok_cfg"])
    seg = spec.kind.startswith("seg")
    data = {name: F.load_split(ds.root, part, vocab, st["tok_cfg"],
                               with_masks=seg)
            for name, part in parts.items()}
    fcfg = F.FinetuneConfig(epochs=int(section["epochs"]),
                            batch_size=int(section["batch_size"]),
                            lr=float(section["lr"]),
                            optimizer=st["trainer"].optimizer,
                            seed=st["seed"])
    _, report = F.finetune_task(task_model, data, fcfg)
    report["slot"] = slot
    report["checkpoint"] = ckpt
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    test = report["test"]
    line = " ".join(f"{k}={test[k]:.4f}" for k in sorted(test)
                    if isinstance(test[k], float))
    print(f"best epoch {report['best_epoch']}  test: {line}")
    return 0


def _cmd_sample_buffer(args, cfg):
    from . import checkpoint as C
    from . import rehearsal as R

    st = cfgmod.resolve(cfg)
    section = cfg["sample"]
    ckpt = _require_checkpoint(section, "sample")
    model, _ = C.load_model(ckpt)
    vocab = _load_vocab(section, "sample", ckpt)
    ds = _dataset(st["data_root"])
    slot = str(section["slot"])
    refs = _slot_refs(ds, slot)

    kept, distances = R.sample_from_dataset(
        model, ds, refs, vocab, st["tok_cfg"], st["trainer"].sampling,
        seed=(st["seed"], 0), batch_size=st["plan"].batch_size)
    buffer = R.RehearsalBuffer()
    buffer.add_stage(1, slot, [r.relpath for r in kept], distances)
    out_path = os.path.join(args.out, "buffer.tsv")
    buffer.save(out_path)
    print(f"kept {len(kept)} of {len(refs)} {slot} samples -> {out_path}")
    return 0


def _cmd_inspect(args):
    from . import checkpoint as C

    info = C.inspect_checkpoint(args.path)
    with open(args.path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    print(f"format version {info['version']}, stage {info['stage_id']}, "
          f"{len(info['decoders'])} decoder(s)")
    if info["meta"]:
        print(f"meta: {json.dumps(info['meta'], sort_keys=True)}")
    for entry in info["parameters"]:
        shape = "x".join(str(d) for d in entry["shape"]) or "scalar"
        print(f"{entry['name']}\t{shape}\t{entry['dtype']}")
    print(f"total parameters: {info['total_parameters']}")
    print(f"sha256: {digest}")
    return 0


_VERBS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "sample-buffer": _cmd_sample_buffer,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            parser.print_usage(sys.stderr)
            sys.stderr.write("coss: error: a verb is required\n")
            return 1
        if args.verb == "inspect-ckpt":
            return _cmd_inspect(args)
        cfg = _load_cfg(args)
        return _VERBS[args.verb](args, cfg)
    except UsageError:
        return 1
    except ConfigError as exc:
        sys.stderr.write(f"coss: config error: {exc}\n")
        return 2
    except (CossError, OSError, ValueError, FloatingPointError) as exc:
        sys.stderr.write(f"coss: runtime error: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
