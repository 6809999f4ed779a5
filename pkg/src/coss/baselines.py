"""Comparison pre-training paradigms sharing the stage loop's arithmetic.

Five paradigms, one config surface:
- joint_shared: one phase over all modalities mixed, one decoder per input
  dimensionality (text, 2D, 3D);
- joint_modal: same phase, one decoder per modality slot;
- sequential_plain: the stage loop with no buffer and no replay;
- er_random: stage loop with a uniformly sampled buffer replayed through the
  original pretext task (decoders included in replay updates);
- medcoss: the full method (clustered sampling, mixing, feature replay).

Budget note: every paradigm visits each current sample once per epoch, and
the two replay paradigms retain identical buffer sizes, so compute budgets
match at the sample-visit level.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os

import numpy as np

from . import model as modelmod
from . import scheduler as sched
from . import seeds
from .checkpoint import save_model
from .data import batch_from_refs, modality_kind
from .optim import AdamW
from .rehearsal import RehearsalBuffer

log = logging.getLogger(__name__)

PARADIGMS = ("joint_shared", "joint_modal", "sequential_plain", "er_random",
             "medcoss")


def _uniform_epochs(plan):
    values = {sp.epochs for sp in plan.stages}
    if len(values) != 1:
        raise ValueError("joint training needs the same epoch count per stage")
    return values.pop()


def run_joint(plan, dataset, model_cfg, trainer, vocab, tok_cfg,
              decoder_mode="shared", out_dir=None):
    """Single-phase training over all slots; batches stay single-modality.

    decoder_mode "shared" builds one decoder per input dimensionality,
    "modal" one per slot. Returns (model, logs).
    """
    if decoder_mode not in ("shared", "modal"):
        raise ValueError("decoder_mode must be 'shared' or 'modal'")
    epochs = _uniform_epochs(plan)
    model = modelmod.init_model(model_cfg, seed=trainer.seed)

    slots = [sp.slot for sp in plan.stages]
    slot_to_dec = {}
    next_id = 1
    for slot in slots:
        key = modality_kind(slot) if decoder_mode == "shared" else slot
        existing = [s for s in slot_to_dec if
                    (modality_kind(s) if decoder_mode == "shared" else s) == key]
        if existing:
            slot_to_dec[slot] = slot_to_dec[existing[0]]
            continue
        kind = modality_kind(slot)
        if kind == "text":
            model.add_decoder(next_id, "text", None, None, trainer.seed)
        else:
            model.add_decoder(next_id, kind, tok_cfg.seq_len(kind),
                              tok_cfg.patch_dim(kind), trainer.seed)
        slot_to_dec[slot] = next_id
        next_id += 1

    opt = AdamW(model.params(), trainer.optimizer)
    core_params = model.core.params()
    data_rng = seeds.rng_for(trainer.seed, seeds.DATA, 0)
    mask_rng = seeds.rng_for(trainer.seed, seeds.MASK, 0)

    base = [(slot, r) for slot in slots for r in dataset.samples_for(slot)]
    epoch_plans = [sched.group_shuffled(base, plan.batch_size, data_rng)
                   for _ in range(epochs)]
    counts = [len(g) for g in epoch_plans]
    total_steps = sum(counts)
    warmup_steps = min(sum(counts[:plan.warmup_epochs]),
                       max(0, total_steps - 1))

    metrics = []
    step = 0
    for groups in epoch_plans:
        for slot, refs in groups:
            batch = batch_from_refs(dataset.root, refs, vocab, tok_cfg)
            lr = sched.lr_schedule(step, warmup_steps, total_steps,
                                   plan.peak_lr)
            dec_id = slot_to_dec[slot]
            opt.zero_grad()
            loss = sched.pretext_batch_loss(
                model, batch, dec_id, mask_rng,
                text_ratio=trainer.text_mask_ratio,
                visual_ratio=trainer.visual_mask_ratio)
            value = float(loss.item())
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss at joint step {step}, slot {slot}")
            loss.backward()
            opt.step(lr, subset=core_params + model.decoders[dec_id].params())
            metrics.append({"step": step, "stage": 0, "source": slot,
                            "loss": value, "lr": lr, "n": batch.n})
            step += 1

    logs = {"metrics": metrics, "decoders": len(model.decoders)}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_model(os.path.join(out_dir, "joint.ckpt"), model,
                   meta={"paradigm": f"joint_{decoder_mode}"})
        with open(os.path.join(out_dir, "metrics.jsonl"), "w",
                  encoding="utf-8") as fh:
            for row in metrics:
                fh.write(json.dumps(row) + "\n")
    return model, logs


def run_sequential_plain(plan, dataset, model_cfg, trainer, vocab, tok_cfg,
                         out_dir=None):
    """Stage-by-stage training with no retention mechanism at all."""
    cfg = dataclasses.replace(trainer, use_buffer=False)
    model, buffer, logs = sched.run_pipeline(plan, dataset, model_cfg, cfg,
                                             vocab, tok_cfg, out_dir=out_dir)
    assert len(buffer) == 0
    return model, logs


def run_er(plan, dataset, model_cfg, trainer, vocab, tok_cfg, ratio=0.05,
           out_dir=None):
    """Random-buffer replay through the original pretext losses, no mixing.

    ratio is the per-stage fraction of current data retained; 0 disables the
    buffer entirely and reduces to run_sequential_plain.
    """
    if ratio < 0 or ratio > 1:
        raise ValueError("ratio must be in [0, 1]")
    if ratio == 0:
        cfg = dataclasses.replace(trainer, use_buffer=False,
                                  replay_loss="pretext",
                                  buffer_sampling="random", imm=False)
    else:
        sampling = dataclasses.replace(
            trainer.sampling,
            cluster_fraction=ratio / trainer.sampling.per_cluster)
        cfg = dataclasses.replace(trainer, use_buffer=True,
                                  replay_loss="pretext",
                                  buffer_sampling="random", imm=False,
                                  sampling=sampling)
    return sched.run_pipeline(plan, dataset, model_cfg, cfg, vocab, tok_cfg,
                              out_dir=out_dir)


def run_medcoss(plan, dataset, model_cfg, trainer, vocab, tok_cfg,
                out_dir=None):
    cfg = dataclasses.replace(trainer, use_buffer=True, replay_loss="fd",
                              buffer_sampling="kmeans")
    return sched.run_pipeline(plan, dataset, model_cfg, cfg, vocab, tok_cfg,
                              out_dir=out_dir)


def run_paradigm(kind, plan, dataset, model_cfg, trainer, vocab, tok_cfg,
                 out_dir=None, er_ratio=0.05):
    """Uniform entry point; returns (model, logs) for every paradigm."""
    if kind == "joint_shared":
        return run_joint(plan, dataset, model_cfg, trainer, vocab, tok_cfg,
                         decoder_mode="shared", out_dir=out_dir)
    if kind == "joint_modal":
        return run_joint(plan, dataset, model_cfg, trainer, vocab, tok_cfg,
                         decoder_mode="modal", out_dir=out_dir)
    if kind == "sequential_plain":
        return run_sequential_plain(plan, dataset, model_cfg, trainer, vocab,
                                    tok_cfg, out_dir=out_dir)
    if kind == "er_random":
        model, _, logs = run_er(plan, dataset, model_cfg, trainer, vocab,
                                tok_cfg, ratio=er_ratio, out_dir=out_dir)
        return model, logs
    if kind == "medcoss":
        model, _, logs = run_medcoss(plan, dataset, model_cfg, trainer, vocab,
                                     tok_cfg, out_dir=out_dir)
        return model, logs
    raise ValueError(f"unknown paradigm {kind!r}; choose from {PARADIGMS}")


def retention_score(logs, final_stage=None):
    """Mean past-modality pretext loss after the last stage (lower is better)."""
    rows = logs["retention"]
    if not rows:
        raise ValueError("no retention rows")
    last = final_stage if final_stage is not None else max(r["stage"] for r in rows)
    past = [r["loss"] for r in rows if r["stage"] == last and r["eval_stage"] < last]
    if not past:
        raise ValueError("retention score needs at least two stages")
    return float(np.mean(past))
