"""Sequential multi-stage pre-training loop.

One stage trains on a single modality's data plus whatever the rehearsal
buffer holds from earlier stages. Current-data batches optimize the masked
prediction objective and update the shared encoder, its front ends, and the
stage's fresh decoder. Buffer batches pull the encoder back toward a frozen
snapshot taken at stage start (or, for the plain replay variant, re-run the
old pretext task). The buffer is extended once per stage, after training.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as modelmod
from . import rehearsal as R
from . import seeds
from . import tensor as T
from .checkpoint import save_model
from .data import SampleRef, batch_from_refs, modality_kind
from .optim import AdamW, AdamWConfig
from .pretext import (apply_text_mask, mim_loss, mlm_loss, sample_text_mask,
                      sample_visual_mask)

log = logging.getLogger(__name__)

REPLAY_LOSSES = ("fd", "pretext")
BUFFER_SAMPLERS = ("kmeans", "random")


@dataclass
class StageSpec:
    slot: str
    epochs: int = 30


@dataclass
class StagePlan:
    """Ordered stage list plus the shared training hyperparameters."""

    stages: list
    batch_size: int = 32
    warmup_epochs: int = 4
    peak_lr: float = 1.5e-4

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a stage plan needs at least one stage")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def default_plan(slots, epochs=30, **kwargs):
    return StagePlan([StageSpec(s, epochs) for s in slots], **kwargs)


@dataclass
class TrainerConfig:
    """Everything about a run that is not the stage list or the model."""

    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    sampling: R.SamplingConfig = field(default_factory=R.SamplingConfig)
    seed: int = 0
    use_buffer: bool = True
    replay_loss: str = "fd"
    buffer_sampling: str = "kmeans"
    imm: bool = True
    text_mask_ratio: float = 0.15
    visual_mask_ratio: float = 0.75

    def __post_init__(self):
        if self.replay_loss not in REPLAY_LOSSES:
            raise ValueError(f"replay_loss must be one of {REPLAY_LOSSES}")
        if self.buffer_sampling not in BUFFER_SAMPLERS:
            raise ValueError(f"buffer_sampling must be one of {BUFFER_SAMPLERS}")


@dataclass
class TrainState:
    model: object
    buffer: R.RehearsalBuffer
    stage: int = 0
    global_step: int = 0
    optimizer: AdamW = None


# ---------------------------------------------------------------------------
# learning-rate schedule


def lr_schedule(step, warmup_steps, total_steps, peak):
    """Linear 0 -> peak over the warmup, then half-cosine peak -> 0."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    denom = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / denom
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# batch planning


def _buffer_ref(entry):
    return SampleRef(index=-1, slot=entry.slot, relpath=entry.relpath, label=-1)


def group_shuffled(base, batch_size, rng):
    """Shuffle tagged items and cut them into same-tag runs of <= batch_size.

    base: list of (tag, ref). Returns [(tag, [refs...]), ...] covering every
    item exactly once; the trailing partial group is kept.
    """
    order = rng.permutation(len(base))
    groups = []
    tag_cur, acc = None, []
    for i in order:
        tag, ref = base[int(i)]
        if tag != tag_cur or len(acc) == batch_size:
            if acc:
                groups.append((tag_cur, acc))
            tag_cur, acc = tag, []
        acc.append(ref)
    if acc:
        groups.append((tag_cur, acc))
    return groups


def plan_epochs(d_refs, buffer, batch_size, rng, epochs=1):
    """Materialize per-epoch batch groups over the union of D_t and the buffer.

    Each epoch independently shuffles the union, then cuts the sequence into
    maximal same-tag runs of at most batch_size samples, so every group is
    single-source and single-modality and the trailing partial group is kept.
    Tags are "current" or "buffer:<slot>:<origin stage>".
    """
    if not d_refs:
        raise ValueError("current-stage dataset is empty")
    base = [("current", r) for r in d_refs]
    if buffer is not None:
        for e in buffer.entries:
            base.append((f"buffer:{e.slot}:{e.stage}", _buffer_ref(e)))
    return [group_shuffled(base, batch_size, rng) for _ in range(epochs)]


def batch_iterator(d_refs, buffer, batch_size, rng, epochs=1, loader=None):
    """Stream (source tag, batch) pairs for the given number of epochs.

    loader turns a ref group into a TokenBatch; without one the raw ref
    groups are yielded, which is enough for bookkeeping tests.
    """
    for groups in plan_epochs(d_refs, buffer, batch_size, rng, epochs):
        for tag, refs in groups:
            if loader is None:
                yield tag, refs
            else:
                yield tag, loader(refs)


# ---------------------------------------------------------------------------
# per-batch losses


def pretext_batch_loss(model, batch, dec_stage, rng, text_ratio=0.15,
                       visual_ratio=0.75):
    """Masked-prediction loss for one batch through the given stage's decoder."""
    if batch.modality == "text":
        plan = sample_text_mask(batch, ratio=text_ratio, rng=rng)
        masked = apply_text_mask(batch, plan)
        enc = modelmod.encode(model, masked)
        off = 1 if model.cfg.prepend_cls else 0
        h = T.narrow(enc, 1, off, enc.shape[1] - off)
        logits = model.decoders[dec_stage].head(h)
        return mlm_loss(logits, batch.ids, plan)
    plan = sample_visual_mask(batch, ratio=visual_ratio, rng=rng)
    enc = modelmod.encode(model, batch, keep=plan.keep)
    rec = modelmod.decode_visual(model, dec_stage, enc, plan.keep)
    return mim_loss(rec, batch.patches, plan)


def pretext_eval_loss(model, refs, dec_stage, *, eval_point, root, vocab,
                      tok_cfg, seed, batch_size=32, text_ratio=0.15,
                      visual_ratio=0.75):
    """Sample-weighted pretext loss over refs with reproducible masks.

    The mask stream depends only on (seed, eval_point, dec_stage), so the
    same evaluation call is comparable across checkpoints.
    """
    if not refs:
        raise ValueError("no samples to evaluate")
    rng = seeds.rng_for(seed, seeds.EVAL, eval_point, dec_stage)
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(refs), batch_size):
            batch = batch_from_refs(root, refs[i:i + batch_size], vocab, tok_cfg)
            loss = pretext_batch_loss(model, batch, dec_stage, rng,
                                      text_ratio=text_ratio,
                                      visual_ratio=visual_ratio)
            total += float(loss.item()) * batch.n
            count += batch.n
    return total / count


# ---------------------------------------------------------------------------
# stage loop


def run_stage(state: TrainState, d_refs, *, stage_id, slot, epochs, plan,
              trainer: TrainerConfig, dataset, vocab, tok_cfg, sink=None):
    """Train one stage in place and extend the buffer afterwards.

    Current-data steps update the encoder plus this stage's decoder; buffer
    steps update the encoder only (feature replay) or the encoder plus the
    originating stage's decoder (plain pretext replay).
    """
    model = state.model
    kind = modality_kind(slot)
    teacher = None
    if stage_id > 1 and trainer.use_buffer and trainer.replay_loss == "fd":
        teacher = modelmod.snapshot_teacher(model)
    if kind == "text":
        dec = model.add_decoder(stage_id, "text", None, None, trainer.seed)
    else:
        seq_len = tok_cfg.seq_len(kind)
        patch_dim = tok_cfg.patch_dim(kind)
        dec = model.add_decoder(stage_id, kind, seq_len, patch_dim, trainer.seed)

    opt = AdamW(model.params(), trainer.optimizer)
    state.optimizer = opt
    core_params = model.core.params()
    mim_params = core_params + dec.params()

    data_rng = seeds.rng_for(trainer.seed, seeds.DATA, stage_id)
    mask_rng = seeds.rng_for(trainer.seed, seeds.MASK, stage_id)
    fd_rng = seeds.rng_for(trainer.seed, seeds.MIXUP, stage_id)

    buffer = state.buffer if trainer.use_buffer else None
    epoch_plans = plan_epochs(d_refs, buffer, plan.batch_size, data_rng, epochs)
    counts = [len(g) for g in epoch_plans]
    total_steps = sum(counts)
    warmup_steps = min(sum(counts[:plan.warmup_epochs]),
                       max(0, total_steps - 1))

    step_in_stage = 0
    for groups in epoch_plans:
        for tag, refs in groups:
            batch = batch_from_refs(dataset.root, refs, vocab, tok_cfg)
            lr = lr_schedule(step_in_stage, warmup_steps, total_steps,
                             plan.peak_lr)
            opt.zero_grad()
            if tag == "current":
                loss = pretext_batch_loss(model, batch, stage_id, mask_rng,
                                          text_ratio=trainer.text_mask_ratio,
                                          visual_ratio=trainer.visual_mask_ratio)
                subset = mim_params
            elif trainer.replay_loss == "fd":
                loss = R.fd_loss(model, teacher, batch, fd_rng,
                                 text_ratio=trainer.text_mask_ratio,
                                 visual_ratio=trainer.visual_mask_ratio,
                                 imm=trainer.imm)
                subset = core_params
            else:
                origin = int(tag.split(":")[2])
                loss = pretext_batch_loss(model, batch, origin, mask_rng,
                                          text_ratio=trainer.text_mask_ratio,
                                          visual_ratio=trainer.visual_mask_ratio)
                subset = core_params + model.decoders[origin].params()
            value = float(loss.item())
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss {value!r} at stage {stage_id}, "
                    f"step {state.global_step}, source {tag}, lr {lr:.3e}")
            loss.backward()
            opt.step(lr, subset=subset)
            if sink is not None:
                sink({"step": state.global_step, "stage": stage_id,
                      "source": tag, "loss": value, "lr": lr, "n": batch.n})
            step_in_stage += 1
            state.global_step += 1

    if trainer.use_buffer:
        _extend_buffer(state, model, d_refs, stage_id, slot, plan, trainer,
                       dataset, vocab, tok_cfg)
    state.stage = stage_id
    return state


def _extend_buffer(state, model, d_refs, stage_id, slot, plan, trainer,
                   dataset, vocab, tok_cfg):
    if trainer.buffer_sampling == "kmeans":
        selected, dists = R.sample_from_dataset(
            model, dataset, d_refs, vocab, tok_cfg, trainer.sampling,
            seed=(trainer.seed, stage_id), batch_size=plan.batch_size)
    else:
        n_keep = min(len(d_refs),
                     trainer.sampling.cluster_count(len(d_refs))
                     * trainer.sampling.per_cluster)
        rng = seeds.rng_for(trainer.seed, seeds.KMEANS, stage_id, 1)
        idx = sorted(rng.choice(len(d_refs), size=n_keep,
                                replace=False).tolist())
        selected = [d_refs[i] for i in idx]
        dists = np.zeros(n_keep)
    state.buffer.add_stage(stage_id, slot, [r.relpath for r in selected],
                           dists)
    log.info("stage %d: buffer extended by %d %s samples (total %d)",
             stage_id, len(selected), slot, len(state.buffer))


# ---------------------------------------------------------------------------
# full pipeline


def run_pipeline(plan: StagePlan, dataset, model_cfg, trainer: TrainerConfig,
                 vocab, tok_cfg, out_dir=None):
    """Fold run_stage over the plan; returns (model, buffer, logs).

    logs has "metrics" (one dict per update step) and "retention" (pretext
    loss of every already-seen modality re-evaluated after each stage). With
    out_dir set, stage checkpoints, the buffer manifest, and both logs are
    written there as they are produced.
    """
    model = modelmod.init_model(model_cfg, seed=trainer.seed)
    state = TrainState(model=model, buffer=R.RehearsalBuffer())
    metrics = []
    retention = []
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.jsonl"), "w",
                  encoding="utf-8")

    def sink(row):
        metrics.append(row)
        if fh is not None:
            fh.write(json.dumps(row) + "\n")

    try:
        for t, sp in enumerate(plan.stages, start=1):
            refs = dataset.samples_for(sp.slot)
            run_stage(state, refs, stage_id=t, slot=sp.slot, epochs=sp.epochs,
                      plan=plan, trainer=trainer, dataset=dataset, vocab=vocab,
                      tok_cfg=tok_cfg, sink=sink)
            if out_dir is not None:
                save_model(os.path.join(out_dir, f"stage_{t}.ckpt"), model,
                           meta={"stage": t, "slot": sp.slot,
                                 "global_step": state.global_step})
                state.buffer.save(os.path.join(out_dir, "buffer.tsv"))
            for s in range(1, t + 1):
                s_slot = plan.stages[s - 1].slot
                value = pretext_eval_loss(
                    model, dataset.samples_for(s_slot), s, eval_point=t,
                    root=dataset.root, vocab=vocab, tok_cfg=tok_cfg,
                    seed=trainer.seed, batch_size=plan.batch_size,
                    text_ratio=trainer.text_mask_ratio,
                    visual_ratio=trainer.visual_mask_ratio)
                retention.append({"stage": t, "eval_stage": s,
                                  "slot": s_slot, "loss": value})
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        with open(os.path.join(out_dir, "retention.jsonl"), "w",
                  encoding="utf-8") as rf:
            for row in retention:
                rf.write(json.dumps(row) + "\n")
    return model, state.buffer, {"metrics": metrics, "retention": retention}
