"""Downstream adaptation of a pre-trained encoder.

Classification pools the CLS embedding into a small MLP head; segmentation
reshapes intermediate encoder features back onto the patch grid and runs a
convolutional decoder that upsamples to the input resolution. The whole
network (front ends, encoder, fresh head) trains with AdamW; the best
validation snapshot is kept and scored on the test split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics as MM
from . import model as modelmod
from . import seeds
from . import tensor as T
from .checkpoint import load_model
from .data import load_mask, load_sample
from .model import LayerNorm, Linear, Parameter, trunc_normal
from .optim import AdamW, AdamWConfig
from .pretext import round_half_up
from .tokenizers import TokenBatch, tokenize_texts, stack_visual

log = logging.getLogger(__name__)

HEAD_KINDS = ("mlp2", "mlp1", "seg2d", "seg3d")
PAPER_TAPS = (4, 7, 10, 12)
PAPER_DEPTH = 12


def tap_layers(depth):
    """Encoder blocks whose outputs feed the segmentation decoder (1-based)."""
    return sorted({max(1, round_half_up(i * depth / PAPER_DEPTH))
                   for i in PAPER_TAPS})


@dataclass
class TaskSpec:
    kind: str
    n_classes: int
    modality: str = "image2d"

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"head kind must be one of {HEAD_KINDS}")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.kind == "seg2d" and self.modality != "image2d":
            raise ValueError("seg2d head requires image2d inputs")
        if self.kind == "seg3d" and self.modality != "volume3d":
            raise ValueError("seg3d head requires volume3d inputs")
        if self.kind.startswith("seg") and self.modality == "text":
            raise ValueError("segmentation heads do not apply to text")


# ---------------------------------------------------------------------------
# heads


class Mlp2Head:
    def __init__(self, rng, d, n_classes):
        self.fc1 = Linear("head.fc1", rng, d, d)
        self.norm = LayerNorm("head.norm", d)
        self.fc2 = Linear("head.fc2", rng, d, n_classes)

    def __call__(self, cls_vec):
        h = T.gelu(self.norm(self.fc1(cls_vec)))
        return self.fc2(h)

    def params(self):
        return self.fc1.params() + self.norm.params() + self.fc2.params()


class Mlp1Head:
    def __init__(self, rng, d, n_classes):
        self.fc = Linear("head.fc", rng, d, n_classes)

    def __call__(self, cls_vec):
        return self.fc(cls_vec)

    def params(self):
        return self.fc.params()


class Conv:
    """Odd-kernel same-padding convolution, 2D or 3D by kernel rank."""

    def __init__(self, prefix, rng, c_in, c_out, k, ndim):
        shape = (c_out, c_in) + (k,) * ndim
        self.w = Parameter(prefix + ".w", trunc_normal(rng, shape))
        self.b = Parameter(prefix + ".b", np.zeros(c_out))
        self.ndim = ndim

    def __call__(self, x):
        if self.ndim == 2:
            return T.conv2d(x, self.w, self.b)
        return T.conv3d(x, self.w, self.b)

    def params(self):
        return [self.w, self.b]


def pixel_shuffle(x, factors):
    """Rearrange [N, C*prod(r), *S] -> [N, C, *(S_i*r_i)]."""
    factors = tuple(int(f) for f in factors)
    nd = len(factors)
    n = x.shape[0]
    c = x.shape[1] // int(np.prod(factors))
    spatial = x.shape[2:]
    h = T.reshape(x, (n, c) + factors + spatial)
    # interleave each spatial axis with its factor: (..., S_i, r_i, ...)
    perm = [0, 1]
    for i in range(nd):
        perm.extend([2 + nd + i, 2 + i])
    h = T.transpose(h, perm)
    out_spatial = tuple(s * f for s, f in zip(spatial, factors))
    return T.reshape(h, (n, c) + out_spatial)


def _upsample_factor_plan(patch):
    """Per-stage per-axis factors whose product recovers the patch extents."""
    remaining = list(int(p) for p in patch)
    plan = []
    while any(r > 1 for r in remaining):
        stage = []
        for i, r in enumerate(remaining):
            if r <= 1:
                stage.append(1)
            elif r % 2 == 0:
                stage.append(2)
                remaining[i] = r // 2
            else:
                stage.append(r)
                remaining[i] = 1
        plan.append(tuple(stage))
    return plan


class UpsampleStage:
    """Shuffle-based x2 (or odd-factor) upsampling plus a residual fuse block."""

    def __init__(self, prefix, rng, c_in, c_out, factors, ndim):
        self.factors = factors
        mult = int(np.prod(factors))
        self.up = Conv(prefix + ".up", rng, c_in, c_out * mult, 3, ndim)
        self.fuse1 = Conv(prefix + ".fuse1", rng, c_out, c_out, 3, ndim)
        self.fuse2 = Conv(prefix + ".fuse2", rng, c_out, c_out, 3, ndim)

    def __call__(self, x):
        h = pixel_shuffle(self.up(x), self.factors)
        return h + self.fuse2(T.gelu(self.fuse1(h)))

    def params(self):
        return self.up.params() + self.fuse1.params() + self.fuse2.params()


class SegDecoder:
    """Tap fusion -> grid reshape -> upsample stack -> per-pixel class logits."""

    def __init__(self, rng, embed_dim, depth, grid, patch, n_classes):
        self.grid = tuple(int(g) for g in grid)
        self.patch = tuple(int(p) for p in patch)
        self.ndim = len(self.grid)
        self.taps = tap_layers(depth)
        self.proj = [Linear(f"head.tap{i}", rng, embed_dim, embed_dim)
                     for i in self.taps]
        plan = _upsample_factor_plan(self.patch)
        mid = max(8, embed_dim // 2)
        self.stages = []
        c_in = embed_dim
        for s, factors in enumerate(plan):
            self.stages.append(UpsampleStage(f"head.up{s}", rng, c_in, mid,
                                             factors, self.ndim))
            c_in = mid
        self.head = Conv("head.out", rng, c_in, n_classes, 1, self.ndim)

    def __call__(self, taps):
        if len(taps) != len(self.proj):
            raise ValueError("tap count mismatch")
        fused = None
        for proj, z in zip(self.proj, taps):
            # drop the CLS row, keep patch tokens in grid order
            tokens = T.narrow(z, 1, z.shape[1] - int(np.prod(self.grid)),
                              int(np.prod(self.grid)))
            h = proj(tokens)
            fused = h if fused is None else fused + h
        n, _, d = fused.shape
        h = T.reshape(fused, (n,) + self.grid + (d,))
        # channels first
        perm = [0, 1 + self.ndim] + list(range(1, 1 + self.ndim))
        h = T.transpose(h, perm)
        for stage in self.stages:
            h = stage(h)
        return self.head(h)

    def params(self):
        out = []
        for p in self.proj:
            out.extend(p.params())
        for s in self.stages:
            out.extend(s.params())
        out.extend(self.head.params())
        return out


# ---------------------------------------------------------------------------
# task model


@dataclass
class TaskModel:
    model: object
    head: object
    spec: TaskSpec

    def params(self):
        return self.model.core.params() + self.head.params()

    def forward(self, batch: TokenBatch):
        if self.spec.kind.startswith("seg"):
            dec: SegDecoder = self.head
            _, taps = modelmod.encode(self.model, batch,
                                      return_layers=dec.taps)
            return dec(taps)
        enc = modelmod.encode(self.model, batch)
        if self.model.cfg.prepend_cls:
            cls_vec = T.reshape(T.narrow(enc, 1, 0, 1),
                                (enc.shape[0], enc.shape[2]))
        else:
            cls_vec = T.tmean(enc, axis=1)
        return self.head(cls_vec)


def attach_head(checkpoint, spec: TaskSpec, seed=0, tok_cfg=None):
    """Load a pre-trained encoder and bolt a freshly initialized head on it."""
    if isinstance(checkpoint, (str, bytes)) or hasattr(checkpoint, "__fspath__"):
        model, _ = load_model(checkpoint)
    else:
        model = checkpoint
    rng = seeds.rng_for(seed, seeds.INIT, 4001)
    d = model.cfg.embed_dim
    if spec.kind == "mlp2":
        head = Mlp2Head(rng, d, spec.n_classes)
    elif spec.kind == "mlp1":
        head = Mlp1Head(rng, d, spec.n_classes)
    else:
        if tok_cfg is None:
            raise ValueError("segmentation heads need the tokenizer config")
        grid = tok_cfg.grid_shape(spec.modality)
        patch = tok_cfg.patch2d if spec.kind == "seg2d" else tok_cfg.patch3d
        head = SegDecoder(rng, d, model.cfg.depth, grid, patch, spec.n_classes)
    return TaskModel(model=model, head=head, spec=spec)


# ---------------------------------------------------------------------------
# losses


def ce_loss(logits, labels):
    logp = T.log_softmax(logits)
    picked = T.gather_last(logp, np.asarray(labels, dtype=np.int64))
    return T.tmean(picked) * -1.0


def dice_ce_loss(maps, gt, eps=1e-5):
    """Pixel CE plus soft-Dice complement, averaged over classes.

    maps: [N, C, *spatial] logits; gt: int array [N, *spatial].
    """
    gt = np.asarray(gt, dtype=np.int64)
    n_classes = maps.shape[1]
    nd = maps.ndim - 2
    perm = [0] + list(range(2, 2 + nd)) + [1]
    ch_last = T.transpose(maps, perm)
    onehot = np.eye(n_classes, dtype=T.default_dtype())[gt]
    logp = T.log_softmax(ch_last)
    ce = T.tsum(logp * onehot) * (-1.0 / gt.size)
    probs = T.softmax(ch_last)
    dice_sum = None
    for c in range(n_classes):
        p_c = T.narrow(probs, probs.ndim - 1, c, 1)
        g_c = onehot[..., c:c + 1]
        num = T.tsum(p_c * g_c) * 2.0 + eps
        den = T.tsum(p_c) + float(g_c.sum()) + eps
        term = num / den
        dice_sum = term if dice_sum is None else dice_sum + term
    mean_dice = dice_sum * (1.0 / n_classes)
    return ce - mean_dice + 1.0


# ---------------------------------------------------------------------------
# data plumbing


def subset_batch(batch: TokenBatch, idx):
    idx = np.asarray(idx)
    if batch.modality == "text":
        return TokenBatch("text", ids=batch.ids[idx], valid=batch.valid[idx])
    return TokenBatch(batch.modality, patches=batch.patches[idx],
                      grid_shape=batch.grid_shape)


def load_split(root, refs, vocab, tok_cfg, with_masks=False):
    """Materialize refs into (TokenBatch, labels, masks-or-None)."""
    if not refs:
        raise ValueError("empty split")
    labels = np.array([r.label for r in refs], dtype=np.int64)
    kind = refs[0].kind
    if kind == "text":
        texts = [load_sample(root, r) for r in refs]
        return tokenize_texts(texts, vocab, tok_cfg), labels, None
    samples = [load_sample(root, r) for r in refs]
    batch = stack_visual(samples, tok_cfg, kind)
    masks = None
    if with_masks:
        masks = np.stack([load_mask(root, r) for r in refs]).astype(np.int64)
    return batch, labels, masks


# ---------------------------------------------------------------------------
# training


@dataclass
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    seed: int = 0


def _foreground_dice(pred_classes, gt, n_classes):
    vals = []
    for c in range(1, n_classes):
        vals.append(MM.dice(pred_classes == c, gt == c))
    return float(np.mean(vals))


def _predict(task_model, batch, chunk=16):
    outs = []
    with T.no_grad():
        for i in range(0, batch.n, chunk):
            sub = subset_batch(batch, np.arange(i, min(i + chunk, batch.n)))
            outs.append(task_model.forward(sub).data)
    return np.concatenate(outs, axis=0)


def evaluate_task(task_model, batch, labels, masks=None):
    """Test-split metrics; classification wants labels, segmentation masks."""
    out = _predict(task_model, batch)
    if task_model.spec.kind.startswith("seg"):
        n_classes = task_model.spec.n_classes
        pred = out.argmax(axis=1)
        per_sample = []
        for i in range(pred.shape[0]):
            per_class = [MM.segmentation_metrics(pred[i] == c, masks[i] == c)
                         for c in range(1, n_classes)]
            per_sample.append(per_class)
        dice_mean = float(np.mean([[m["dice"] for m in row]
                                   for row in per_sample]))
        hd_mean = float(np.mean([[m["hd95"] for m in row]
                                 for row in per_sample]))
        return {"dice": dice_mean, "hd95": hd_mean}
    exps = np.exp(out - out.max(axis=1, keepdims=True))
    probs = exps / exps.sum(axis=1, keepdims=True)
    return MM.classification_metrics(labels, probs)


def finetune_task(task_model, data, cfg: FinetuneConfig):
    """Train on data["train"], select on data["val"], report on data["test"].

    data maps split name -> (TokenBatch, labels, masks-or-None) as produced
    by load_split. Returns (task_model with best-val weights, report dict).
    """
    for name in ("train", "val", "test"):
        if name not in data or data[name][0].n == 0:
            raise ValueError(f"missing or empty split {name!r}")
    train_batch, train_labels, train_masks = data["train"]
    val_batch, val_labels, val_masks = data["val"]
    test_batch, test_labels, test_masks = data["test"]
    seg = task_model.spec.kind.startswith("seg")
    if seg and (train_masks is None or val_masks is None or test_masks is None):
        raise ValueError("segmentation fine-tuning needs masks in every split")

    params = task_model.params()
    opt = AdamW(params, cfg.optimizer)
    rng = seeds.rng_for(cfg.seed, seeds.DATA, 8001)
    n = train_batch.n
    loss_history = []
    val_history = []
    best = (-np.inf, -1, None)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            sub = subset_batch(train_batch, idx)
            opt.zero_grad()
            out = task_model.forward(sub)
            if seg:
                loss = dice_ce_loss(out, train_masks[idx])
            else:
                loss = ce_loss(out, train_labels[idx])
            value = float(loss.item())
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"non-finite fine-tune loss at epoch {epoch}")
            loss.backward()
            opt.step(cfg.lr)
            epoch_losses.append(value)
        loss_history.append(float(np.mean(epoch_losses)))

        val_out = _predict(task_model, val_batch)
        if seg:
            pred = val_out.argmax(axis=1)
            score = float(np.mean([
                _foreground_dice(pred[i], val_masks[i],
                                 task_model.spec.n_classes)
                for i in range(pred.shape[0])]))
        else:
            score = float((val_out.argmax(axis=1) == val_labels).mean())
        val_history.append(score)
        if score > best[0]:
            best = (score, epoch, {p.name: p.data.copy() for p in params})

    if best[2] is not None:
        for p in params:
            p.data[...] = best[2][p.name]
    test_report = evaluate_task(task_model, test_batch, test_labels,
                                test_masks)
    report = {"task": task_model.spec.kind,
              "n_classes": task_model.spec.n_classes,
              "best_epoch": best[1],
              "best_val": best[0],
              "train_loss": loss_history,
              "val_metric": val_history,
              "test": test_report}
    return task_model, report
