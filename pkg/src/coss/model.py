"""Shared transformer encoder with modality front-ends and per-stage decoders.

One encoder processes every modality: text ids go through a token embedding,
visual patches through a linear projection, each plus a learned per-modality
positional table indexed by original position. A learned CLS vector is
prepended uniformly (config knob). Decoders are created fresh per training
stage; a frozen teacher snapshot of the encoder supports feature-consistency
replay.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import seeds
from . import tensor as T
from .tensor import Parameter, Tensor

DEFAULT_POS_LENGTHS = {"text": 112, "image2d": 196, "volume3d": 144}
DEFAULT_PATCH_DIMS = {"image2d": 256, "volume3d": 4096}


@dataclass
class ModelConfig:
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    vocab_size: int = 512
    pos_lengths: dict = field(default_factory=lambda: dict(DEFAULT_POS_LENGTHS))
    patch_dims: dict = field(default_factory=lambda: dict(DEFAULT_PATCH_DIMS))
    prepend_cls: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ValueError("decoder_dim must be divisible by decoder_heads")
        for m in ("text", "image2d", "volume3d"):
            if m not in self.pos_lengths:
                raise ValueError(f"pos_lengths missing modality {m!r}")

    def to_dict(self):
        return {
            "embed_dim": self.embed_dim, "depth": self.depth, "heads": self.heads,
            "mlp_ratio": self.mlp_ratio, "decoder_dim": self.decoder_dim,
            "decoder_depth": self.decoder_depth, "decoder_heads": self.decoder_heads,
            "vocab_size": self.vocab_size,
            "pos_lengths": dict(self.pos_lengths),
            "patch_dims": dict(self.patch_dims),
            "prepend_cls": self.prepend_cls, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) resampling any draw with |x| > 2*std; deterministic per rng."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


class Linear:
    def __init__(self, prefix, rng, d_in, d_out):
        self.w = Parameter(prefix + ".w", trunc_normal(rng, (d_in, d_out)))
        self.b = Parameter(prefix + ".b", np.zeros(d_out))

    def __call__(self, x):
        return x @ self.w + self.b

    def params(self):
        return [self.w, self.b]


class LayerNorm:
    def __init__(self, prefix, dim):
        self.g = Parameter(prefix + ".g", np.ones(dim))
        self.b = Parameter(prefix + ".b", np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.g, self.b)

    def params(self):
        return [self.g, self.b]


class Block:
    """Pre-norm self-attention + MLP block."""

    def __init__(self, prefix, rng, dim, heads, mlp_ratio):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        hidden = int(dim * mlp_ratio)
        self.ln1 = LayerNorm(prefix + ".ln1", dim)
        self.qkv = Linear(prefix + ".attn.qkv", rng, dim, 3 * dim)
        self.out = Linear(prefix + ".attn.out", rng, dim, dim)
        self.ln2 = LayerNorm(prefix + ".ln2", dim)
        self.fc1 = Linear(prefix + ".mlp.fc1", rng, dim, hidden)
        self.fc2 = Linear(prefix + ".mlp.fc2", rng, hidden, dim)

    def __call__(self, x):
        n, s, d = x.shape
        h = self.ln1(x)
        qkv = self.qkv(h)
        heads, hd = self.heads, self.head_dim

        def split(t, k):
            part = T.narrow(t, 2, k * d, d)
            return T.transpose(part.reshape(n, s, heads, hd), (0, 2, 1, 3))

        q, k_, v = split(qkv, 0), split(qkv, 1), split(qkv, 2)
        scores = (q @ T.transpose(k_, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        att = T.softmax(scores, axis=-1)
        ctx = T.transpose(att @ v, (0, 2, 1, 3)).reshape(n, s, d)
        x = x + self.out(ctx)
        x = x + self.fc2(T.gelu(self.fc1(self.ln2(x))))
        return x

    def params(self):
        return (self.ln1.params() + self.qkv.params() + self.out.params()
                + self.ln2.params() + self.fc1.params() + self.fc2.params())


class EncoderCore:
    """Front-ends + shared encoder: everything the frozen teacher copies."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.embed_dim
        self.cfg = cfg
        self.token_embedding = Parameter("core.token_embedding",
                                         trunc_normal(rng, (cfg.vocab_size, d)))
        self.patch_proj = {
            m: Linear(f"core.patch_proj.{m}", rng, cfg.patch_dims[m], d)
            for m in sorted(cfg.patch_dims)
        }
        self.pos = {
            m: Parameter(f"core.pos.{m}", trunc_normal(rng, (cfg.pos_lengths[m], d)))
            for m in sorted(cfg.pos_lengths)
        }
        self.cls = Parameter("core.cls", trunc_normal(rng, (1, 1, d)))
        self.blocks = [Block(f"core.blocks.{i}", rng, d, cfg.heads, cfg.mlp_ratio)
                       for i in range(cfg.depth)]
        self.ln_f = LayerNorm("core.ln_f", d)

    def params(self):
        out = [self.token_embedding]
        for m in sorted(self.patch_proj):
            out.extend(self.patch_proj[m].params())
        for m in sorted(self.pos):
            out.append(self.pos[m])
        out.append(self.cls)
        for b in self.blocks:
            out.extend(b.params())
        out.extend(self.ln_f.params())
        return out


class TextDecoder:
    """Per-position vocabulary head; doubles as the model's token-prediction head."""

    kind = "text"

    def __init__(self, prefix, cfg, rng):
        self.head = Linear(prefix + ".head", rng, cfg.embed_dim, cfg.vocab_size)

    def params(self):
        return self.head.params()


class VisualDecoder:
    """Narrow transformer that rebuilds all patch positions from visible tokens."""

    kind = "visual"

    def __init__(self, prefix, cfg, rng, seq_len, patch_dim):
        dec = cfg.decoder_dim
        self.seq_len = seq_len
        self.patch_dim = patch_dim
        self.cls_slot = 1 if cfg.prepend_cls else 0
        self.proj = Linear(prefix + ".proj", rng, cfg.embed_dim, dec)
        self.mask_token = Parameter(prefix + ".mask_token", trunc_normal(rng, (1, 1, dec)))
        self.pos = Parameter(prefix + ".pos",
                             trunc_normal(rng, (self.cls_slot + seq_len, dec)))
        self.blocks = [Block(f"{prefix}.blocks.{i}", rng, dec, cfg.decoder_heads,
                             cfg.mlp_ratio) for i in range(cfg.decoder_depth)]
        self.ln_f = LayerNorm(prefix + ".ln_f", dec)
        self.head = Linear(prefix + ".head", rng, dec, patch_dim)

    def params(self):
        out = self.proj.params() + [self.mask_token, self.pos]
        for b in self.blocks:
            out.extend(b.params())
        out.extend(self.ln_f.params() + self.head.params())
        return out


@dataclass
class Model:
    cfg: ModelConfig
    core: EncoderCore
    mlm_head: TextDecoder
    decoders: dict = field(default_factory=dict)
    stage_id: int = 0

    def params(self, include_decoders=True):
        out = list(self.core.params()) + self.mlm_head.params()
        if include_decoders:
            for t in sorted(self.decoders):
                dec = self.decoders[t]
                if dec is not self.mlm_head:
                    out.extend(dec.params())
        # a decoder may alias mlm_head; keep names unique
        seen = set()
        uniq = []
        for p in out:
            if p.name not in seen:
                seen.add(p.name)
                uniq.append(p)
        return uniq

    def add_decoder(self, stage_id, modality, seq_len, patch_dim, seed):
        """Create the stage's fresh decoder; text stages refresh the token head."""
        rng = seeds.rng_for(seed, seeds.INIT, stage_id)
        if modality == "text":
            dec = TextDecoder("mlm_head", self.cfg, rng)
            self.mlm_head = dec
        else:
            dec = VisualDecoder(f"decoders.{stage_id}", self.cfg, rng,
                                seq_len, patch_dim)
        self.decoders[stage_id] = dec
        return dec


def init_model(cfg: ModelConfig, seed=None) -> Model:
    """Deterministic init: truncated-normal(0.02) weights, zero biases, unit LN."""
    if seed is None:
        seed = cfg.seed
    rng = seeds.rng_for(seed, seeds.INIT)
    core = EncoderCore(cfg, rng)
    mlm_head = TextDecoder("mlm_head", cfg, rng)
    return Model(cfg=cfg, core=core, mlm_head=mlm_head)


def _visible_indices(keep):
    keep = np.asarray(keep, dtype=bool)
    counts = keep.sum(axis=1)
    if counts.size == 0 or counts.min() < 1:
        raise ValueError("every sample needs at least one visible position")
    if not np.all(counts == counts[0]):
        raise ValueError("visible count must match across the batch")
    n = keep.shape[0]
    return np.nonzero(keep)[1].reshape(n, int(counts[0]))


def _front_end(core, batch):
    cfg = core.cfg
    if batch.modality == "text":
        ids = batch.ids
        if ids.max(initial=0) >= cfg.vocab_size:
            raise ValueError("token id outside vocabulary")
        x = T.embedding(core.token_embedding, ids)
        length = ids.shape[1]
    else:
        patches = Tensor(np.asarray(batch.patches, dtype=T.default_dtype()))
        x = core.patch_proj[batch.modality](patches)
        length = batch.patches.shape[1]
    table = core.pos[batch.modality]
    if length > table.shape[0]:
        raise ValueError(f"sequence length {length} exceeds positional table "
                         f"{table.shape[0]} for {batch.modality}")
    return x + T.narrow(table, 0, 0, length), length


def encode(model_or_teacher, batch, keep=None, return_layers=None):
    """Run front-end + encoder over visible positions.

    keep: bool [N, L] visibility mask (None = all visible; equal counts per
    row). Output is [N, cls+K, d] with CLS first, then visible tokens in
    original order. return_layers: 1-based block indices whose post-block
    outputs are returned alongside (for fine-tune taps).
    """
    core = model_or_teacher.core
    x, length = _front_end(core, batch)
    n = x.shape[0]
    if keep is not None:
        idx = _visible_indices(keep)
        if idx.shape[1] != length:
            x = T.take_tokens(x, idx)
    if core.cfg.prepend_cls:
        x = T.concat([T.tile0(core.cls, n), x], axis=1)
    taps = []
    want = set(return_layers or ())
    for i, block in enumerate(core.blocks, start=1):
        x = block(x)
        if i in want:
            taps.append(x)
    out = core.ln_f(x)
    if return_layers is not None:
        return out, taps
    return out


def predict_tokens(model, encoded, batch=None):
    """Vocabulary logits [N, L, V] for every token position (CLS row dropped)."""
    if batch is not None and batch.modality != "text":
        raise ValueError("token prediction applies to text batches only")
    off = 1 if model.cfg.prepend_cls else 0
    h = T.narrow(encoded, 1, off, encoded.shape[1] - off)
    return model.mlm_head.head(h)


def decode_visual(model, stage_id, encoded, keep, grid_shape=None):
    """Rebuild all L patch positions from encoded visible tokens -> [N, L, P_dim]."""
    if stage_id not in model.decoders:
        raise KeyError(f"no decoder for stage {stage_id}")
    dec = model.decoders[stage_id]
    if dec.kind != "visual":
        raise ValueError(f"stage {stage_id} decoder is not visual")
    idx = _visible_indices(keep)
    length = keep.shape[1]
    if length != dec.seq_len:
        raise ValueError(f"keep length {length} != decoder length {dec.seq_len}")
    off = dec.cls_slot
    n = encoded.shape[0]
    z = dec.proj(encoded)
    vis = T.narrow(z, 1, off, z.shape[1] - off)
    full = T.put_tokens(vis, idx, length)
    ind = np.zeros((n, length, 1), dtype=full.dtype)
    np.put_along_axis(ind, idx[:, :, None], 1.0, axis=1)
    full = full + dec.mask_token * (1.0 - ind)
    if off:
        cls_tok = T.narrow(z, 1, 0, 1)
        full = T.concat([cls_tok, full], axis=1)
    full = full + dec.pos
    for block in dec.blocks:
        full = block(full)
    full = dec.ln_f(full)
    if off:
        full = T.narrow(full, 1, off, length)
    return dec.head(full)


class FrozenTeacher:
    """Immutable copy of the encoder core; checksum pins its contents."""

    def __init__(self, core):
        self.core = core
        self.checksum = core_checksum(core)

    def recompute_checksum(self):
        return core_checksum(self.core)


def core_checksum(core) -> str:
    h = hashlib.sha256()
    for p in sorted(core.params(), key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def snapshot_teacher(model) -> FrozenTeacher:
    """Deep, gradient-free copy of the encoder core and front-ends."""
    cfg = model.cfg
    rng = seeds.rng_for(0, seeds.INIT)  # shapes only; data overwritten below
    copy = EncoderCore(cfg, rng)
    src = {p.name: p for p in model.core.params()}
    for p in copy.params():
        p.data = src[p.name].data.copy()
        p.requires_grad = False
        p.grad = np.zeros_like(p.data)
    return FrozenTeacher(copy)
