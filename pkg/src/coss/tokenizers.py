"""Turn raw 1D text, 2D images, and 3D volumes into fixed-length token rows.

Text uses a frequency-ranked word vocabulary with reserved special ids;
visual data is cut into non-overlapping patches flattened row-major. Both
directions are exact: unpatchify(patchify(x)) returns x bit for bit.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
MASK_ID = 1
CLS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[CLS]", "[UNK]")

MODALITIES = ("text", "image2d", "volume3d")


@dataclass
class TokenizerConfig:
    text_len: int = 112
    image_size: tuple = (224, 224)
    volume_size: tuple = (16, 192, 192)
    patch2d: tuple = (16, 16)
    patch3d: tuple = (16, 16, 16)
    channels: int = 1

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.volume_size = tuple(self.volume_size)
        self.patch2d = tuple(self.patch2d)
        self.patch3d = tuple(self.patch3d)
        for extents, patch, kind in ((self.image_size, self.patch2d, "image"),
                                     (self.volume_size, self.patch3d, "volume")):
            for axis, (e, p) in enumerate(zip(extents, patch)):
                if e % p != 0:
                    raise ValueError(
                        f"{kind} extent {e} on axis {axis} not divisible by patch {p}")

    def grid_shape(self, modality):
        if modality == "image2d":
            return tuple(e // p for e, p in zip(self.image_size, self.patch2d))
        if modality == "volume3d":
            return tuple(e // p for e, p in zip(self.volume_size, self.patch3d))
        raise ValueError(f"no patch grid for modality {modality!r}")

    def seq_len(self, modality):
        if modality == "text":
            return self.text_len
        g = self.grid_shape(modality)
        return int(np.prod(g))

    def patch_dim(self, modality):
        patch = self.patch2d if modality == "image2d" else self.patch3d
        return int(np.prod(patch)) * self.channels


class Vocabulary:
    """Word -> id map with reserved ids PAD=0, MASK=1, CLS=2, UNK=3."""

    def __init__(self, words):
        self.id_to_token = list(SPECIAL_TOKENS) + list(words)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self):
        return len(self.id_to_token)

    def __len__(self):
        return self.size

    def lookup(self, word):
        return self.token_to_id.get(word, UNK_ID)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.id_to_token):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path):
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    tok, idx = line.split("\t")
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno + 1}: expected token<TAB>id") from exc
                if int(idx) != len(tokens):
                    raise ValueError(f"{path}:{lineno + 1}: ids not dense/ordered")
                tokens.append(tok)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: special tokens missing or out of order")
        return cls(tokens[4:])


def build_vocab(corpus, max_size):
    """Frequency-ranked word vocabulary (ties alphabetical), capped at max_size."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text in corpus:
        for w in text.split():
            if w not in SPECIAL_TOKENS:
                counts[w] += 1
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(ranked[:max_size - len(SPECIAL_TOKENS)])


@dataclass
class TokenBatch:
    """A single-modality batch: id rows for text, flat patch rows for visual."""

    modality: str
    ids: np.ndarray | None = None
    patches: np.ndarray | None = None
    grid_shape: tuple | None = None
    valid: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if (self.ids is None) == (self.patches is None):
            raise ValueError("exactly one of ids/patches must be set")
        if self.modality == "text":
            if self.ids is None:
                raise ValueError("text batches carry ids")
            if self.ids.min(initial=0) < 0:
                raise ValueError("negative token id")
        elif self.patches is None:
            raise ValueError("visual batches carry patches")

    @property
    def n(self):
        arr = self.ids if self.ids is not None else self.patches
        return arr.shape[0]

    @property
    def length(self):
        arr = self.ids if self.ids is not None else self.patches
        return arr.shape[1]


def tokenize_text(text, vocab, cfg):
    """One length-``cfg.text_len`` row: [CLS] + word ids, PAD-filled, truncating."""
    ids = np.full(cfg.text_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    words = text.split()[:cfg.text_len - 1]
    for k, w in enumerate(words):
        ids[k + 1] = vocab.lookup(w)
    valid = ids != PAD_ID
    return TokenBatch("text", ids=ids[None, :], valid=valid[None, :])


def tokenize_texts(texts, vocab, cfg):
    rows = [tokenize_text(t, vocab, cfg) for t in texts]
    return TokenBatch("text",
                      ids=np.concatenate([r.ids for r in rows], axis=0),
                      valid=np.concatenate([r.valid for r in rows], axis=0))


def _check_extents(shape, expect, patch, kind):
    if tuple(shape) != tuple(expect):
        raise ValueError(f"{kind} shape {tuple(shape)} != configured {tuple(expect)}")
    for axis, (e, p) in enumerate(zip(shape, patch)):
        if e % p != 0:
            raise ValueError(f"{kind} extent {e} on axis {axis} not divisible by patch {p}")


def patchify(x, cfg, modality):
    """Cut one image/volume into row-major flat patches -> TokenBatch with N=1."""
    x = np.asarray(x)
    if modality == "image2d":
        if x.ndim == 2:
            x = x[..., None]
        _check_extents(x.shape[:2], cfg.image_size, cfg.patch2d, "image")
        ph, pw = cfg.patch2d
        gh, gw = x.shape[0] // ph, x.shape[1] // pw
        c = x.shape[2]
        patches = (x.reshape(gh, ph, gw, pw, c)
                    .transpose(0, 2, 1, 3, 4)
                    .reshape(gh * gw, ph * pw * c))
        grid = (gh, gw)
    elif modality == "volume3d":
        if x.ndim == 3:
            x = x[..., None]
        _check_extents(x.shape[:3], cfg.volume_size, cfg.patch3d, "volume")
        pd, ph, pw = cfg.patch3d
        gd, gh, gw = (x.shape[0] // pd, x.shape[1] // ph, x.shape[2] // pw)
        c = x.shape[3]
        patches = (x.reshape(gd, pd, gh, ph, gw, pw, c)
                    .transpose(0, 2, 4, 1, 3, 5, 6)
                    .reshape(gd * gh * gw, pd * ph * pw * c))
        grid = (gd, gh, gw)
    else:
        raise ValueError(f"patchify handles visual modalities, not {modality!r}")
    return TokenBatch(modality, patches=np.ascontiguousarray(patches)[None, ...],
                      grid_shape=grid)


def unpatchify(patches, grid_shape, cfg, modality):
    """Invert patchify for one sample; bit-exact round trip."""
    patches = np.asarray(patches)
    if patches.ndim == 3:
        if patches.shape[0] != 1:
            raise ValueError("unpatchify takes one sample at a time")
        patches = patches[0]
    c = cfg.channels
    if modality == "image2d":
        gh, gw = grid_shape
        ph, pw = cfg.patch2d
        x = (patches.reshape(gh, gw, ph, pw, c)
                     .transpose(0, 2, 1, 3, 4)
                     .reshape(gh * ph, gw * pw, c))
    elif modality == "volume3d":
        gd, gh, gw = grid_shape
        pd, ph, pw = cfg.patch3d
        x = (patches.reshape(gd, gh, gw, pd, ph, pw, c)
                     .transpose(0, 3, 1, 4, 2, 5, 6)
                     .reshape(gd * pd, gh * ph, gw * pw, c))
    else:
        raise ValueError(f"unpatchify handles visual modalities, not {modality!r}")
    if c == 1:
        x = x[..., 0]
    return np.ascontiguousarray(x)


def stack_visual(samples, cfg, modality):
    """Patchify a list of same-shape samples into one TokenBatch [N, L, P_dim]."""
    rows = [patchify(s, cfg, modality) for s in samples]
    return TokenBatch(modality,
                      patches=np.concatenate([r.patches for r in rows], axis=0),
                      grid_shape=rows[0].grid_shape)
