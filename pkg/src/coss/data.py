"""Synthetic multi-modal corpus generation and binary tensor I/O.

Five default sample streams: one Markov-chain text slot, two 2D image
families, and two 3D volume families. Families within a rank differ in
texture and mean intensity so stage transitions are real distribution
shifts. Everything is reproducible: per-sample seeds derive from
(master seed, slot, index), and generated trees are byte-identical per seed.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import seeds
from .errors import BadMagicError, BadVersionError, FormatError, TruncatedFileError

TENSOR_MAGIC = b"COSSTNSR"
TENSOR_VERSION = 1
_DTYPE_TAGS = {1: "<f4", 2: "<f8", 3: "<i8", 4: "|u1"}
_TAG_FOR = {np.dtype(v): k for k, v in _DTYPE_TAGS.items()}

DEFAULT_SLOTS = ("text", "image2d", "volume3d-a", "volume3d-b", "image2d-b")


def modality_kind(slot: str) -> str:
    """Map a slot name like 'image2d-b' to its rank kind 'image2d'."""
    kind = slot.split("-")[0]
    if kind not in ("text", "image2d", "volume3d"):
        raise ValueError(f"cannot infer modality kind from slot {slot!r}")
    return kind


# ---------------------------------------------------------------------------
# tensor files


def write_tensor(path, tensor):
    arr = np.asarray(getattr(tensor, "data", tensor))
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    tag = _TAG_FOR.get(arr.dtype)
    if tag is None:
        raise FormatError(f"unsupported dtype {arr.dtype} for tensor file")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", TENSOR_VERSION))
        fh.write(struct.pack("<BB", tag, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"file ended inside {what}")
    return buf


def read_tensor(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(TENSOR_MAGIC), "magic")
        if magic != TENSOR_MAGIC:
            raise BadMagicError(f"expected {TENSOR_MAGIC!r}, found {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != TENSOR_VERSION:
            raise BadVersionError(f"unsupported tensor-file version {version}")
        tag, rank = struct.unpack("<BB", _read_exact(fh, 2, "header"))
        if tag not in _DTYPE_TAGS:
            raise FormatError(f"unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
        dt = np.dtype(_DTYPE_TAGS[tag])
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = _read_exact(fh, count * dt.itemsize, "payload")
        if fh.read(1):
            raise FormatError("trailing bytes after payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    counts: dict = field(default_factory=lambda: {
        "text": 120, "image2d": 80, "volume3d-a": 60,
        "volume3d-b": 60, "image2d-b": 80,
    })
    image_size: tuple = (224, 224)
    volume_size: tuple = (16, 192, 192)
    text_states: int = 60
    text_words: tuple = (8, 40)
    n_classes: int = 3
    noise_sigma: float = 0.05
    intensity_offset: float = 1.5

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.volume_size = tuple(self.volume_size)
        self.text_words = tuple(self.text_words)
        for slot in self.counts:
            modality_kind(slot)  # validates the name
        if self.n_classes < 2 or self.n_classes > 3:
            raise ValueError("n_classes must be 2 or 3 (shape kinds)")


@dataclass
class SampleRef:
    index: int
    slot: str
    relpath: str
    label: str

    @property
    def kind(self):
        return modality_kind(self.slot)

    @property
    def class_id(self):
        if self.label == "-":
            raise ValueError(f"sample {self.index} has no label")
        return int(self.label)


def mask_relpath(relpath: str) -> str:
    """Segmentation target lives next to the sample with a _mask suffix."""
    stem, ext = os.path.splitext(relpath)
    return f"{stem}_mask{ext}"


# -- text ----------------------------------------------------------------


def _class_chains(spec, seed, slot_idx):
    """One sparse row-stochastic transition matrix per class."""
    rng = seeds.rng_for(seed, seeds.DATA, slot_idx, 10_000)
    chains = []
    for _ in range(spec.n_classes):
        mat = np.zeros((spec.text_states, spec.text_states))
        for s in range(spec.text_states):
            succ = rng.choice(spec.text_states, size=3, replace=False)
            weights = rng.dirichlet(np.ones(3) * 0.5)
            mat[s, succ] = weights
        chains.append(mat)
    return chains


def _gen_text(spec, rng, chain):
    n_words = int(rng.integers(spec.text_words[0], spec.text_words[1] + 1))
    state = int(rng.integers(spec.text_states))
    words = []
    for _ in range(n_words):
        words.append(f"w{state:03d}")
        state = int(rng.choice(spec.text_states, p=chain[state]))
    return " ".join(words)


# -- 2D ------------------------------------------------------------------


def _shape_mask_2d(kind, h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:  # disc
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:  # square
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    bar = max(1, int(round(r / 2)))  # cross
    return ((np.abs(yy - cy) <= bar) & (np.abs(xx - cx) <= r)) | \
           ((np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= bar))


def _place_2d(rng, spec, h, w):
    r = int(round(rng.uniform(0.15, 0.3) * min(h, w)))
    r = max(2, r)
    cy = int(rng.integers(r, h - r)) if h > 2 * r else h // 2
    cx = int(rng.integers(r, w - r)) if w > 2 * r else w // 2
    return cy, cx, r


def _gen_image(spec, rng, family, class_id):
    h, w = spec.image_size
    base = 0.0 if family == 0 else spec.intensity_offset
    yy, xx = np.mgrid[0:h, 0:w]
    if family == 0:
        sy = rng.uniform(-0.5, 0.5) / max(h - 1, 1)
        sx = rng.uniform(-0.5, 0.5) / max(w - 1, 1)
        img = base + sy * (yy - (h - 1) / 2) + sx * (xx - (w - 1) / 2)
    else:
        period = rng.uniform(2.0, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        img = base + 0.3 * np.sin(2 * np.pi * xx / period + phase) \
                   * np.cos(2 * np.pi * yy / period)
    cy, cx, r = _place_2d(rng, spec, h, w)
    mask = _shape_mask_2d(class_id, h, w, cy, cx, r)
    img = img + 0.9 * mask
    dy, dx, dr = _place_2d(rng, spec, h, w)
    distractor = _shape_mask_2d(int(rng.integers(spec.n_classes)), h, w, dy, dx,
                                max(2, dr // 2))
    img = img + 0.4 * distractor
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return img.astype(np.float32), mask.astype(np.uint8)


# -- 3D ------------------------------------------------------------------


def _shape_mask_3d(kind, d, h, w, cz, cy, cx, r):
    zz, yy, xx = np.mgrid[0:d, 0:h, 0:w]
    if kind == 0:  # ball
        return (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:  # cube
        return (np.abs(zz - cz) <= r) & (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    bar = max(1, int(round(r / 2)))  # 3D cross
    near = (np.abs(zz - cz) <= bar) & (np.abs(yy - cy) <= bar)
    return (near & (np.abs(xx - cx) <= r)) | \
           ((np.abs(zz - cz) <= bar) & (np.abs(xx - cx) <= bar) & (np.abs(yy - cy) <= r)) | \
           ((np.abs(yy - cy) <= bar) & (np.abs(xx - cx) <= bar) & (np.abs(zz - cz) <= r))


def _gen_volume(spec, rng, family, class_id):
    d, h, w = spec.volume_size
    base = 0.0 if family == 0 else spec.intensity_offset
    zz, yy, xx = np.mgrid[0:d, 0:h, 0:w]
    if family == 0:
        sz = rng.uniform(-0.5, 0.5) / max(d - 1, 1)
        sy = rng.uniform(-0.5, 0.5) / max(h - 1, 1)
        vol = base + sz * (zz - (d - 1) / 2) + sy * (yy - (h - 1) / 2)
    else:
        period = rng.uniform(2.0, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        vol = base + 0.3 * np.sin(2 * np.pi * xx / period + phase) \
                   * np.cos(2 * np.pi * zz / max(period, 2.0))
    rmax = min(d, h, w)
    r = max(1, int(round(rng.uniform(0.15, 0.3) * rmax)))
    cz = int(rng.integers(r, d - r)) if d > 2 * r else d // 2
    cy = int(rng.integers(r, h - r)) if h > 2 * r else h // 2
    cx = int(rng.integers(r, w - r)) if w > 2 * r else w // 2
    mask = _shape_mask_3d(class_id, d, h, w, cz, cy, cx, r)
    vol = vol + 0.9 * mask
    vol = vol + rng.normal(0.0, spec.noise_sigma, size=vol.shape)
    return vol.astype(np.float32), mask.astype(np.uint8)


# -- driver --------------------------------------------------------------


def generate_corpus(spec, out_dir, seed):
    """Write the dataset tree and manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    slot_order = list(spec.counts)
    rows = []
    index = 0
    for slot_idx, slot in enumerate(slot_order):
        kind = modality_kind(slot)
        slot_dir = os.path.join(out_dir, slot)
        os.makedirs(slot_dir, exist_ok=True)
        chains = _class_chains(spec, seed, slot_idx) if kind == "text" else None
        family = 0 if not slot.endswith("-b") else 1
        for i in range(spec.counts[slot]):
            rng = seeds.rng_for(seed, seeds.DATA, slot_idx, i)
            class_id = int(rng.integers(spec.n_classes))
            if kind == "text":
                relpath = f"{slot}/{i:06d}.txt"
                line = _gen_text(spec, rng, chains[class_id])
                with open(os.path.join(out_dir, relpath), "w", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            else:
                relpath = f"{slot}/{i:06d}.tnsr"
                if kind == "image2d":
                    sample, mask = _gen_image(spec, rng, family, class_id)
                else:
                    sample, mask = _gen_volume(spec, rng, family, class_id)
                write_tensor(os.path.join(out_dir, relpath), sample)
                write_tensor(os.path.join(out_dir, mask_relpath(relpath)), mask)
            rows.append((index, slot, relpath, str(class_id)))
            index += 1
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")
    return manifest


def load_manifest(path):
    refs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno + 1}: expected 4 tab-separated fields")
            refs.append(SampleRef(int(parts[0]), parts[1], parts[2], parts[3]))
    return refs


def load_sample(root, ref):
    """Text samples load as str, visual samples as float32 arrays."""
    path = os.path.join(root, ref.relpath)
    if ref.kind == "text":
        with open(path, encoding="utf-8") as fh:
            return fh.read().strip()
    return read_tensor(path)


def load_mask(root, ref):
    if ref.kind == "text":
        raise ValueError("text samples have no segmentation target")
    return read_tensor(os.path.join(root, mask_relpath(ref.relpath)))


def batch_from_refs(root, refs, vocab, tok_cfg):
    """Tokenize a same-slot group of manifest refs into one TokenBatch."""
    from . import tokenizers as tok

    slots = {r.slot for r in refs}
    if len(slots) != 1:
        raise ValueError(f"refs span multiple slots: {sorted(slots)}")
    kind = refs[0].kind
    if kind == "text":
        texts = [load_sample(root, r) for r in refs]
        return tok.tokenize_texts(texts, vocab, tok_cfg)
    samples = [load_sample(root, r) for r in refs]
    return tok.stack_visual(samples, tok_cfg, kind)


class Dataset:
    """Manifest-backed view of a generated tree, grouped by slot."""

    def __init__(self, root, manifest_path=None):
        self.root = root
        self.refs = load_manifest(manifest_path or os.path.join(root, "manifest.tsv"))
        self.by_slot = {}
        for ref in self.refs:
            self.by_slot.setdefault(ref.slot, []).append(ref)

    def slots(self):
        return list(self.by_slot)

    def samples_for(self, slot):
        return self.by_slot[slot]

    def load(self, ref):
        return load_sample(self.root, ref)

    def load_all(self, slot):
        return [load_sample(self.root, r) for r in self.by_slot[slot]]
