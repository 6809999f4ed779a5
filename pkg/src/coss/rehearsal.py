"""Knowledge-retention machinery: coverage-sampled buffer, input mixing,
and feature-consistency replay.

After each training stage, samples are clustered in embedding space and the
K nearest to each centroid enter the rehearsal buffer (raw file references
only; no features or logits are stored). During later stages, buffer batches
are optionally mixed within their modality, masked once, and pushed through
both the student and a frozen teacher; an MSE over the encoder outputs pulls
the student back toward its earlier representation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels, seeds
from . import model as modelmod
from . import tensor as T
from .data import batch_from_refs
from .pretext import (apply_text_mask, round_half_up, sample_text_mask,
                      sample_visual_mask)
from .tokenizers import PAD_ID, TokenBatch

log = logging.getLogger(__name__)


@dataclass
class SamplingConfig:
    cluster_fraction: float = 0.01
    per_cluster: int = 5
    max_iter: int = 100
    tol: float = 1e-4

    def cluster_count(self, n: int) -> int:
        return max(1, round_half_up(self.cluster_fraction * n))


@dataclass
class BufferEntry:
    stage: int
    slot: str
    relpath: str
    distance: float


@dataclass
class RehearsalBuffer:
    """Raw-sample references retained from completed stages."""

    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def add_stage(self, stage, slot, relpaths, distances):
        for rp, d in zip(relpaths, distances):
            self.entries.append(BufferEntry(stage, slot, rp, float(d)))

    def slots(self):
        seen = []
        for e in self.entries:
            if e.slot not in seen:
                seen.append(e.slot)
        return seen

    def group_by_slot(self):
        groups = {}
        for e in self.entries:
            groups.setdefault(e.slot, []).append(e)
        return groups

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(f"{e.stage}\t{e.slot}\t{e.relpath}\t{e.distance:.8e}\n")

    @classmethod
    def load(cls, path):
        buf = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno + 1}: expected 4 fields")
                buf.entries.append(BufferEntry(int(parts[0]), parts[1], parts[2],
                                               float(parts[3])))
        return buf


# ---------------------------------------------------------------------------
# embedding extraction and clustering


def extract_embeddings(model, batches):
    """Mean-pool full-visibility encoder outputs (CLS included) per sample."""
    rows = []
    with T.no_grad():
        for batch in batches:
            out = modelmod.encode(model, batch)
            rows.append(out.data.mean(axis=1))
    if not rows:
        raise ValueError("cannot extract embeddings from an empty dataset")
    return np.concatenate(rows, axis=0)


def kmeans(embeddings, n_clusters, cfg: SamplingConfig, seed=0,
           return_history=False):
    """Lloyd iterations with seeded k-means++ init.

    Stops at max_iter or when the largest centroid shift drops below tol.
    Empty clusters re-seed to the point currently farthest from its assigned
    centroid. Deterministic per seed.
    """
    x = np.asarray(embeddings)
    n = x.shape[0]
    if not 1 <= n_clusters <= n:
        raise ValueError(f"need 1 <= clusters <= {n}, got {n_clusters}")
    if isinstance(seed, tuple):
        rng = seeds.rng_for(seed[0], seeds.KMEANS, *seed[1:])
    else:
        rng = seeds.rng_for(seed, seeds.KMEANS)

    centroids = np.empty((n_clusters, x.shape[1]), dtype=x.dtype)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    for c in range(1, n_clusters):
        d2 = kernels.min_sqdist(x, centroids[:c])
        total = d2.sum()
        if total <= 0:
            centroids[c] = x[int(rng.integers(n))]
            continue
        centroids[c] = x[int(rng.choice(n, p=d2 / total))]

    history = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(cfg.max_iter):
        d2 = kernels.pairwise_sqdist(x, centroids)
        assign = d2.argmin(axis=1)
        point_d2 = np.take_along_axis(d2, assign[:, None], axis=1)[:, 0]
        history.append(float(point_d2.sum()))
        new_centroids = centroids.copy()
        for c in range(n_clusters):
            members = assign == c
            if members.any():
                new_centroids[c] = x[members].mean(axis=0)
            else:
                far = int(point_d2.argmax())
                new_centroids[c] = x[far]
                point_d2[far] = 0.0
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < cfg.tol:
            break
    d2 = kernels.pairwise_sqdist(x, centroids)
    assign = d2.argmin(axis=1)
    if return_history:
        return centroids, assign, history
    return centroids, assign


def select_buffer_samples(embeddings, centroids, assignments, per_cluster,
                          return_distances=False):
    """The K members nearest each centroid (ties to the lower index), sorted."""
    x = np.asarray(embeddings)
    assignments = np.asarray(assignments)
    d2_all = ((x - centroids[assignments]) ** 2).sum(axis=1)
    chosen = []
    for c in range(centroids.shape[0]):
        members = np.nonzero(assignments == c)[0]
        if members.size == 0:
            continue
        order = sorted(members, key=lambda i: (d2_all[i], i))
        chosen.extend(order[:per_cluster])
    indices = sorted(set(chosen))
    if return_distances:
        return indices, np.sqrt(d2_all[indices])
    return indices


def sample_from_dataset(model, ds, refs, vocab, tok_cfg,
                        cfg: SamplingConfig, seed, batch_size=32):
    """Stage-end buffer sampling: embed, cluster, pick nearest-to-center.

    Returns (selected refs, Euclidean selection distances) in index order.
    """
    batches = [batch_from_refs(ds.root, refs[i:i + batch_size], vocab, tok_cfg)
               for i in range(0, len(refs), batch_size)]
    emb = extract_embeddings(model, batches)
    n_clusters = cfg.cluster_count(len(refs))
    centroids, assign = kmeans(emb, n_clusters, cfg, seed=seed)
    idx, dists = select_buffer_samples(emb, centroids, assign, cfg.per_cluster,
                                       return_distances=True)
    return [refs[i] for i in idx], dists


# ---------------------------------------------------------------------------
# intra-modal input mixing


@dataclass
class MixInfo:
    partner: np.ndarray
    lam: np.ndarray
    tau: float | None
    perm: np.ndarray


def binary_mixup(batch: TokenBatch, rng, tau=None, return_info=False):
    """Element-wise binary blend of a text batch with a row shuffle of itself.

    Draw order is fixed: row permutation, then the batch-wide threshold tau,
    then one uniform per element; an element keeps its own id where the
    uniform is >= tau, otherwise takes the partner's id at that position.
    """
    if batch.modality != "text":
        raise ValueError("binary mixing applies to text batches")
    ids = batch.ids
    n, length = ids.shape
    perm = rng.permutation(n)
    partner = ids[perm]
    if tau is None:
        tau = float(rng.random())
    u = rng.random(size=(n, length))
    lam = (u >= tau).astype(np.int64)
    mixed = np.where(lam == 1, ids, partner)
    out = TokenBatch("text", ids=mixed, valid=mixed != PAD_ID)
    if return_info:
        return out, MixInfo(partner=partner, lam=lam, tau=tau, perm=perm)
    return out


def continual_mixup(batch: TokenBatch, rng, lam=None, return_info=False):
    """Per-sample convex blend of a visual batch with a row shuffle of itself."""
    if batch.modality == "text":
        raise ValueError("convex mixing applies to visual batches")
    patches = batch.patches
    n = patches.shape[0]
    perm = rng.permutation(n)
    partner = patches[perm]
    if lam is None:
        lam = rng.random(size=n)
    lam = np.asarray(lam, dtype=patches.dtype)
    lam_b = lam[:, None, None]
    mixed = lam_b * patches + (1.0 - lam_b) * partner
    out = TokenBatch(batch.modality, patches=mixed, grid_shape=batch.grid_shape)
    if return_info:
        return out, MixInfo(partner=partner, lam=lam, tau=None, perm=perm)
    return out


def mix_batch(batch, rng):
    if batch.modality == "text":
        return binary_mixup(batch, rng)
    return continual_mixup(batch, rng)


# ---------------------------------------------------------------------------
# feature-consistency replay loss


def fd_loss(model, teacher, batch: TokenBatch, rng, text_ratio=0.15,
            visual_ratio=0.75, imm=True, shared_mask=True):
    """MSE between student and frozen-teacher encoder outputs on a buffer batch.

    The batch is mixed within its modality (when imm is on), masked with one
    fresh plan shared by both paths (unless shared_mask is off), and encoded
    by both networks. Gradients reach only the student's encoder and
    front-ends; no decoder participates in this graph.
    """
    mixed = mix_batch(batch, rng) if imm else batch
    if mixed.modality == "text":
        plan_s = sample_text_mask(mixed, ratio=text_ratio, rng=rng)
        plan_t = plan_s if shared_mask else sample_text_mask(mixed, ratio=text_ratio,
                                                             rng=rng)
        student = modelmod.encode(model, apply_text_mask(mixed, plan_s))
        teacher_out = modelmod.encode(teacher, apply_text_mask(mixed, plan_t))
    else:
        plan_s = sample_visual_mask(mixed, ratio=visual_ratio, rng=rng)
        plan_t = plan_s if shared_mask else sample_visual_mask(mixed,
                                                               ratio=visual_ratio,
                                                               rng=rng)
        student = modelmod.encode(model, mixed, keep=plan_s.keep)
        teacher_out = modelmod.encode(teacher, mixed, keep=plan_t.keep)
    diff = student - teacher_out.data
    return (diff * diff).mean()
