"""Top-level acceptance checks for the continual pre-training system.

Each test covers one numbered contract item and prints one verdict line,
"criterion NN [name]: PASS|FAIL (elapsed)", straight to the real stdout so
the verdicts stay visible under pytest's capture. Tolerances are pinned
inline; every criterion also pins a wall-clock budget.
"""

import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

import coss.finetune as F
import coss.metrics as M
import coss.pretext as P
import coss.rehearsal as R
import coss.scheduler as sched
import coss.tensor as T
from coss.data import DEFAULT_SLOTS, Dataset, SyntheticSpec, generate_corpus, load_sample
from coss.model import ModelConfig, init_model, snapshot_teacher
from coss.optim import AdamW, AdamWConfig
from coss.rehearsal import SamplingConfig
from coss.scheduler import StagePlan, StageSpec, TrainerConfig, TrainState
from coss.tokenizers import CLS_ID, PAD_ID, TokenBatch, TokenizerConfig, build_vocab


class criterion:
    """Context guard that prints the verdict line and enforces the budget."""

    def __init__(self, num, name, budget_s):
        self.num, self.name, self.budget = num, name, budget_s

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        ok = exc_type is None and elapsed < self.budget
        print(f"criterion {self.num:02d} [{self.name}]: "
              f"{'PASS' if ok else 'FAIL'} ({elapsed:.1f}s / {self.budget:.0f}s)",
              file=sys.__stdout__, flush=True)
        if exc_type is None and elapsed >= self.budget:
            raise AssertionError(
                f"criterion {self.num} over budget: {elapsed:.1f}s")
        return False


TOK = TokenizerConfig(text_len=12, image_size=(8, 8), volume_size=(4, 8, 8),
                      patch2d=(4, 4), patch3d=(2, 4, 4))


def tiny_model_cfg(vocab_size, **kw):
    base = dict(embed_dim=16, depth=2, heads=2, decoder_dim=8,
                decoder_depth=1, decoder_heads=2, vocab_size=vocab_size,
                pos_lengths={"text": 12, "image2d": 4, "volume3d": 8},
                patch_dims={"image2d": 16, "volume3d": 32})
    base.update(kw)
    return ModelConfig(**base)


def _make_corpus(tmp_path_factory, name, counts, seed, image_size=(8, 8)):
    root = tmp_path_factory.mktemp(name)
    spec = SyntheticSpec(counts=counts, image_size=image_size,
                         volume_size=(4, 8, 8), text_states=20,
                         text_words=(3, 8))
    generate_corpus(spec, root, seed=seed)
    ds = Dataset(root)
    if "text" in ds.by_slot:
        texts = [load_sample(root, r) for r in ds.samples_for("text")]
        vocab = build_vocab(texts, max_size=64)
    else:
        from coss.tokenizers import Vocabulary
        vocab = Vocabulary([])
    return ds, vocab


@pytest.fixture(scope="module")
def corpus2(tmp_path_factory):
    return _make_corpus(tmp_path_factory, "acc2",
                        {"text": 40, "image2d": 16}, seed=11)


@pytest.fixture(scope="module")
def corpus5(tmp_path_factory):
    return _make_corpus(tmp_path_factory, "acc5",
                        {slot: 8 for slot in DEFAULT_SLOTS}, seed=21)


@pytest.fixture(scope="module")
def corpus_cls(tmp_path_factory):
    # 24x24 canvas: shape radii land in 4..7 so the three classes are
    # geometrically distinct (at 8x8 the radius clamps to 2 and the
    # distractor is the same size as the target).
    return _make_corpus(tmp_path_factory, "acccls",
                        {"text": 100, "image2d": 200}, seed=31,
                        image_size=(24, 24))


@pytest.fixture(scope="module")
def corpus_sweep(tmp_path_factory):
    return _make_corpus(tmp_path_factory, "accsweep",
                        {"text": 100, "image2d": 40}, seed=41)


def _retention(logs, stage, eval_stage):
    for row in logs["retention"]:
        if row["stage"] == stage and row["eval_stage"] == eval_stage:
            return row["loss"]
    raise KeyError((stage, eval_stage))


def _medcoss_trainer(seed):
    return TrainerConfig(optimizer=AdamWConfig(), sampling=SamplingConfig(),
                         seed=seed)


# -- criterion 1: mixup formula oracles ----------------------------------


def test_c01_mixup_formula_oracles():
    with criterion(1, "mixup formula oracles", 5.0):
        rng = np.random.default_rng(101)
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            length = int(rng.integers(2, 13))
            ids = rng.integers(4, 40, size=(n, length)).astype(np.int64)
            batch = TokenBatch("text", ids=ids, valid=ids != PAD_ID)
            mixed, info = R.binary_mixup(batch, np.random.default_rng(int(
                rng.integers(1 << 30))), return_info=True)
            # binary blend: keep own id where lambda is 1, partner's where 0
            want = info.lam * ids + (1 - info.lam) * info.partner
            assert np.array_equal(mixed.ids, want)          # exact, integer ids
            assert np.array_equal(info.partner, ids[info.perm])
            assert np.array_equal(info.lam, (info.lam != 0).astype(np.int64))

            d = int(rng.integers(1, 6))
            patches = rng.normal(size=(n, length, d)).astype(np.float32)
            vb = TokenBatch("image2d", patches=patches, grid_shape=(1, length))
            vm, vi = R.continual_mixup(vb, np.random.default_rng(int(
                rng.integers(1 << 30))), return_info=True)
            lam = vi.lam[:, None, None]
            want_v = lam * patches + (1.0 - lam) * vi.partner
            assert np.max(np.abs(vm.patches - want_v)) <= 1e-6


# -- criterion 2: mask-ratio exactness -----------------------------------


def test_c02_mask_ratio_exactness():
    with criterion(2, "mask-ratio exactness", 5.0):
        def rhu(x):
            return int(np.floor(x + 0.5))

        # the two canonical grid sizes
        for length, want in ((196, 147), (144, 108)):
            patches = np.zeros((3, length, 4), dtype=np.float32)
            vb = TokenBatch("image2d", patches=patches, grid_shape=(1, length))
            plan = P.sample_visual_mask(vb, ratio=0.75, seed=0)
            assert rhu(0.75 * length) == want
            assert (plan.grid.sum(axis=1) == want).all()

        rng = np.random.default_rng(202)
        for _ in range(1000):
            n = int(rng.integers(1, 5))
            length = int(rng.integers(3, 13))
            ids = rng.integers(4, 40, size=(n, length)).astype(np.int64)
            ids[:, 0] = CLS_ID
            for i in range(n):
                n_pad = int(rng.integers(0, length - 1))
                if n_pad:
                    ids[i, length - n_pad:] = PAD_ID
            batch = TokenBatch("text", ids=ids, valid=ids != PAD_ID)
            plan = P.sample_text_mask(batch, ratio=0.15,
                                      rng=np.random.default_rng(int(
                                          rng.integers(1 << 30))))
            eligible = (ids != PAD_ID) & (ids != CLS_ID)
            for i in range(n):
                e = int(eligible[i].sum())
                want = 0 if e == 0 else min(e, max(1, rhu(0.15 * e)))
                assert int(plan.grid[i].sum()) == want
                assert not plan.grid[i][~eligible[i]].any()

            patches = np.zeros((2, int(rng.integers(2, 41)), 3),
                               dtype=np.float32)
            vb = TokenBatch("image2d", patches=patches,
                            grid_shape=(1, patches.shape[1]))
            vplan = P.sample_visual_mask(vb, ratio=0.75,
                                         rng=np.random.default_rng(int(
                                             rng.integers(1 << 30))))
            lv = patches.shape[1]
            want = min(lv - 1, max(1, rhu(0.75 * lv)))
            assert (vplan.grid.sum(axis=1) == want).all()


# -- criterion 3: buffer arithmetic and ratio sweep ----------------------


def test_c03_buffer_arithmetic_and_sweep(corpus_sweep):
    with criterion(3, "buffer arithmetic and ratio sweep", 600.0):
        cfg = SamplingConfig()
        assert cfg.cluster_count(1000) == 10

        rng = np.random.default_rng(303)
        emb = rng.normal(size=(1000, 8))
        centroids, assign = R.kmeans(emb, cfg.cluster_count(1000), cfg, seed=0)
        kept = R.select_buffer_samples(emb, centroids, assign,
                                       cfg.per_cluster)
        assert len(kept) == 50                       # 1% clusters x 5 kept
        assert len(set(kept)) == 50

        ds, vocab = corpus_sweep
        plan = StagePlan([StageSpec("text", 2), StageSpec("image2d", 2)],
                         batch_size=8, warmup_epochs=1, peak_lr=1e-3)
        for ratio in (0.01, 0.05, 0.10):
            trainer = replace(
                _medcoss_trainer(0),
                sampling=SamplingConfig(cluster_fraction=ratio / 5))
            model, buffer, logs = sched.run_pipeline(
                plan, ds, tiny_model_cfg(vocab.size), trainer, vocab, TOK)
            n_text = len(ds.samples_for("text"))
            want = min(n_text,
                       trainer.sampling.cluster_count(n_text) * 5)
            text_kept = [e for e in buffer.entries if e.slot == "text"]
            assert len(text_kept) == want
            assert all(np.isfinite(row["loss"]) for row in logs["metrics"])


# -- criterion 4: selection equals the exhaustive oracle -----------------


def _oracle_select(x, centroids, assign, k):
    chosen = []
    for c in range(centroids.shape[0]):
        members = np.nonzero(assign == c)[0]
        if members.size == 0:
            continue
        d2 = ((x[members] - centroids[c]) ** 2).sum(axis=1)
        order = sorted(range(members.size), key=lambda j: (d2[j], members[j]))
        chosen.extend(int(members[j]) for j in order[:k])
    return sorted(chosen)


def test_c04_selection_equivalence():
    with criterion(4, "cluster selection equivalence", 30.0):
        rng = np.random.default_rng(404)
        cfg = SamplingConfig()
        for _ in range(50):
            n = int(rng.integers(20, 201))
            d = int(rng.integers(2, 17))
            x = rng.normal(size=(n, d))
            if rng.random() < 0.3:          # force duplicates and ties
                x = np.round(x * 2) / 2
            c = int(rng.integers(1, min(8, n // 5) + 1))
            centroids, assign = R.kmeans(x, c, cfg, seed=int(rng.integers(99)))
            got = R.select_buffer_samples(x, centroids, assign,
                                          cfg.per_cluster)
            assert list(got) == _oracle_select(x, centroids, assign,
                                               cfg.per_cluster)


# -- criterion 5: gradient integrity of every loss -----------------------


TOK_G = TokenizerConfig(text_len=8, image_size=(4, 4), volume_size=(2, 4, 4),
                        patch2d=(2, 2), patch3d=(1, 2, 2))


def _grad_check(params, f, loss_tensor, rng, n_coords=6, h_scale=1e-6,
                tol=1e-3):
    grads = T.grad_of(loss_tensor, params)
    cand = []
    for p in params:
        flat = grads[p.name].ravel()
        idx = np.nonzero(np.abs(flat) > 1e-7)[0]
        cand.extend((p, int(i)) for i in idx)
    assert len(cand) >= n_coords, "too few live gradient coordinates"
    picks = [cand[i] for i in rng.choice(len(cand), size=n_coords,
                                         replace=False)]
    worst = 0.0
    for p, i in picks:
        orig = p.data.flat[i]
        h = h_scale * max(1.0, abs(orig))
        p.data.flat[i] = orig + h
        up = f()
        p.data.flat[i] = orig - h
        down = f()
        p.data.flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        analytic = grads[p.name].flat[i]
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, rel)
        assert rel < tol, f"{p.name}[{i}]: {analytic} vs {numeric}"
    return worst


def test_c05_gradient_integrity():
    with criterion(5, "loss gradient integrity", 120.0):
        with T.dtype_scope(np.float64):
            cfg = ModelConfig(embed_dim=8, depth=1, heads=2, mlp_ratio=2.0,
                              decoder_dim=8, decoder_depth=1, decoder_heads=2,
                              vocab_size=32,
                              pos_lengths={"text": 8, "image2d": 4,
                                           "volume3d": 8},
                              patch_dims={"image2d": 4, "volume3d": 4})
            rng = np.random.default_rng(505)
            model = init_model(cfg, seed=0)
            model.add_decoder(1, "text", None, None, 0)
            model.add_decoder(2, "image2d", 4, 4, 0)

            ids = rng.integers(4, 32, size=(3, 8)).astype(np.int64)
            ids[:, 0] = CLS_ID
            text_batch = TokenBatch("text", ids=ids, valid=ids != PAD_ID)
            patches = rng.normal(size=(3, 4, 4))
            img_batch = TokenBatch("image2d", patches=patches,
                                   grid_shape=(2, 2))

            assert sum(p.data.size for p in model.params()) <= 5000

            def f_mlm():
                return float(sched.pretext_batch_loss(
                    model, text_batch, 1, np.random.default_rng(7)).data)

            loss = sched.pretext_batch_loss(model, text_batch, 1,
                                            np.random.default_rng(7))
            _grad_check(model.params(), f_mlm, loss, rng)

            def f_mim():
                return float(sched.pretext_batch_loss(
                    model, img_batch, 2, np.random.default_rng(9)).data)

            loss = sched.pretext_batch_loss(model, img_batch, 2,
                                            np.random.default_rng(9))
            _grad_check(model.params(), f_mim, loss, rng)

            # at teacher == student the feature-replay gradient is exactly
            # zero, so move the student off the snapshot before checking
            teacher = snapshot_teacher(model)
            nudge = np.random.default_rng(21)
            for p in model.core.params():
                p.data = p.data + 0.01 * nudge.normal(size=p.data.shape)

            def f_fd():
                return float(R.fd_loss(model, teacher, text_batch,
                                       np.random.default_rng(13)).data)

            loss = R.fd_loss(model, teacher, text_batch,
                             np.random.default_rng(13))
            _grad_check(model.core.params(), f_fd, loss, rng)

            cls_model = init_model(cfg, seed=1)
            tm = F.attach_head(cls_model, F.TaskSpec("mlp2", 3,
                                                     modality="text"), seed=0)
            labels = np.array([0, 2, 1])
            assert sum(p.data.size for p in tm.params()) <= 5000

            def f_ce():
                return float(F.ce_loss(tm.forward(text_batch), labels).data)

            loss = F.ce_loss(tm.forward(text_batch), labels)
            _grad_check(tm.params(), f_ce, loss, rng)

            seg_model = init_model(cfg, seed=2)
            tms = F.attach_head(seg_model, F.TaskSpec("seg2d", 2,
                                                      modality="image2d"),
                                seed=0, tok_cfg=TOK_G)
            gt = rng.integers(0, 2, size=(3, 4, 4)).astype(np.int64)
            assert sum(p.data.size for p in tms.params()) <= 5000

            def f_seg():
                return float(F.dice_ce_loss(tms.forward(img_batch), gt).data)

            loss = F.dice_ce_loss(tms.forward(img_batch), gt)
            _grad_check(tms.params(), f_seg, loss, rng)


# -- criterion 6: update-set isolation -----------------------------------


def _param_bytes(params):
    return {p.name: p.data.copy() for p in params}


def _bit_equal(snap, params):
    now = {p.name: p.data for p in params}
    return set(snap) == set(now) and all(
        np.array_equal(snap[k], now[k]) for k in snap)


def test_c06_update_set_isolation(corpus2):
    with criterion(6, "update-set isolation", 120.0):
        ds, vocab = corpus2
        cfg = tiny_model_cfg(vocab.size)

        # single-step isolation on a standalone model
        model = init_model(cfg, seed=3)
        dec1 = model.add_decoder(1, "text", None, None, 3)
        dec2 = model.add_decoder(2, "image2d", TOK.seq_len("image2d"),
                                 TOK.patch_dim("image2d"), 3)
        opt = AdamW(model.params(), AdamWConfig())
        from coss.data import batch_from_refs
        tb = batch_from_refs(ds.root, ds.samples_for("text")[:4], vocab, TOK)
        ib = batch_from_refs(ds.root, ds.samples_for("image2d")[:4], vocab,
                             TOK)

        teacher = snapshot_teacher(model)
        decs = _param_bytes(dec1.params() + dec2.params())
        core = _param_bytes(model.core.params())
        opt.zero_grad()
        R.fd_loss(model, teacher, tb, np.random.default_rng(5)).backward()
        opt.step(1e-3, subset=model.core.params())
        assert _bit_equal(decs, dec1.params() + dec2.params())
        assert not _bit_equal(core, model.core.params())

        dec1_snap = _param_bytes(dec1.params())
        opt.zero_grad()
        sched.pretext_batch_loss(model, ib, 2,
                                 np.random.default_rng(6)).backward()
        opt.step(1e-3, subset=model.core.params() + dec2.params())
        assert _bit_equal(dec1_snap, dec1.params())

        # whole-stage isolation through the real loop
        plan = StagePlan([StageSpec("text", 2), StageSpec("image2d", 2)],
                         batch_size=4, warmup_epochs=1, peak_lr=1e-3)
        trainer = _medcoss_trainer(0)
        state = TrainState(model=init_model(cfg, seed=0),
                           buffer=R.RehearsalBuffer())
        sched.run_stage(state, ds.samples_for("text"), stage_id=1,
                        slot="text", epochs=2, plan=plan, trainer=trainer,
                        dataset=ds, vocab=vocab, tok_cfg=TOK)
        snap1 = _param_bytes(state.model.decoders[1].params())
        core_snap = _param_bytes(state.model.core.params())
        sched.run_stage(state, ds.samples_for("image2d"), stage_id=2,
                        slot="image2d", epochs=2, plan=plan, trainer=trainer,
                        dataset=ds, vocab=vocab, tok_cfg=TOK)
        assert _bit_equal(snap1, state.model.decoders[1].params())
        assert not _bit_equal(core_snap, state.model.core.params())
        assert 2 in state.model.decoders


# -- criterion 7: bit-level determinism ----------------------------------


def _file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def test_c07_determinism(corpus2, tmp_path):
    with criterion(7, "bit-level determinism", 600.0):
        ds, vocab = corpus2
        plan = StagePlan([StageSpec("text", 2), StageSpec("image2d", 2)],
                         batch_size=4, warmup_epochs=1, peak_lr=1e-3)
        hashes = []
        for run in ("a", "b"):
            out = tmp_path / run
            out.mkdir()
            sched.run_pipeline(plan, ds, tiny_model_cfg(vocab.size),
                               _medcoss_trainer(0), vocab, TOK,
                               out_dir=str(out))
            hashes.append({name: _file_hash(os.path.join(out, name))
                           for name in ("stage_1.ckpt", "stage_2.ckpt",
                                        "buffer.tsv", "metrics.jsonl",
                                        "retention.jsonl")})
        assert hashes[0] == hashes[1]


# -- criteria 8 and 9: forgetting and ablation directions ----------------


# long second stage at a high rate: enough interference that the paradigms
# separate instead of all drifting upward together
_DIR_PLAN = StagePlan([StageSpec("text", 4), StageSpec("image2d", 12)],
                      batch_size=4, warmup_epochs=1, peak_lr=5e-3)
_DIR_SEEDS = (0, 1, 2)


def _run_with(trainer, corpus, plan=_DIR_PLAN):
    ds, vocab = corpus
    _, _, logs = sched.run_pipeline(plan, ds, tiny_model_cfg(vocab.size),
                                    trainer, vocab, TOK)
    return _retention(logs, 1, 1), _retention(logs, 2, 1)


def test_c08_forgetting_direction(corpus2):
    with criterion(8, "forgetting direction", 1800.0):
        results = {"seq": [], "er": [], "medcoss": []}
        for seed in _DIR_SEEDS:
            base = _medcoss_trainer(seed)
            seq = replace(base, use_buffer=False)
            er = replace(base, replay_loss="pretext",
                         buffer_sampling="random", imm=False)
            for name, tr in (("seq", seq), ("er", er), ("medcoss", base)):
                before, after = _run_with(tr, corpus2)
                results[name].append(after - before)
        mean = {k: float(np.mean(v)) for k, v in results.items()}
        print(f"  degradation means {mean}", file=sys.__stdout__)
        assert mean["medcoss"] < mean["seq"]          # strictly less forgetting
        assert mean["medcoss"] <= mean["er"] <= mean["seq"]


def test_c09_ablation_direction(corpus2):
    with criterion(9, "ablation direction", 2700.0):
        steps = [
            ("er", dict(replay_loss="pretext", buffer_sampling="random",
                        imm=False)),
            ("+fd", dict(replay_loss="fd", buffer_sampling="random",
                         imm=False)),
            ("+kmeans", dict(replay_loss="fd", buffer_sampling="kmeans",
                             imm=False)),
            ("+imm", dict(replay_loss="fd", buffer_sampling="kmeans",
                          imm=True)),
        ]
        means = []
        for name, kw in steps:
            vals = [_run_with(replace(_medcoss_trainer(seed), **kw),
                              corpus2)[1] for seed in _DIR_SEEDS]
            means.append(float(np.mean(vals)))
        print(f"  retention-loss means {dict(zip([s[0] for s in steps], means))}",
              file=sys.__stdout__)
        for prev, nxt in zip(means, means[1:]):
            assert nxt <= prev                         # monotone non-degrading


# -- criterion 10: order robustness --------------------------------------


def test_c10_order_robustness(corpus5):
    with criterion(10, "order robustness", 1800.0):
        ds, vocab = corpus5
        combined = []
        for slots in (list(DEFAULT_SLOTS), list(reversed(DEFAULT_SLOTS))):
            plan = StagePlan([StageSpec(s, 2) for s in slots], batch_size=4,
                             warmup_epochs=1, peak_lr=1e-3)
            _, _, logs = sched.run_pipeline(plan, ds,
                                            tiny_model_cfg(vocab.size),
                                            _medcoss_trainer(0), vocab, TOK)
            final = len(slots)
            losses = [_retention(logs, final, s)
                      for s in range(1, final + 1)]
            combined.append(float(np.mean(losses)))
        fwd, rev = combined
        rel = abs(fwd - rev) / fwd
        print(f"  combined pretext loss forward={fwd:.4f} reversed={rev:.4f} "
              f"rel={rel:.3f}", file=sys.__stdout__)
        assert rel < 0.20


# -- criterion 11: pre-training beats training from scratch --------------


TOK_CLS = TokenizerConfig(text_len=12, image_size=(24, 24),
                          volume_size=(4, 8, 8), patch2d=(4, 4),
                          patch3d=(2, 4, 4))


def test_c11_pretrain_beats_scratch(corpus_cls):
    with criterion(11, "pre-training beats scratch", 900.0):
        ds, vocab = corpus_cls
        cfg = ModelConfig(embed_dim=32, depth=3, heads=4, decoder_dim=16,
                          decoder_depth=1, decoder_heads=4, vocab_size=64,
                          pos_lengths={"text": 12, "image2d": 36,
                                       "volume3d": 8},
                          patch_dims={"image2d": 16, "volume3d": 32})
        refs = ds.samples_for("image2d")
        # two-stage continual pre-training (text, then images); weight decay
        # stays off because at this scale it shrinks the pre-trained weights
        # enough to erase the transfer signal before the head can use it
        plan = StagePlan([StageSpec("text", 4), StageSpec("image2d", 10)],
                         batch_size=8, warmup_epochs=2, peak_lr=5e-4)
        accs = {"pretrained": [], "scratch": []}
        for seed in (0, 1, 2):
            perm = np.random.default_rng(1000 + seed).permutation(len(refs))
            parts = {"train": [refs[i] for i in perm[:48]],
                     "val": [refs[i] for i in perm[48:72]],
                     "test": [refs[i] for i in perm[72:]]}
            data = {k: F.load_split(ds.root, v, vocab, TOK_CLS)
                    for k, v in parts.items()}
            trainer = TrainerConfig(optimizer=AdamWConfig(weight_decay=0.0),
                                    sampling=SamplingConfig(), seed=seed)
            pre_model, _, _ = sched.run_pipeline(plan, ds, cfg, trainer,
                                                 vocab, TOK_CLS)
            scratch_model = init_model(cfg, seed=100 + seed)
            spec = F.TaskSpec("mlp2", 3, modality="image2d")
            fcfg = F.FinetuneConfig(epochs=20, batch_size=4, lr=1e-3,
                                    seed=seed)
            for name, encoder in (("pretrained", pre_model),
                                  ("scratch", scratch_model)):
                tm = F.attach_head(encoder, spec, seed=seed)
                _, report = F.finetune_task(tm, data, fcfg)
                accs[name].append(report["test"]["acc"])
        mean_pre = float(np.mean(accs["pretrained"]))
        mean_tfs = float(np.mean(accs["scratch"]))
        print(f"  test acc pretrained={mean_pre:.3f} "
              f"{['%.3f' % a for a in accs['pretrained']]} "
              f"scratch={mean_tfs:.3f} "
              f"{['%.3f' % a for a in accs['scratch']]}",
              file=sys.__stdout__)
        assert mean_pre > mean_tfs


# -- criterion 12: metric oracles ----------------------------------------


def _brute_boundary(mask):
    m = np.asarray(mask, bool)
    out = []
    for idx in np.argwhere(m):
        on_edge = False
        for axis in range(m.ndim):
            for step in (-1, 1):
                nb = idx.copy()
                nb[axis] += step
                if not (0 <= nb[axis] < m.shape[axis]) or not m[tuple(nb)]:
                    on_edge = True
        if on_edge:
            out.append(tuple(idx))
    return out


def _brute_hd95(a, b, spacing):
    pa = np.array(_brute_boundary(a), float) * spacing
    pb = np.array(_brute_boundary(b), float) * spacing
    d_ab = [min(np.linalg.norm(p - q) for q in pb) for p in pa]
    d_ba = [min(np.linalg.norm(p - q) for q in pa) for p in pb]
    return float(np.percentile(np.array(d_ab + d_ba), 95))


def test_c12_metric_oracles():
    with criterion(12, "metric oracles", 5.0):
        # rank-based AUC, hand-worked: 3 wins out of 4 pairs
        auc = M.roc_auc(np.array([0, 0, 1, 1]),
                        np.array([0.1, 0.4, 0.35, 0.8]))
        assert abs(auc - 0.75) < 1e-12

        labels = np.array([0, 1, 1, 0])
        probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.7, 0.3]])
        rep = M.classification_metrics(labels, probs)
        assert abs(rep["acc"] - 0.75) < 1e-12
        # class 0: tp=2 fp=1 fn=0 -> 0.8; class 1: tp=1 fp=0 fn=1 -> 2/3
        assert abs(rep["f1"] - (0.8 + 2.0 / 3.0) / 2.0) < 1e-12

        pred = np.zeros((3, 3), dtype=np.int64)
        gt = np.zeros((3, 3), dtype=np.int64)
        pred[0, 0] = pred[0, 1] = 1
        gt[0, 1] = 1
        assert abs(M.dice(pred, gt) - 2.0 / 3.0) < 1e-12

        # anisotropic spacing: one-row offset costs spacing[0]
        a = np.zeros((4, 4), dtype=np.int64)
        b = np.zeros((4, 4), dtype=np.int64)
        a[1, 1:3] = 1
        b[2, 1:3] = 1
        assert abs(M.hd95(a, b, spacing=(2.0, 1.0)) - 2.0) < 1e-12

        both = M.segmentation_metrics(np.zeros((3, 4), np.int64),
                                      np.zeros((3, 4), np.int64))
        assert both["dice"] == 1.0 and both["hd95"] == 0.0
        empty_pred = np.zeros((3, 4), np.int64)
        full_gt = np.zeros((3, 4), np.int64)
        full_gt[1, 2] = 1
        one = M.segmentation_metrics(empty_pred, full_gt)
        assert one["dice"] == 0.0
        assert abs(one["hd95"] - np.sqrt(2 ** 2 + 3 ** 2)) < 1e-12

        rng = np.random.default_rng(1212)

        for _ in range(5):
            shape = (int(rng.integers(3, 7)), int(rng.integers(3, 7)))
            x = rng.random(shape) < 0.5
            y = rng.random(shape) < 0.5
            if not x.any() or not y.any():
                continue
            spacing = (float(rng.integers(1, 4)), float(rng.integers(1, 4)))
            got = M.hd95(x.astype(np.int64), y.astype(np.int64),
                         spacing=spacing)
            want = _brute_hd95(x, y, np.array(spacing))
            assert abs(got - want) < 1e-9
