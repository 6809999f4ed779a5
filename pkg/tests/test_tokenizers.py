"""Vocabulary, text rows, and patch round-trip tests."""

import numpy as np
import pytest

from coss import tokenizers as tok


def small_cfg():
    return tok.TokenizerConfig(text_len=8, image_size=(8, 8), volume_size=(4, 8, 8),
                               patch2d=(4, 4), patch3d=(2, 4, 4))


def test_build_vocab_frequency_then_lex_order():
    v = tok.build_vocab(["a b", "a"], max_size=10)
    assert v.size == 6
    assert v.id_to_token[:4] == list(tok.SPECIAL_TOKENS)
    assert v.lookup("a") == 4
    assert v.lookup("b") == 5


def test_build_vocab_tie_breaks_alphabetical_and_truncates():
    v = tok.build_vocab(["z q z q m"], max_size=6)
    # q and z tie at 2 > m at 1; cap leaves room for two words
    assert v.id_to_token[4:] == ["q", "z"]
    assert v.lookup("m") == tok.UNK_ID


def test_build_vocab_single_word_first_free_slot():
    v = tok.build_vocab(["x"], max_size=10)
    assert v.lookup("x") == 4


def test_build_vocab_empty_corpus_raises():
    with pytest.raises(ValueError):
        tok.build_vocab([], max_size=10)


def test_vocab_ignores_reserved_token_strings_in_corpus():
    v = tok.build_vocab(["[PAD] real"], max_size=10)
    assert "real" in v.token_to_id
    assert v.lookup("[PAD]") == 0  # the reserved id, not a corpus word


def test_vocab_tsv_round_trip(tmp_path):
    v = tok.build_vocab(["c a b a"], max_size=10)
    path = tmp_path / "vocab.tsv"
    v.save(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "[PAD]\t0"
    assert lines[3] == "[UNK]\t3"
    v2 = tok.Vocabulary.load(path)
    assert v2.id_to_token == v.id_to_token


def test_vocab_load_rejects_bad_header(tmp_path):
    path = tmp_path / "vocab.tsv"
    path.write_text("foo\t0\n[MASK]\t1\n[CLS]\t2\n[UNK]\t3\n")
    with pytest.raises(ValueError):
        tok.Vocabulary.load(path)


def test_tokenize_text_basic_row():
    v = tok.build_vocab(["a b", "a"], max_size=10)
    cfg = tok.TokenizerConfig()
    row = tok.tokenize_text("a b", v, cfg)
    assert row.ids.shape == (1, 112)
    assert row.ids[0, 0] == tok.CLS_ID
    assert list(row.ids[0, 1:3]) == [4, 5]
    assert np.all(row.ids[0, 3:] == tok.PAD_ID)
    assert row.valid[0, 0] and row.valid[0, 1] and row.valid[0, 2]
    assert not row.valid[0, 3:].any()


def test_tokenize_text_truncates_to_row_length():
    v = tok.build_vocab(["w"], max_size=10)
    cfg = tok.TokenizerConfig()
    long = " ".join(f"w{i}" for i in range(200))
    row = tok.tokenize_text(long, v, cfg)
    assert row.ids.shape == (1, 112)
    assert row.ids[0, 0] == tok.CLS_ID
    # all 111 word slots are filled (with UNK here), nothing beyond
    assert np.all(row.ids[0, 1:] == tok.UNK_ID)


def test_tokenize_empty_text_is_cls_plus_pads():
    v = tok.build_vocab(["x"], max_size=10)
    cfg = tok.TokenizerConfig()
    row = tok.tokenize_text("", v, cfg)
    assert row.ids[0, 0] == tok.CLS_ID
    assert np.all(row.ids[0, 1:] == tok.PAD_ID)
    assert row.valid.sum() == 1


def test_tokenize_texts_stacks_rows():
    v = tok.build_vocab(["a b"], max_size=10)
    cfg = small_cfg()
    batch = tok.tokenize_texts(["a", "b b b"], v, cfg)
    assert batch.modality == "text"
    assert batch.ids.shape == (2, 8)
    assert batch.n == 2 and batch.length == 8


def test_token_batch_exactly_one_payload():
    with pytest.raises(ValueError):
        tok.TokenBatch("text")
    with pytest.raises(ValueError):
        tok.TokenBatch("text", ids=np.zeros((1, 4), dtype=np.int64),
                       patches=np.zeros((1, 4, 2)))
    with pytest.raises(ValueError):
        tok.TokenBatch("image2d", ids=np.zeros((1, 4), dtype=np.int64))


def test_patchify_default_sizes_arithmetic():
    cfg = tok.TokenizerConfig()
    img = np.zeros((224, 224), dtype=np.float32)
    row = tok.patchify(img, cfg, "image2d")
    assert row.patches.shape == (1, 196, 256)
    assert row.grid_shape == (14, 14)
    vol = np.zeros((16, 192, 192), dtype=np.float32)
    row = tok.patchify(vol, cfg, "volume3d")
    assert row.patches.shape == (1, 144, 4096)
    assert row.grid_shape == (1, 12, 12)


def test_patchify_round_trip_bit_exact_2d():
    cfg = small_cfg()
    rng = np.random.default_rng(0)
    for _ in range(5):
        img = rng.normal(size=(8, 8)).astype(np.float32)
        row = tok.patchify(img, cfg, "image2d")
        back = tok.unpatchify(row.patches, row.grid_shape, cfg, "image2d")
        np.testing.assert_array_equal(back, img)


def test_patchify_round_trip_bit_exact_3d():
    cfg = small_cfg()
    rng = np.random.default_rng(1)
    for _ in range(5):
        vol = rng.normal(size=(4, 8, 8)).astype(np.float32)
        row = tok.patchify(vol, cfg, "volume3d")
        back = tok.unpatchify(row.patches, row.grid_shape, cfg, "volume3d")
        np.testing.assert_array_equal(back, vol)


def test_patchify_row_major_patch_order():
    cfg = small_cfg()
    img = np.arange(64, dtype=np.float32).reshape(8, 8)
    row = tok.patchify(img, cfg, "image2d")
    # patch 0 is the top-left 4x4 block, flattened row-major
    np.testing.assert_array_equal(row.patches[0, 0], img[:4, :4].ravel())
    np.testing.assert_array_equal(row.patches[0, 1], img[:4, 4:].ravel())
    np.testing.assert_array_equal(row.patches[0, 2], img[4:, :4].ravel())


def test_patchify_rejects_wrong_or_indivisible_shape():
    cfg = small_cfg()
    with pytest.raises(ValueError):
        tok.patchify(np.zeros((7, 8)), cfg, "image2d")
    with pytest.raises(ValueError, match="axis"):
        tok.TokenizerConfig(image_size=(9, 8), patch2d=(4, 4))


def test_stack_visual_shapes():
    cfg = small_cfg()
    rng = np.random.default_rng(2)
    samples = [rng.normal(size=(4, 8, 8)).astype(np.float32) for _ in range(3)]
    batch = tok.stack_visual(samples, cfg, "volume3d")
    assert batch.patches.shape == (3, 2 * 2 * 2, 2 * 4 * 4)
    assert batch.grid_shape == (2, 2, 2)


def test_multichannel_round_trip():
    cfg = tok.TokenizerConfig(image_size=(8, 8), patch2d=(4, 4), channels=2,
                              volume_size=(4, 8, 8), patch3d=(2, 4, 4))
    rng = np.random.default_rng(3)
    img = rng.normal(size=(8, 8, 2)).astype(np.float32)
    row = tok.patchify(img, cfg, "image2d")
    assert row.patches.shape == (1, 4, 32)
    back = tok.unpatchify(row.patches, row.grid_shape, cfg, "image2d")
    np.testing.assert_array_equal(back, img)
