"""Vocabulary/tokenizer and the two trainable encoders."""

import numpy as np
import pytest

from tirg.autodiff import DimensionError, Parameter, grad_check, tensor_sum
from tirg.css import COLORS, SHAPES, DatasetConfig, build_dataset
from tirg.encoders import (
    PAD,
    UNK,
    ImageEncoder,
    ImageEncoderConfig,
    TextEncoder,
    TextEncoderConfig,
    Vocabulary,
    build_vocabulary,
    prepare_images,
    tokenize,
)

SEED = 51


# ---------------------------------------------------------------------------
# vocabulary and tokenizer
# ---------------------------------------------------------------------------


def test_vocabulary_specials_and_density():
    vocab = build_vocabulary()
    assert vocab.tokens[0] == PAD and vocab.tokens[1] == UNK
    assert vocab.pad_index == 0 and vocab.unk_index == 1
    assert len(vocab) == len(vocab.tokens) == len(set(vocab.tokens))
    # dense indices 0..V-1
    assert sorted(vocab.index.values()) == list(range(len(vocab)))
    # regular tokens sorted deterministically after the specials
    rest = list(vocab.tokens[2:])
    assert rest == sorted(rest)


def test_vocabulary_size_and_contents():
    vocab = build_vocabulary()
    # 3 verbs + to + object + 8 colors + 3 shapes + big/small + 9 positions
    # + pad/unk = 29
    assert len(vocab) == 29
    for word in ("add", "remove", "make", "to", "object", "big", "small"):
        assert word in vocab.index
    for word in COLORS + SHAPES:
        assert word in vocab.index
    for row in ("top", "middle", "bottom"):
        for col in ("left", "center", "right"):
            assert f"{row}-{col}" in vocab.index


def test_vocabulary_deterministic():
    assert build_vocabulary().tokens == build_vocabulary().tokens


def test_tokenize_template_sentence():
    vocab = build_vocabulary()
    ids = tokenize("add big red cube to middle-center", vocab)
    assert len(ids) == 6
    words = [vocab.tokens[i] for i in ids]
    assert words == ["add", "big", "red", "cube", "to", "middle-center"]


def test_tokenize_empty_and_unknown():
    vocab = build_vocabulary()
    assert tokenize("", vocab) == []
    assert tokenize("add zorp cube", vocab)[1] == vocab.unk_index


def test_tokenize_case_insensitive_and_idempotent():
    vocab = build_vocabulary()
    ids = tokenize("Add Big RED cube TO bottom-LEFT", vocab)
    assert ids == tokenize("add big red cube to bottom-left", vocab)
    rendered = " ".join(vocab.tokens[i] for i in ids)
    assert tokenize(rendered, vocab) == ids


def test_tokenize_covers_generated_grammar():
    vocab = build_vocabulary()
    train, test = build_dataset(DatasetConfig(n_base=30, n_queries=150, seed=SEED,
                                              test_n_base=15, test_n_queries=75))
    for manifest in (train, test):
        for q in manifest.queries:
            ids = tokenize(" ".join(q.text), vocab)
            assert ids and vocab.unk_index not in ids


# ---------------------------------------------------------------------------
# image encoder
# ---------------------------------------------------------------------------


def small_image_encoder(dtype=np.float64):
    cfg = ImageEncoderConfig(canvas_px=12, channels=(4, 6), embed_dim=8)
    return ImageEncoder(cfg, seed=SEED, dtype=dtype)


def test_image_encoder_shapes_default_config():
    enc = ImageEncoder(ImageEncoderConfig(), seed=SEED)
    img = np.zeros((48, 48, 3), dtype=np.uint8)
    out = enc.encode_image(img)
    assert out["feature_map"].data.shape == (6, 6, 64)
    assert out["pooled"].data.shape == (64,)
    batch = enc.encode_batch(np.zeros((5, 48, 48, 3), dtype=np.uint8))
    assert batch["feature_map"].data.shape == (5, 6, 6, 64)
    assert batch["pooled"].data.shape == (5, 64)


def test_image_encoder_purity_bitwise():
    enc = small_image_encoder()
    rng = np.random.default_rng(SEED)
    img = rng.random((12, 12, 3))
    a = enc.encode_image(img)["pooled"].data
    b = enc.encode_image(img)["pooled"].data
    assert np.array_equal(a, b)


def test_image_encoder_white_vs_black_distinct():
    enc = small_image_encoder()
    white = np.full((12, 12, 3), 255, dtype=np.uint8)
    black = np.zeros((12, 12, 3), dtype=np.uint8)
    pw = enc.encode_image(white)["pooled"].data
    pb = enc.encode_image(black)["pooled"].data
    assert np.linalg.norm(pw - pb) > 0


def test_image_encoder_uint8_matches_scaled_float():
    enc = small_image_encoder()
    rng = np.random.default_rng(SEED + 1)
    raw = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
    a = enc.encode_image(raw)["pooled"].data
    b = enc.encode_image(raw.astype(np.float64) / 255.0)["pooled"].data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_image_encoder_batch_matches_single():
    enc = small_image_encoder()
    rng = np.random.default_rng(SEED + 2)
    imgs = rng.random((4, 12, 12, 3))
    batch = enc.encode_batch(imgs)["pooled"].data
    for i in range(4):
        single = enc.encode_image(imgs[i])["pooled"].data
        np.testing.assert_allclose(batch[i], single, rtol=0, atol=1e-10)


def test_image_encoder_rejects_wrong_size():
    enc = small_image_encoder()
    with pytest.raises(DimensionError):
        enc.encode_image(np.zeros((10, 12, 3)))
    with pytest.raises(DimensionError):
        enc.encode_batch(np.zeros((2, 12, 12, 4)))
    with pytest.raises(ValueError):
        enc.encode_image(np.full((12, 12, 3), 2.0))  # floats must be in [0,1]


def test_image_encoder_parameters_named_and_trainable():
    enc = small_image_encoder()
    params = enc.parameters()
    assert set(params) == {"conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias",
                           "fc.weight", "fc.bias"}
    assert all(isinstance(p, Parameter) for p in params.values())
    assert params["conv1.kernel"].data.shape == (3, 3, 3, 4)
    assert params["conv2.kernel"].data.shape == (3, 3, 4, 6)
    assert params["fc.weight"].data.shape == (6, 8)


def test_image_encoder_config_validation():
    with pytest.raises(ValueError):
        ImageEncoderConfig(canvas_px=48, channels=(), embed_dim=64)
    with pytest.raises(ValueError):
        ImageEncoderConfig(canvas_px=48, channels=(16,), embed_dim=4)  # D >= 8
    with pytest.raises(ValueError):
        ImageEncoderConfig(canvas_px=10, channels=(4, 6, 8), embed_dim=8)  # 10 % 8 != 0


def test_image_encoder_grad_check_first_kernel():
    enc = small_image_encoder(dtype=np.float64)
    rng = np.random.default_rng(SEED + 3)
    imgs = rng.random((2, 12, 12, 3))
    params = enc.parameters()
    targets = [params["conv1.kernel"], params["fc.weight"], params["conv2.bias"]]

    def f(*_):
        return tensor_sum(enc.encode_batch(imgs)["pooled"])

    assert grad_check(f, targets) < 1e-4


def test_prepare_images_stacks_and_scales():
    imgs = [np.full((12, 12, 3), 255, dtype=np.uint8),
            np.zeros((12, 12, 3), dtype=np.uint8)]
    arr = prepare_images(imgs)
    assert arr.shape == (2, 12, 12, 3) and arr.dtype == np.float32
    assert arr.max() == 1.0 and arr.min() == 0.0


# ---------------------------------------------------------------------------
# text encoder
# ---------------------------------------------------------------------------


def small_text_encoder(dtype=np.float64):
    vocab = build_vocabulary()
    cfg = TextEncoderConfig(vocab_size=len(vocab), embed_dim=4, hidden_dim=5)
    return TextEncoder(cfg, seed=SEED, dtype=dtype), vocab


def test_text_encoder_output_shape():
    enc, vocab = small_text_encoder()
    ids = tokenize("add red cube", vocab)
    out = enc.encode_text(ids)
    assert out.data.shape == (5,)
    batch = enc.encode_batch([ids, tokenize("remove big sphere", vocab)])
    assert batch.data.shape == (2, 5)


def test_text_encoder_rejects_empty():
    enc, _ = small_text_encoder()
    with pytest.raises(ValueError):
        enc.encode_text([])
    with pytest.raises(ValueError):
        enc.encode_batch([])
    with pytest.raises(ValueError):
        enc.encode_batch([[1, 2], []])


def test_text_encoder_single_pad_step_matches_manual_cell():
    # one <pad> token: output is exactly one gated-cell step from the zero
    # state, reproduced here with plain numpy from the encoder's parameters
    enc, vocab = small_text_encoder()
    p = {k: v.data for k, v in enc.parameters().items()}
    x = p["embedding"][vocab.pad_index]
    hx = np.concatenate([np.zeros(5), x])
    z = 1.0 / (1.0 + np.exp(-(hx @ p["update.weight"] + p["update.bias"])))
    c = np.tanh(hx @ p["candidate.weight"] + p["candidate.bias"])
    expected = (1.0 - z) * 0.0 + z * c
    out = enc.encode_text([vocab.pad_index]).data
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_text_encoder_order_sensitive_and_distinct():
    enc, vocab = small_text_encoder()
    a = enc.encode_text(tokenize("add red cube", vocab)).data
    b = enc.encode_text(tokenize("remove red cube", vocab)).data
    c = enc.encode_text(tokenize("cube red add", vocab)).data
    assert np.linalg.norm(a - b) > 0
    assert np.linalg.norm(a - c) > 0


def test_text_encoder_purity_bitwise():
    enc, vocab = small_text_encoder()
    ids = tokenize("make top-left object small", vocab)
    assert np.array_equal(enc.encode_text(ids).data, enc.encode_text(ids).data)


def test_text_encoder_batch_matches_single_with_ragged_lengths():
    # padding plus masking must leave each row identical to its solo encoding
    enc, vocab = small_text_encoder()
    rows = [tokenize("add red cube", vocab),
            tokenize("make top-left object small", vocab),
            tokenize("remove big gray sphere", vocab),
            tokenize("add big red cube to middle-center", vocab)]
    batch = enc.encode_batch(rows).data
    for i, ids in enumerate(rows):
        np.testing.assert_allclose(batch[i], enc.encode_text(ids).data,
                                   rtol=0, atol=1e-12)


def test_text_encoder_parameters_named():
    enc, _ = small_text_encoder()
    params = enc.parameters()
    assert set(params) == {"embedding", "update.weight", "update.bias",
                           "candidate.weight", "candidate.bias"}
    assert params["embedding"].data.shape == (29, 4)
    assert params["update.weight"].data.shape == (9, 5)


def test_text_encoder_grad_check_through_sequence():
    enc, vocab = small_text_encoder(dtype=np.float64)
    ids = tokenize("add big red cube to middle-center", vocab)[:5]
    params = enc.parameters()
    targets = [params["embedding"], params["update.weight"], params["candidate.weight"],
               params["update.bias"], params["candidate.bias"]]

    def f(*_):
        return tensor_sum(enc.encode_text(ids))

    assert grad_check(f, targets) < 1e-4


def test_text_encoder_unknown_token_is_embeddable():
    enc, vocab = small_text_encoder()
    ids = tokenize("add zorp cube", vocab)
    out = enc.encode_text(ids)
    assert np.all(np.isfinite(out.data))


def test_vocabulary_lookup_helpers():
    vocab = build_vocabulary()
    assert vocab.index["add"] == vocab.index["add"]
    assert "add" in vocab.index and "zorp" not in vocab.index
    assert isinstance(vocab, Vocabulary)
