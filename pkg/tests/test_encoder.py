import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compact_tracker import autodiff as ad
from compact_tracker.attention import StreamMask
from compact_tracker.encoder import PRESETS, EncoderConfig, ViTEncoder, block_param_count, patchify, unpatchify

DESK = PRESETS["desk"]


def images(rng, B=None, cfg=DESK):
    lead = () if B is None else (B,)
    t = rng.uniform(size=(*lead, cfg.template_side, cfg.template_side, 3))
    t2 = rng.uniform(size=t.shape)
    s = rng.uniform(size=(*lead, cfg.search_side, cfg.search_side, 3))
    return t, t2, s


def test_single_patch():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    p = patchify(img, 8)
    assert p.shape == (1, 192) and np.array_equal(p[0], img.reshape(-1))


def test_checkerboard_rows_follow_raster_order():
    yy, xx = np.mgrid[:16, :16]
    img = np.stack([(yy // 8 + xx // 8) % 2, yy, xx], axis=-1).astype(float)
    p = patchify(img, 8)
    assert p.shape == (4, 192)
    for r, (by, bx) in enumerate([(0, 0), (0, 8), (8, 0), (8, 8)]):
        assert np.array_equal(p[r], img[by:by + 8, bx:bx + 8].reshape(-1))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]))
def test_unpatchify_inverts_patchify(gh, gw, p):
    img = np.random.default_rng(gh * 7 + gw).uniform(size=(2, gh * p, gw * p, 3))
    assert np.array_equal(unpatchify(patchify(img, p), p, gh * p, gw * p), img)


def test_patchify_rejects_indivisible():
    with pytest.raises(ad.DimensionError):
        patchify(np.zeros((10, 8, 3)), 8)


def test_zero_image_embeds_to_positional_table():
    enc = ViTEncoder(DESK, np.random.default_rng(0))
    tok = enc.embed(np.zeros((32, 32, 3)), "template").data
    assert tok.shape == (16, 32)
    assert np.array_equal(tok, enc.params["encoder.pos_template"].data)


def test_embedding_difference_is_image_only():
    enc = ViTEncoder(DESK, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 32, 32, 3))
    W = enc.params["encoder.patch_embed.weight"].data
    diff = enc.embed(a, "template").data - enc.embed(b, "template").data
    assert np.allclose(diff, (patchify(a, 8) - patchify(b, 8)) @ W, atol=1e-14)


def test_depth_zero_returns_embeddings_and_cls():
    cfg = EncoderConfig(8, 32, 0, 2, 2, 32, 64)
    enc = ViTEncoder(cfg, np.random.default_rng(0))
    t, t2, s = images(np.random.default_rng(1))
    seq = enc.encode([t, t2], s)
    assert np.array_equal(seq.cls.data[0], enc.params["encoder.cls_token"].data)
    assert np.array_equal(seq.template(1).data, enc.embed(t2, "template").data)
    assert np.array_equal(seq.search.data, enc.embed(s, "search").data)


def test_token_layout_and_lengths():
    enc = ViTEncoder(DESK, np.random.default_rng(0))
    seq = enc.encode(list(images(np.random.default_rng(1))[:2]), images(np.random.default_rng(1))[2])
    assert seq.tokens.shape == (1 + 16 + 16 + 64, 32)
    assert seq.lengths == [1, 16, 16, 64]
    assert [u.shape[0] for u in seq.unpack()] == seq.lengths


def test_stream_mask_changes_search_outputs():
    enc = ViTEncoder(DESK, np.random.default_rng(0))
    t, t2, s = images(np.random.default_rng(2))
    a = enc.encode([t, t2], s, StreamMask()).search.data
    b = enc.encode([t, t2], s, StreamMask.parse("134")).search.data
    assert not np.allclose(a, b)


def test_identical_templates_give_identical_segments():
    enc = ViTEncoder(DESK, np.random.default_rng(0))
    t, _, s = images(np.random.default_rng(3))
    seq = enc.encode([t, t.copy()], s)
    assert np.allclose(seq.template(0).data, seq.template(1).data, atol=1e-12)


def test_batched_encode_matches_per_sample():
    enc = ViTEncoder(DESK, np.random.default_rng(0))
    t, t2, s = images(np.random.default_rng(4), B=3)
    batched = enc.encode([t, t2], s, StreamMask.parse("23")).tokens.data
    for i in range(3):
        single = enc.encode([t[i], t2[i]], s[i], StreamMask.parse("23")).tokens.data
        assert np.allclose(batched[i], single, atol=1e-12)


def test_per_layer_masks_and_length_check():
    enc = ViTEncoder(DESK, np.random.default_rng(0))
    t, t2, s = images(np.random.default_rng(5))
    enc.encode([t, t2], s, [StreamMask(), StreamMask.parse("134")])
    with pytest.raises(ValueError):
        enc.encode([t, t2], s, [StreamMask()])


def test_class_token_sees_everything_under_any_mask():
    enc = ViTEncoder(DESK, np.random.default_rng(0))
    t, t2, s = images(np.random.default_rng(6))
    seq = enc.encode([t, t2], s, StreamMask.parse("23"), keep_maps=True)
    amap = seq.attention_maps[0]
    assert np.all(amap[:, 0, :] > 0) and np.all(amap[:, :, 0] > 0)


def test_wrong_image_size_rejected():
    enc = ViTEncoder(DESK, np.random.default_rng(0))
    with pytest.raises(ad.DimensionError):
        enc.embed(np.zeros((16, 16, 3)), "template")


def test_param_count_closed_form():
    d, r, p = 32, 2, 8
    cfg = EncoderConfig(p, d, 2, 2, r, 32, 64)
    enc = ViTEncoder(cfg, np.random.default_rng(0))
    per_block = 3 * d * d + (d * d + d) + (d * r * d + r * d) + (r * d * d + d) + 4 * d
    expected = (3 * p * p * d + d) + d + 16 * d + 64 * d + 2 * per_block + 2 * d
    assert block_param_count(d, r) == per_block
    assert enc.param_count() == expected
    deeper = ViTEncoder(EncoderConfig(p, d, 4, 2, r, 32, 64), np.random.default_rng(0))
    assert deeper.param_count() - enc.param_count() == 2 * per_block
