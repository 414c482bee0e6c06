import json
import struct

import numpy as np
import pytest

from tarac import ImageSpan, TaracConfig, TaracHook
from tarac.decoding import greedy_pick
from tarac.model import (
    KvCache,
    ModelConfig,
    WeightFormatError,
    forward_full,
    forward_token,
    init_weights,
    load_weights,
    prefill,
    save_weights,
)

SMALL = ModelConfig(n_layers=3, n_heads=2, d_model=16, vocab_size=40, max_seq_len=32, image_vocab=10, seed=5)
SPAN = ImageSpan(1, 6)


def tensors_equal(a, b):
    return all(na == nb and np.array_equal(x, y) for (na, x), (nb, y) in zip(a.tensors(), b.tensors()))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=1, image_vocab=0)
    assert ModelConfig(d_model=64, n_heads=4).d_head == 16


def test_init_deterministic_bitwise():
    a, b = init_weights(SMALL), init_weights(SMALL)
    assert tensors_equal(a, b)
    assert all(x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(a.tensors(), b.tensors()))


def test_init_seed_changes_weights():
    a = init_weights(ModelConfig(**{**SMALL.__dict__, "seed": 1}))
    b = init_weights(ModelConfig(**{**SMALL.__dict__, "seed": 2}))
    assert not np.array_equal(a.tok_emb, b.tok_emb)


def test_init_values_float32_exact_and_finite():
    w = init_weights(SMALL)
    for _, t in w.tensors():
        assert np.all(np.isfinite(t))
        np.testing.assert_array_equal(t.astype(np.float32).astype(np.float64), t)


def test_embedding_statistics_d256():
    cfg = ModelConfig(n_layers=1, n_heads=4, d_model=256, vocab_size=512, max_seq_len=8, image_vocab=0)
    emb = init_weights(cfg).tok_emb
    n = emb.size
    sigma = 1 / np.sqrt(256)
    assert abs(emb.mean()) <= 3 * sigma / np.sqrt(n)
    assert emb.std() == pytest.approx(sigma, rel=0.02)


def test_image_embeddings_from_distinct_stream():
    with_img = init_weights(SMALL)
    no_img = init_weights(ModelConfig(**{**SMALL.__dict__, "image_vocab": 0}))
    lo = SMALL.image_ids.start
    np.testing.assert_array_equal(with_img.tok_emb[:lo], no_img.tok_emb[:lo])
    assert not np.array_equal(with_img.tok_emb[lo:], no_img.tok_emb[lo:])


def test_save_load_round_trip(tmp_path):
    w = init_weights(SMALL)
    p = tmp_path / "w.ttwt"
    save_weights(w, p)
    raw = p.read_bytes()
    assert raw[:4] == b"TTWT"
    w2 = load_weights(p)
    assert w2.config == w.config
    assert tensors_equal(w, w2)


def test_load_truncated(tmp_path):
    p = tmp_path / "w.ttwt"
    save_weights(init_weights(SMALL), p)
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(WeightFormatError, match="corrupt file"):
        load_weights(p)


@pytest.mark.parametrize("blob", [b"NOPE" + b"\0" * 20, b"TT", b"TTWT" + struct.pack("<HI", 9, 2) + b"{}"])
def test_load_unrecognized(tmp_path, blob):
    p = tmp_path / "w.ttwt"
    p.write_bytes(blob)
    with pytest.raises(WeightFormatError, match="unrecognized format"):
        load_weights(p)


def _rewrite_header(raw: bytes, mutate) -> bytes:
    hlen = struct.unpack_from("<I", raw, 6)[0]
    header = json.loads(raw[10:10 + hlen])
    mutate(header)
    new = json.dumps(header).encode()
    return raw[:4] + struct.pack("<HI", 1, len(new)) + new + raw[10 + hlen:]


def test_load_header_payload_mismatch(tmp_path):
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=32, vocab_size=20, max_seq_len=8, image_vocab=4)
    p = tmp_path / "w.ttwt"
    save_weights(init_weights(cfg), p)

    def declare_64(h):
        h["config"]["d_model"] = 64
        for t in h["tensors"]:
            t["shape"] = [64 if s == 32 else (256 if s == 128 else s) for s in t["shape"]]

    p.write_bytes(_rewrite_header(p.read_bytes(), declare_64))
    with pytest.raises(WeightFormatError, match="corrupt file"):
        load_weights(p)


def test_load_header_shapes_disagree_with_config(tmp_path):
    p = tmp_path / "w.ttwt"
    save_weights(init_weights(SMALL), p)
    p.write_bytes(_rewrite_header(p.read_bytes(), lambda h: h["config"].update(d_model=32)))
    with pytest.raises(WeightFormatError, match="corrupt file"):
        load_weights(p)


def _tokens(n, seed=0):
    return list(np.random.default_rng(seed).integers(0, SMALL.vocab_size, n))


def test_prefill_matches_token_by_token():
    w = init_weights(SMALL)
    toks = _tokens(9)
    _, logits, _ = prefill(w, toks)
    cache, step_logits, _ = prefill(w, toks[:1])
    for t in toks[1:]:
        step_logits, _ = forward_token(w, cache, t)
    np.testing.assert_allclose(step_logits, logits, atol=1e-5)


def test_prefill_cache_length():
    cache, _, rows = prefill(init_weights(SMALL), _tokens(7))
    assert cache.layer_lengths() == [7] * SMALL.n_layers
    assert len(rows) == SMALL.n_layers and rows[0].shape == (SMALL.n_heads, 7)


def test_identity_hook_is_transparent():
    w = init_weights(SMALL)
    toks = _tokens(8)
    _, a, _ = prefill(w, toks)
    _, b, _ = prefill(w, toks, hook=lambda l, row, span, step: row, span=SPAN)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_prefill_errors():
    w = init_weights(SMALL)
    with pytest.raises(ValueError, match="empty prompt"):
        prefill(w, [])
    with pytest.raises(ValueError, match="max_seq_len"):
        prefill(w, [2] * (SMALL.max_seq_len + 1))
    with pytest.raises(ValueError):
        prefill(w, [SMALL.vocab_size])


def test_forward_token_errors():
    w = init_weights(SMALL)
    with pytest.raises(ValueError):
        forward_token(w, KvCache.empty(SMALL), 3)
    cache, _, _ = prefill(w, [2] * SMALL.max_seq_len)
    with pytest.raises(ValueError, match="overflow"):
        forward_token(w, cache, 3)


def test_hook_contract_calls_and_rows():
    w = init_weights(SMALL)
    calls = []

    def hook(layer, row, span, step):
        assert span == SPAN
        np.testing.assert_allclose(row.sum(axis=1), 1, atol=1e-5)
        assert row.shape == (SMALL.n_heads, cache_len[0])
        calls.append((layer, step))
        return row

    prompt = _tokens(8)
    cache_len = [8]
    cache, _, _ = prefill(w, prompt, hook, SPAN)
    for i in range(3):
        cache_len[0] += 1
        forward_token(w, cache, 4, hook, SPAN)
    expected = [(l, s) for s in (1, 2, 3, 4) for l in range(SMALL.n_layers)]
    assert calls == expected


def test_beta_zero_hook_matches_no_hook():
    w = init_weights(SMALL)
    prompt = _tokens(10)
    hook = TaracHook(TaracConfig(alpha=0.3, beta=0.0, layer_range=(0, 3)))
    c1, a, _ = prefill(w, prompt)
    c2, b, _ = prefill(w, prompt, hook, SPAN)
    np.testing.assert_allclose(a, b, atol=1e-12)
    for _ in range(5):
        t = greedy_pick(a)
        a, _ = forward_token(w, c1, t)
        b, _ = forward_token(w, c2, t, hook, SPAN)
        np.testing.assert_allclose(a, b, atol=1e-12)
    assert hook.state.t == 6


def test_incremental_matches_recompute_with_hooks():
    w = init_weights(SMALL)
    prompt = _tokens(10, seed=3)
    cfg = TaracConfig(alpha=0.5, beta=0.8, layer_range=(1, 3))
    hook = TaracHook(cfg)
    cache, logits, _ = prefill(w, prompt, hook, SPAN)
    seq = list(prompt)
    for step in range(16):
        ref, _ = forward_full(w, seq, TaracHook(cfg), SPAN, first_hooked=len(prompt) - 1)
        np.testing.assert_allclose(logits, ref[-1], atol=1e-4)
        tok = greedy_pick(logits)
        assert tok == greedy_pick(ref[-1])
        seq.append(tok)
        logits, _ = forward_token(w, cache, tok, hook, SPAN)


def test_causality_later_tokens_do_not_affect_earlier_logits():
    w = init_weights(SMALL)
    a, _ = forward_full(w, _tokens(8, 1) + [3, 4])
    b, _ = forward_full(w, _tokens(8, 1) + [9, 11])
    np.testing.assert_array_equal(a[:8], b[:8])
