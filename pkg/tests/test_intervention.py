import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tarac.attention_math import ImageSpan, renormalize_last_row, softmax
from tarac.intervention import (
    AccumulatedAttention,
    TaracConfig,
    TaracHook,
    apply_layer_intervention,
    capture_image_attention,
    inject_accumulated,
    reset,
    update_accumulated,
)


def random_row(rng, h, n):
    return softmax(rng.normal(size=(h, n)) * 2)


class TestConfig:
    def test_defaults_and_aliases(self):
        cfg = TaracConfig(renorm_mode="softmax", update_rule="literal", layer_range=[10, 16])
        assert cfg.renorm_mode == "softmax-diagnostic"
        assert cfg.update_rule == "two-step-literal"
        assert cfg.layer_range == (10, 16)
        assert cfg.gates(10) and cfg.gates(15) and not cfg.gates(16) and not cfg.gates(9)

    @pytest.mark.parametrize(
        "kw",
        [dict(alpha=-0.1), dict(alpha=1.1), dict(beta=-1), dict(layer_range=(3, 2)), dict(head_reducer="min"),
         dict(renorm_mode="l1"), dict(update_rule="sma"), dict(beta=float("nan"))],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TaracConfig(**kw)

    def test_large_beta_warns(self):
        with pytest.warns(UserWarning, match="repetitive"):
            TaracConfig(beta=2.5)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            TaracConfig(beta=2.0)

    def test_parse_layers(self):
        assert TaracConfig.parse_layers("10:16") == (10, 16)
        with pytest.raises(ValueError):
            TaracConfig.parse_layers("10")

    def test_layer_range_vs_depth(self):
        with pytest.raises(ValueError):
            TaracConfig(layer_range=(2, 9)).check_layers(8)


def test_capture_examples():
    row = np.array([[0.1, 0.2, 0.3, 0.4], [0.3, 0.1, 0.2, 0.4]])
    before = row.copy()
    np.testing.assert_allclose(capture_image_attention(row, ImageSpan(0, 3)), [0.3, 0.2, 0.3])
    np.testing.assert_array_equal(row, before)
    assert capture_image_attention(row, ImageSpan(2, 2)).shape == (0,)
    with pytest.raises(ValueError):
        capture_image_attention(row, ImageSpan(2, 5))


def test_capture_random_matches_bruteforce():
    rng = np.random.default_rng(1)
    row = random_row(rng, 4, 20)
    span = ImageSpan(3, 11)
    expect = [max(row[h][i] for h in range(4)) for i in range(3, 11)]
    np.testing.assert_array_equal(capture_image_attention(row, span), expect)


def test_update_first_step_records_directly():
    st_ = update_accumulated(AccumulatedAttention(), 0, [0.2, 0.4], alpha=0.3)
    np.testing.assert_array_equal(st_.accumulated(0), [0.2, 0.4])
    assert st_.t == 1


@pytest.mark.parametrize("rule", ["ema", "two-step-literal"])
def test_update_alpha_one_tracks_latest(rule):
    s = AccumulatedAttention()
    rng = np.random.default_rng(2)
    for _ in range(5):
        a = rng.random(3)
        update_accumulated(s, 4, a, 1.0, rule)
        np.testing.assert_array_equal(s.accumulated(4), a)


def test_update_ema_arithmetic():
    s = AccumulatedAttention()
    update_accumulated(s, 0, [0.4, 0.0], 0.5)
    update_accumulated(s, 0, [0.2, 0.4], 0.5)
    np.testing.assert_allclose(s.accumulated(0), [0.3, 0.2])
    assert s.t == 2


def test_update_literal_uses_previous_capture():
    s = AccumulatedAttention()
    for a in ([1.0, 0.0], [0.0, 1.0], [0.5, 0.5]):
        update_accumulated(s, 0, a, 0.25, "two-step-literal")
    np.testing.assert_allclose(s.accumulated(0), 0.25 * np.array([0.5, 0.5]) + 0.75 * np.array([0.0, 1.0]))
    np.testing.assert_allclose(s.previous(0), [0.5, 0.5])


def test_update_length_mismatch():
    s = update_accumulated(AccumulatedAttention(), 0, [0.1, 0.2], 0.5)
    with pytest.raises(ValueError):
        update_accumulated(s, 0, [0.1], 0.5)


def test_state_does_not_alias_input():
    a = np.array([0.1, 0.2])
    s = update_accumulated(AccumulatedAttention(), 0, a, 0.5)
    a[:] = 9
    np.testing.assert_array_equal(s.accumulated(0), [0.1, 0.2])


def test_fixed_range_state_rejects_other_layers():
    s = AccumulatedAttention((2, 4))
    update_accumulated(s, 3, [0.1], 0.5)
    with pytest.raises(ValueError):
        update_accumulated(s, 5, [0.1], 0.5)
    assert s.layers == [3]
    assert s.nbytes == 2 * 2 * 1 * 8


def test_state_isolation_between_layers():
    rng = np.random.default_rng(3)
    s = AccumulatedAttention()
    update_accumulated(s, 5, [0.7, 0.1], 0.5)
    snapshot = s.accumulated(5).copy()
    for _ in range(4):
        update_accumulated(s, 2, rng.random(2), 0.5)
        update_accumulated(s, 8, rng.random(2), 0.5)
    np.testing.assert_array_equal(s.accumulated(5), snapshot)
    assert s.layer_t(5) == 1 and s.layer_t(2) == 4 and s.layer_t(3) == 0
    assert s.layers == [2, 5, 8]


def test_inject_examples():
    row = np.array([[0.1, 0.2, 0.7], [0.0, 0.3, 0.7]])
    span = ImageSpan(0, 2)
    out0 = inject_accumulated(row, [0.1, 0.1], 0.0, span)
    assert out0.tobytes() == row.tobytes()
    out = inject_accumulated(row, [0.1, 0.1], 1.0, span)
    np.testing.assert_allclose(out, [[0.2, 0.3, 0.7], [0.1, 0.4, 0.7]])
    np.testing.assert_array_equal(row, [[0.1, 0.2, 0.7], [0.0, 0.3, 0.7]])
    with pytest.raises(ValueError):
        inject_accumulated(row, [0.1], 1.0, span)


def test_inject_random_elementwise():
    rng = np.random.default_rng(4)
    row, acc, beta = random_row(rng, 3, 12), rng.random(5), 0.37
    span = ImageSpan(4, 9)
    out = inject_accumulated(row, acc, beta, span)
    for h in range(3):
        np.testing.assert_allclose(out[h, 4:9], row[h, 4:9] + beta * acc, atol=1e-7)
        np.testing.assert_array_equal(out[h, :4], row[h, :4])
        np.testing.assert_array_equal(out[h, 9:], row[h, 9:])


def test_pipeline_hand_example_exact():
    # independent composition in exact rationals
    row = [Fraction(3, 10), Fraction(2, 10), Fraction(4, 10), Fraction(1, 10)]
    acc = row[:2]
    injected = [row[0] + acc[0] / 2, row[1] + acc[1] / 2, row[2], row[3]]
    total = sum(injected)
    expect = [float(x / total) for x in injected]
    assert expect == pytest.approx([0.36, 0.24, 0.32, 0.08], abs=1e-15)
    out = apply_layer_intervention(
        0, np.array([[0.3, 0.2, 0.4, 0.1]]), AccumulatedAttention(), TaracConfig(alpha=0.7, beta=0.5, layer_range=(0, 1)), ImageSpan(0, 2)
    )
    np.testing.assert_allclose(out[0], expect, atol=1e-9)


def test_out_of_range_layer_is_identity():
    row = random_row(np.random.default_rng(5), 2, 6)
    s = AccumulatedAttention()
    out = apply_layer_intervention(7, row, s, TaracConfig(layer_range=(0, 3)), ImageSpan(0, 3))
    assert out is row and s.t == 0 and s.layers == []


def test_empty_span_is_noop():
    row = random_row(np.random.default_rng(6), 2, 6)
    s = AccumulatedAttention()
    assert apply_layer_intervention(0, row, s, TaracConfig(layer_range=(0, 3)), ImageSpan(2, 2)) is row
    assert s.t == 0


def test_beta_zero_inside_range_updates_state_only():
    rng = np.random.default_rng(7)
    s = AccumulatedAttention()
    cfg = TaracConfig(alpha=0.5, beta=0.0, layer_range=(0, 2))
    span = ImageSpan(1, 4)
    for t in range(1, 4):
        row = random_row(rng, 3, 8)
        out = apply_layer_intervention(1, row, s, cfg, span)
        np.testing.assert_allclose(out, row, atol=1e-12)
        assert s.t == t
    assert s.accumulated(1) is not None


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(2, 20),
    st.floats(0, 1),
    st.floats(0, 3),
    st.sampled_from(["max", "mean"]),
    st.sampled_from(["ema", "two-step-literal"]),
    st.sampled_from(["rowsum", "softmax-diagnostic"]),
    st.integers(0, 2**32),
)
def test_fused_pipeline_equals_chained_constituents(h, n, alpha, beta, reducer, rule, renorm, seed):
    rng = np.random.default_rng(seed)
    s0 = int(rng.integers(0, n))
    span = ImageSpan(s0, int(rng.integers(s0, n + 1)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cfg = TaracConfig(alpha, beta, (0, 2), reducer, renorm, rule)
    fused, chained = AccumulatedAttention(), AccumulatedAttention()
    for _ in range(4):
        row = random_row(rng, h, n)
        got = apply_layer_intervention(1, row, fused, cfg, span)
        if len(span) == 0:
            assert got is row
            continue
        a = capture_image_attention(row, span, reducer)
        update_accumulated(chained, 1, a, alpha, rule)
        want = renormalize_last_row(inject_accumulated(row, chained.accumulated(1), beta, span), renorm)
        np.testing.assert_allclose(got, want, atol=1e-12)
        np.testing.assert_allclose(fused.accumulated(1), chained.accumulated(1), atol=1e-15)


@settings(max_examples=100)
@given(st.integers(1, 5), st.integers(1, 20), st.floats(0, 4), st.integers(0, 2**32))
def test_uplift_closed_form(h, n, beta, seed):
    rng = np.random.default_rng(seed)
    row = random_row(rng, h, n)
    s0 = int(rng.integers(0, n))
    span = ImageSpan(s0, int(rng.integers(s0 + 1, n + 1)))
    acc = rng.random(len(span)) * rng.random()
    out = renormalize_last_row(inject_accumulated(row, acc, beta, span))
    m = row[:, span.start:span.end].sum(axis=1)
    s = acc.sum()
    got = out[:, span.start:span.end].sum(axis=1)
    np.testing.assert_allclose(got, (m + beta * s) / (1 + beta * s), atol=1e-6)
    assert np.all(got >= m - 1e-12)


def test_ema_bounded_by_max_capture():
    rng = np.random.default_rng(8)
    s = AccumulatedAttention()
    caps = [rng.random(6) for _ in range(40)]
    for c in caps:
        update_accumulated(s, 0, c, 0.3)
        assert s.accumulated(0).max() <= max(x.max() for x in caps) + 1e-15
        assert s.accumulated(0).min() >= 0


def test_reset_behaviour():
    s = AccumulatedAttention()
    update_accumulated(s, 0, [0.5], 0.5)
    update_accumulated(s, 0, [0.1], 0.5)
    reset(s)
    assert s.t == 0 and s.layers == []
    reset(s)
    assert s.t == 0
    update_accumulated(s, 0, [0.9], 0.5)
    np.testing.assert_array_equal(s.accumulated(0), [0.9])
    reset(s)
    row = np.full((1, 4), 0.25)
    apply_layer_intervention(3, row, s, TaracConfig(layer_range=(0, 1)), ImageSpan(0, 2))
    assert s.t == 0


def test_hook_wraps_state():
    hook = TaracHook(TaracConfig(layer_range=(1, 2)))
    row = np.full((2, 5), 0.2)
    out = hook(1, row, ImageSpan(0, 2), 1)
    assert hook.state.t == 1
    np.testing.assert_allclose(out.sum(axis=1), 1)
    hook.reset()
    assert hook.state.t == 0
