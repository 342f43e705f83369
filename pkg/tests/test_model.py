import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from salguard.errors import NumericError, SequenceLengthError, TapeStateError, VocabularyError
from salguard.model import (
    AttentionTape,
    DecodeCache,
    ModelConfig,
    NanoModel,
    backward_attention,
    init_params,
    loss_ce,
)
from salguard.verify import finite_difference_error, random_model

# -log softmax([1, 2, 3])[2], evaluated with mpmath at 40 digits
LOSS_123 = 0.407605964444380304482919904545070451473


def small_cfg(**kw):
    base = dict(n_layers=2, n_heads=2, d_model=32, vocab_size=16, max_seq_len=16, rng_seed=3)
    base.update(kw)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(precision=16)


def test_loss_uniform_and_saturated():
    assert loss_ce(np.zeros(3), 1) == pytest.approx(np.log(3), abs=1e-15)
    assert loss_ce(np.array([10.0, -10.0]), 0) == pytest.approx(2.061153620314381e-09, rel=1e-9)


def test_loss_against_high_precision_oracle():
    assert loss_ce(np.array([1.0, 2.0, 3.0]), 2) == pytest.approx(LOSS_123, abs=1e-15)


def test_loss_errors():
    with pytest.raises(NumericError):
        loss_ce(np.array([0.0, np.nan]), 0)
    with pytest.raises(VocabularyError):
        loss_ce(np.zeros(3), 3)


def test_zero_output_head_gives_uniform_logits():
    cfg = small_cfg()
    params = init_params(cfg)
    params["w_out"][:] = 0.0
    logits, _ = NanoModel(cfg, params).forward([4])
    assert np.all(logits[0] == logits[0, 0])


def test_forward_deterministic_and_shapes():
    m = random_model(small_cfg())
    toks = [1, 5, 7, 2, 9]
    a, ta = m.forward(toks)
    b, tb = m.forward(toks)
    assert np.array_equal(a, b) and np.array_equal(ta.attn, tb.attn)
    assert a.shape == (5, 16)
    assert ta.attn.shape == (2, 2, 5, 5)


def test_forward_errors():
    m = NanoModel(small_cfg())
    with pytest.raises(SequenceLengthError):
        m.forward(list(range(16)) + [0])
    with pytest.raises(VocabularyError):
        m.forward([1, 16])


def test_tape_is_causal_and_row_stochastic():
    m = random_model(small_cfg())
    _, tape = m.forward(list(range(10)))
    A = tape.attn
    assert np.all(A[..., np.triu_indices(10, 1)[0], np.triu_indices(10, 1)[1]] == 0)
    assert np.max(np.abs(A.sum(-1) - 1)) < 1e-12


def test_backward_before_forward_is_a_state_error():
    tape = AttentionTape(attn=np.zeros((1, 1, 2, 2)), n=2)
    with pytest.raises(TapeStateError):
        backward_attention(tape, 1, 0)
    with pytest.raises(TapeStateError):
        tape.gradient(0, 0)


def test_gradient_matches_finite_differences():
    m = random_model(small_cfg())
    toks = list(np.random.default_rng(11).integers(0, 16, 12))
    assert finite_difference_error(m, toks, position=11, target=5) <= 1e-4


def test_gradient_at_interior_position():
    m = random_model(small_cfg(rng_seed=8))
    toks = list(np.random.default_rng(2).integers(0, 16, 9))
    assert finite_difference_error(m, toks, position=5, target=toks[6]) <= 1e-4


def test_gradient_upper_triangle_is_zero():
    m = random_model(small_cfg())
    _, tape = m.forward(list(range(8)))
    g = backward_attention(tape, 7, 3).grad
    iu = np.triu_indices(8, 1)
    assert np.all(g[..., iu[0], iu[1]] == 0)


def test_saturated_target_has_flat_gradient():
    cfg = small_cfg()
    params = init_params(cfg)
    params["w_out"][:] = 0.0
    params["b_out"][:] = -800.0
    params["b_out"][3] = 800.0
    m = NanoModel(cfg, params)
    _, tape = m.forward([1, 2, 3, 4])
    assert np.max(np.abs(backward_attention(tape, 3, 3).grad)) < 1e-12


def test_gradient_depends_on_target():
    m = random_model(small_cfg())
    _, tape = m.forward([1, 2, 3, 4, 5])
    a = backward_attention(tape, 4, 1).grad
    b = backward_attention(tape, 4, 2).grad
    assert not np.array_equal(a, b)


def test_gradient_float32_mode():
    m64 = random_model(small_cfg())
    m32 = m64.with_precision(32)
    toks = [1, 4, 2, 8, 5, 7]
    g64 = backward_attention(m64.forward(toks)[1], 5, 3).grad
    g32 = backward_attention(m32.forward(toks)[1], 5, 3).grad
    assert g32.dtype == np.float32
    big = np.abs(g64) > 1e-4
    assert np.max(np.abs(g32[big] - g64[big]) / np.abs(g64[big])) < 1e-2


def test_decode_cache_is_bit_exact(reference_model, corpus):
    s = corpus[0]
    seq = s.prefix + s.reference_caption()
    cache = DecodeCache(reference_model)
    rows = [cache.prefill(seq[:4])]
    rows += [cache.step(t) for t in seq[4:]]
    for k, row in enumerate(rows):
        assert np.array_equal(row, reference_model.forward(seq[: k + 4])[0][-1])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=16), st.integers(0, 2**16))
def test_attention_invariants_property(tokens, seed):
    m = random_model(small_cfg(rng_seed=seed % 97))
    _, tape = m.forward(tokens)
    n = len(tokens)
    A = tape.attn
    assert A.shape == (2, 2, n, n)
    assert np.all(A >= 0)
    assert np.all(np.triu(A, 1) == 0)
    assert np.max(np.abs(A.sum(-1) - 1)) <= 1e-6
