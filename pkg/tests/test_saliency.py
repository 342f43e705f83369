import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from salguard.errors import NoHistoryError, ShapeError, TapeStateError
from salguard.layout import TokenLayout
from salguard.model import ModelConfig, backward_attention
from salguard.saliency import (
    APPENDIX_TAYLOR,
    MAIN_TEXT,
    SaliencyScoreConfig,
    SaliencyStack,
    appendix_saliency,
    build_stack,
    candidate_score,
    export_map,
    export_svg,
    layer_saliency,
    per_head_saliency,
    read_map,
    sidecar_path,
)
from salguard.verify import random_model

finite = st.floats(-10, 10, allow_nan=False)


def test_per_head_example():
    A = np.array([[0.7, 0.3], [0.5, 0.5]])
    G = np.array([[0.2, -0.1], [-0.4, 0.3]])
    np.testing.assert_allclose(per_head_saliency(A, G), [[0.14, 0.0], [0.20, 0.15]], atol=1e-15)


def test_per_head_zero_and_identity():
    assert not per_head_saliency(np.ones((3, 3)), np.zeros((3, 3))).any()
    np.testing.assert_array_equal(per_head_saliency(np.eye(3), np.eye(3)), np.eye(3))


def test_per_head_shape_mismatch():
    with pytest.raises(ShapeError):
        per_head_saliency(np.ones((2, 2)), np.ones((3, 3)))


def test_layer_example():
    mat, deg = layer_saliency([[[3.0, 0.0], [0.0, 4.0]], [[0.0, 0.0], [0.0, 0.0]]])
    np.testing.assert_allclose(mat, [[0.6, 0.0], [0.0, 0.8]], atol=1e-15)
    assert not deg


def test_layer_idempotent_on_unit_norm():
    m = np.tril(np.random.default_rng(0).random((4, 4)))
    m /= np.linalg.norm(m)
    out, _ = layer_saliency([m])
    np.testing.assert_allclose(out, m, rtol=1e-15)


def test_layer_degenerate():
    mat, deg = layer_saliency(np.zeros((2, 3, 3)))
    assert deg and not mat.any()


def test_mode_cancellation_example():
    A = np.ones((2, 1, 1))
    G = np.array([[[1.0]], [[-1.0]]])
    main_raw = sum(per_head_saliency(A[h], G[h]) for h in range(2))
    assert main_raw[0, 0] == 2.0
    assert appendix_saliency(A, G)[0, 0] == 0.0


def test_appendix_single_head_matches_main():
    rng = np.random.default_rng(1)
    A, G = rng.random((1, 4, 4)), rng.normal(size=(1, 4, 4))
    np.testing.assert_array_equal(appendix_saliency(A, G), per_head_saliency(A[0], G[0]))


def test_appendix_positive_products_is_head_mean():
    rng = np.random.default_rng(2)
    A, G = rng.random((3, 4, 4)), rng.random((3, 4, 4))
    np.testing.assert_allclose(appendix_saliency(A, G), np.tril((A * G).mean(axis=0)), rtol=1e-14)


def test_candidate_score_example():
    layers = np.zeros((3, 8, 8))
    layers[1, 7, 5:7] = [0.2, 0.4]
    layers[2, 7, 5:7] = [0.1, 0.3]
    cfg = SaliencyScoreConfig(target_layers=(1, 2), layout=TokenLayout(2, 3))
    assert candidate_score(SaliencyStack(layers), cfg, 7) == pytest.approx(0.25, abs=1e-15)


def test_candidate_score_zero_single_and_empty():
    cfg = SaliencyScoreConfig(target_layers=(0,), layout=TokenLayout(1, 1))
    assert candidate_score(SaliencyStack(np.zeros((1, 4, 4))), cfg, 3) == 0.0
    layers = np.zeros((1, 4, 4))
    layers[0, 3, 2] = 0.7
    single = SaliencyScoreConfig(target_layers=(0,), layout=TokenLayout(1, 1, output_start=2))
    assert candidate_score(SaliencyStack(layers), single, 3) == 0.7
    with pytest.raises(NoHistoryError):
        candidate_score(SaliencyStack(layers), cfg, 2)


def test_predecessor_only_key_set():
    cfg = SaliencyScoreConfig(layout=TokenLayout(2, 3), predecessor_only=True)
    assert list(cfg.key_positions(9)) == [8]
    assert list(cfg.key_positions(5)) == []


def test_text_reading_excludes_prompt():
    lay = TokenLayout(2, 3, prompt_len=2)
    assert list(SaliencyScoreConfig(layout=lay).key_positions(9)) == [5, 6, 7, 8]
    assert list(SaliencyScoreConfig(layout=lay.with_text_reading()).key_positions(9)) == [7, 8]


def test_target_layers_validation():
    with pytest.raises(ValueError):
        SaliencyScoreConfig(target_layers=())
    cfg = SaliencyScoreConfig(target_layers=(4,), layout=TokenLayout(0, 0))
    with pytest.raises(ValueError):
        candidate_score(SaliencyStack(np.zeros((4, 3, 3))), cfg, 2)


def test_build_stack_requires_gradients():
    m = random_model(ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=8, max_seq_len=8))
    _, tape = m.forward([1, 2, 3])
    with pytest.raises(TapeStateError):
        build_stack(tape)


def test_stack_structure_on_model():
    m = random_model(ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=8, max_seq_len=12))
    _, tape = m.forward([1, 2, 3, 4, 5, 6, 7])
    stack = build_stack(backward_attention(tape, 6, 2))
    assert stack.mode == MAIN_TEXT
    for l in range(stack.n_layers):
        S = stack[l]
        assert np.all(np.triu(S, 1) == 0) and np.all(S >= 0)
        assert np.linalg.norm(S) == pytest.approx(1.0, abs=1e-6)
    appx = build_stack(backward_attention(tape, 6, 2), APPENDIX_TAYLOR)
    assert appx.mode == APPENDIX_TAYLOR and np.all(appx.layers >= 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)), arrays(np.float64, (5, 5), elements=finite), st.integers(0, 2**32 - 1))
def test_sign_invariance_property(A, G, seed):
    flip = np.where(np.random.default_rng(seed).random((5, 5)) < 0.5, -1.0, 1.0)
    np.testing.assert_array_equal(per_head_saliency(A, G), per_head_saliency(A, G * flip))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4, 4), elements=st.floats(0, 5)), st.floats(1e-3, 1e3))
def test_layer_scale_invariance_property(heads, a):
    heads = np.tril(heads)
    base, deg = layer_saliency(heads)
    scaled, _ = layer_saliency(heads * a)
    if not deg:
        np.testing.assert_allclose(scaled, base, rtol=1e-12, atol=1e-15)
        assert np.linalg.norm(base) == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 6, 6), elements=st.floats(0, 1)), st.floats(0, 100))
def test_candidate_score_linearity_property(layers, a):
    cfg = SaliencyScoreConfig(target_layers=(0, 1), layout=TokenLayout(1, 1))
    stack = SaliencyStack(layers)
    assert candidate_score(stack.scaled(a), cfg, 5) == pytest.approx(a * candidate_score(stack, cfg, 5), rel=1e-12, abs=1e-300)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 4, 4), elements=st.floats(0, 1)), arrays(np.float64, (1, 4, 4), elements=finite))
def test_modes_agree_for_one_head_property(A, G):
    np.testing.assert_array_equal(appendix_saliency(A, G), per_head_saliency(A[0], G[0]))


def test_export_dense_two_by_two(tmp_path):
    stack = SaliencyStack(np.array([[[0.6, 0.0], [0.1, 0.8]]]))
    p = export_map(stack, 0, tmp_path / "m.csv", fmt="grid")
    assert len(p.read_text().splitlines()) == 2


def test_export_round_trip_and_sidecar(tmp_path):
    rng = np.random.default_rng(4)
    stack = SaliencyStack(np.tril(rng.random((2, 6, 6))))
    lay = TokenLayout(2, 3, prompt_len=1)
    for fmt in ("triples", "grid"):
        p = export_map(stack, 1, tmp_path / f"m_{fmt}.csv", fmt=fmt, layout=lay)
        back = read_map(p, fmt)
        np.testing.assert_allclose(back, stack[1], rtol=1e-12)
        meta = json.loads(sidecar_path(p).read_text())
        assert (meta["sys_len"], meta["img_len"], meta["prompt_len"]) == (2, 3, 1)
    assert (tmp_path / "m_triples.csv").read_text().splitlines()[0] == "i,j,value"


def test_export_one_by_one(tmp_path):
    p = export_map(SaliencyStack(np.ones((1, 1, 1))), 0, tmp_path / "one.csv")
    assert p.read_text().splitlines() == ["i,j,value", "0,0,1"]


def test_svg_golden(tmp_path):
    mat = np.array([[1.0, 0.0], [0.5, 0.25]])
    p = export_svg(mat, tmp_path / "m.svg", TokenLayout(1, 0), cell=4)
    golden = (
        '<svg xmlns="http://www.w3.org/2000/svg" width="8" height="8" viewBox="0 0 8 8">\n'
        '<rect x="0" y="0" width="4" height="4" fill="rgb(0,0,0)"/>\n'
        '<rect x="4" y="0" width="4" height="4" fill="rgb(255,255,255)"/>\n'
        '<rect x="0" y="4" width="4" height="4" fill="rgb(114,114,114)"/>\n'
        '<rect x="4" y="4" width="4" height="4" fill="rgb(199,199,199)"/>\n'
        '<line x1="4" y1="0" x2="4" y2="8" stroke="red" stroke-width="1"/>\n'
        '<line x1="0" y1="4" x2="8" y2="4" stroke="red" stroke-width="1"/>\n'
        "</svg>\n"
    )
    assert p.read_text() == golden
