import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from margindistill.errors import DimensionMismatch, ZeroNorm
from margindistill.geometry import (
    COS_CLAMP,
    ClassCenters,
    EmbeddingBatch,
    cosine_logits,
    l2_normalize,
    normalize_cols_backward,
    normalize_rows,
    normalize_rows_backward,
    safe_arccos,
)

from conftest import unit_cols, unit_rows


def test_l2_normalize_345_triangle():
    assert np.allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)


def test_l2_normalize_already_unit():
    assert np.allclose(l2_normalize([0.0, 1.0]), [0.0, 1.0], atol=0)


def test_l2_normalize_degenerate_raises():
    with pytest.raises(ZeroNorm):
        l2_normalize([1e-15, 0.0])


finite_vectors = arrays(
    np.float64, st.integers(1, 12),
    elements=st.floats(-1e6, 1e6, allow_nan=False)،=False) if False else arrays(
    np.float64, st.integers(1, 12),
    elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False))


@given(finite_vectors)
def test_l2_normalize_idempotent(v):
    try:
        once = l2_normalize(v)
    except ZeroNorm:
        return
    twice = l2_normalize(once)
    assert np.abs(twice - once).max() < 1e-12
    assert abs(np.linalg.norm(once) - 1.0) < 1e-12


@given(finite_vectors, st.floats(1e-3, 1e3))
def test_l2_normalize_scale_invariant(v, alpha):
    try:
        base = l2_normalize(v)
    except ZeroNorm:
        return
    assert np.abs(l2_normalize(alpha * v) - base).max() < 1e-12


def test_cosine_logits_identical_vector_clamped(rng):
    x = unit_rows(1, 6, rng)
    out = cosine_logits(EmbeddingBatch(x), ClassCenters(x.T))
    assert out.data[0, 0] == pytest.approx(1.0 - COS_CLAMP, abs=0)


def test_cosine_logits_orthogonal():
    x = EmbeddingBatch(np.array([[1.0, 0.0]]))
    w = ClassCenters(np.array([[0.0], [1.0]]))
    assert cosine_logits(x, w).data[0, 0] == 0.0


def test_cosine_logits_matches_scalar_loop_oracle(rng):
    x = unit_rows(4, 8, rng)
    w = unit_cols(8, 3, rng)
    out = cosine_logits(EmbeddingBatch(x), ClassCenters(w))
    for i in range(4):
        for j in range(3):
            dot = 0.0
            for k in range(8):
                dot += x[i, k] * w[k, j]
            dot = min(max(dot, -1.0 + COS_CLAMP), 1.0 - COS_CLAMP)
            assert abs(out.data[i, j] - dot) < 1e-12


def test_cosine_logits_dimension_mismatch(rng):
    x = EmbeddingBatch(unit_rows(2, 4, rng))
    w = ClassCenters(unit_cols(6, 3, rng))
    with pytest.raises(DimensionMismatch):
        cosine_logits(x, w)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_cosine_logits_clamp_fuzz(seed):
    gen = np.random.default_rng(seed)
    out = cosine_logits(EmbeddingBatch(unit_rows(5, 3, gen)),
                        ClassCenters(unit_cols(3, 4, gen)))
    assert out.data.min() >= -1.0 + COS_CLAMP
    assert out.data.max() <= 1.0 - COS_CLAMP


def test_safe_arccos_endpoints():
    assert safe_arccos(1.0) == 0.0
    assert safe_arccos(0.0) == pytest.approx(np.pi / 2, abs=0)
    assert safe_arccos(-1.0) == pytest.approx(np.pi, abs=0)


def test_safe_arccos_monotone_decreasing():
    c = np.linspace(-1, 1, 101)
    theta = safe_arccos(c)
    assert np.all(np.diff(theta) < 0)
    assert theta.min() >= 0 and theta.max() <= np.pi


def test_embedding_batch_rejects_non_unit_rows():
    with pytest.raises(ZeroNorm):
        EmbeddingBatch(np.array([[1.0, 1.0]]))


def test_class_centers_rejects_non_unit_columns():
    with pytest.raises(ZeroNorm):
        ClassCenters(np.array([[2.0], [0.0]]))


def test_normalize_rows_backward_is_tangent(rng):
    raw = rng.standard_normal((5, 7)) * 3.0
    g = rng.standard_normal((5, 7))
    back = normalize_rows_backward(raw, g)
    unit = normalize_rows(raw)
    assert np.abs((back * unit).sum(axis=1)).max() < 1e-10


def test_normalize_cols_backward_matches_fd(rng):
    from conftest import central_diff, max_rel_err

    raw = rng.standard_normal((4, 3)) * 2.0
    target = rng.standard_normal((4, 3))

    def f(v):
        return float((v / np.linalg.norm(v, axis=0, keepdims=True) * target).sum())

    analytic = normalize_cols_backward(raw, target)
    assert max_rel_err(analytic, central_diff(f, raw)) < 1e-6
