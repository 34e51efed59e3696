"""Backend kernels: numpy reference behaviour and compiled/numpy agreement."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nextbasket import _kernels

BACKENDS = _kernels.available_backends()
numpy_backend = _kernels.get_backend("numpy")


def backend_param():
    return pytest.mark.parametrize("backend", BACKENDS)


@backend_param()
def test_softmax_rows_sum_to_one(backend):
    kernel = _kernels.get_backend(backend)
    x = np.random.default_rng(0).uniform(-50, 50, size=(40, 9))
    y = kernel.softmax_fwd(x)
    assert np.all(y > 0) and np.all(y < 1)
    assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-12


@backend_param()
def test_softmax_extreme_logits_no_overflow(backend):
    kernel = _kernels.get_backend(backend)
    y = kernel.softmax_fwd(np.array([[1000.0, 0.0]]))
    assert np.isfinite(y).all()
    assert y[0, 0] == pytest.approx(1.0)
    assert y[0, 1] == pytest.approx(0.0, abs=1e-300)


@backend_param()
def test_softmax_uniform_logits(backend):
    kernel = _kernels.get_backend(backend)
    y = kernel.softmax_fwd(np.zeros((1, 3)))
    assert np.abs(y - 1.0 / 3.0).max() < 1e-15


@backend_param()
def test_softmax_against_high_precision_oracle(backend):
    # exp-normalize of [1, 2, 3] computed with 50-digit Decimal arithmetic
    expected = np.array([0.09003057317038046, 0.24472847105479764, 0.6652409557748219])
    kernel = _kernels.get_backend(backend)
    y = kernel.softmax_fwd(np.array([[1.0, 2.0, 3.0]]))
    assert np.abs(y[0] - expected).max() < 1e-12


@backend_param()
def test_layer_norm_constant_row_gives_bias(backend):
    kernel = _kernels.get_backend(backend)
    gain = np.full(5, 2.0)
    bias = np.linspace(0, 1, 5)
    y, xhat, _ = kernel.layer_norm_fwd(np.full((3, 5), 7.0), gain, bias, 1e-12)
    assert np.abs(xhat).max() < 1e-6   # zero variance collapses to epsilon-scaled zeros
    assert np.abs(y - bias).max() < 1e-6


@backend_param()
def test_gelu_known_values(backend):
    kernel = _kernels.get_backend(backend)
    x = np.array([0.0, 100.0, -100.0])
    y = kernel.gelu_fwd(x)
    assert y[0] == 0.0
    assert y[1] == pytest.approx(100.0)
    assert abs(y[2]) < 1e-10


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
@pytest.mark.parametrize("shape", [(1, 1), (5, 7), (3, 4, 9), (2, 2, 3, 6)])
def test_backends_agree(shape):
    compiled = _kernels.get_backend("compiled")
    rng = np.random.default_rng(42)
    x = rng.normal(size=shape) * 4
    gy = rng.normal(size=shape)
    cols = shape[-1]
    gain, bias = rng.normal(size=cols), rng.normal(size=cols)

    assert np.abs(numpy_backend.gelu_fwd(x) - compiled.gelu_fwd(x)).max() < 1e-12
    assert np.abs(numpy_backend.gelu_bwd(x, gy) - compiled.gelu_bwd(x, gy)).max() < 1e-12

    y_ref = numpy_backend.softmax_fwd(x)
    assert np.abs(y_ref - compiled.softmax_fwd(x)).max() < 1e-12
    assert np.abs(numpy_backend.softmax_bwd(y_ref, gy)
                  - compiled.softmax_bwd(y_ref, gy)).max() < 1e-12

    ly_ref = numpy_backend.log_softmax_fwd(x)
    assert np.abs(ly_ref - compiled.log_softmax_fwd(x)).max() < 1e-12
    assert np.abs(numpy_backend.log_softmax_bwd(ly_ref, gy)
                  - compiled.log_softmax_bwd(ly_ref, gy)).max() < 1e-12

    ref = numpy_backend.layer_norm_fwd(x, gain, bias, 1e-12)
    got = compiled.layer_norm_fwd(x, gain, bias, 1e-12)
    for a, b in zip(ref, got):
        assert a.shape == b.shape
        assert np.abs(a - b).max() < 1e-12
    ref_b = numpy_backend.layer_norm_bwd(ref[1], ref[2], gain, gy)
    got_b = compiled.layer_norm_bwd(got[1], got[2], gain, gy)
    for a, b in zip(ref_b, got_b):
        assert np.abs(a - b).max() < 1e-12


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
def test_adam_backends_agree_over_steps():
    compiled = _kernels.get_backend("compiled")
    rng = np.random.default_rng(3)
    p1 = rng.normal(size=100)
    p2 = p1.copy()
    m1, v1 = np.zeros(100), np.zeros(100)
    m2, v2 = np.zeros(100), np.zeros(100)
    for step in range(1, 11):
        g = rng.normal(size=100)
        numpy_backend.adam_update(p1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, step)
        compiled.adam_update(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, step)
    assert np.abs(p1 - p2).max() < 1e-12
    assert np.abs(m1 - m2).max() < 1e-12
    assert np.abs(v1 - v2).max() < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=24))
def test_softmax_distribution_property(values):
    x = np.array([values])
    for backend in BACKENDS:
        y = _kernels.get_backend(backend).softmax_fwd(x)
        assert np.all(y >= 0)
        assert abs(y.sum() - 1.0) < 1e-12


def test_use_backend_switches_and_restores():
    previous = _kernels.use_backend("numpy")
    try:
        assert _kernels.active.NAME == "numpy"
    finally:
        _kernels.use_backend(previous)
    assert _kernels.active.NAME == previous


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        _kernels.get_backend("cuda")
