import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wdsc import tensor as T
from wdsc import transforms as tf
from wdsc.tensor import Tensor

from conftest import numeric_grad, rel_error

TABLE_ANALYSIS = [
    ("conv", 192, 5, 2, "down"), ("gdn",),
    ("conv", 192, 5, 2, "down"), ("gdn",),
    ("conv", 192, 5, 2, "down"), ("gdn",),
    ("conv", 192, 5, 2, "down"),
]
TABLE_SYNTHESIS = [
    ("conv", 192, 5, 2, "up"), ("igdn",),
    ("conv", 192, 5, 2, "up"), ("igdn",),
    ("conv", 192, 5, 2, "up"), ("igdn",),
    ("conv", 3, 5, 2, "up"),
]
TABLE_HYPER_ANALYSIS = [("conv", 192, 3, 1, "down"), ("relu",), ("conv", 192, 5, 2, "down"), ("relu",), ("conv", 192, 5, 2, "down")]
TABLE_HYPER_SYNTHESIS = [("conv", 192, 5, 2, "up"), ("relu",), ("conv", 192, 5, 2, "up"), ("relu",), ("conv", 192, 3, 1, "up")]


def _rng():
    return np.random.default_rng(0)


def test_layer_audit_n192():
    kw = dict(rng=_rng())
    assert tf.analysis_stack(192, **kw).describe() == TABLE_ANALYSIS
    assert tf.synthesis_stack(384, 192, **kw).describe() == TABLE_SYNTHESIS
    assert tf.hyper_analysis_stack(192, **kw).describe() == TABLE_HYPER_ANALYSIS
    assert tf.hyper_synthesis_stack(192, **kw).describe() == TABLE_HYPER_SYNTHESIS
    assert tf.analysis_stack(192, **kw).factor == 16
    assert tf.hyper_analysis_stack(192, **kw).factor == 4


def test_analyze_paper_shape():
    stack = tf.analysis_stack(192, rng=_rng())
    x = Tensor(np.random.default_rng(1).uniform(size=(3, 128, 256)).astype(np.float32))
    v = tf.analyze(x, stack)
    assert v.shape == (192, 8, 16)
    x_hat = tf.synthesize(T.concat([v, tf.common_info(x, stack)], axis=0), tf.synthesis_stack(384, 192, rng=_rng()))
    assert x_hat.shape == (3, 128, 256)


def test_analyze_small_shape():
    assert tf.analyze(Tensor(np.zeros((3, 32, 32))), tf.analysis_stack(8, rng=_rng())).shape == (8, 2, 2)


def test_zero_input_zero_output():
    v = tf.analyze(Tensor(np.zeros((3, 32, 32), dtype=np.float32)), tf.analysis_stack(8, rng=_rng()))
    assert not np.any(v.data)
    x = tf.synthesize(Tensor(np.zeros((16, 2, 2), dtype=np.float32)), tf.synthesis_stack(16, 8, rng=_rng()))
    assert not np.any(x.data)


def test_shape_error_not_divisible():
    with pytest.raises(ValueError, match="divisible"):
        tf.analyze(Tensor(np.zeros((3, 40, 32))), tf.analysis_stack(8, rng=_rng()))


def test_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        tf.synthesize(Tensor(np.zeros((9, 2, 2))), tf.synthesis_stack(16, 8, rng=_rng()))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_analyze_synthesize_shape_inverse(hm, wm, b):
    n = 4
    x = Tensor(np.random.default_rng(hm * 7 + wm).uniform(size=(b, 3, 16 * hm, 16 * wm)))
    v = tf.analyze(x, tf.analysis_stack(n, rng=_rng(), dtype=np.float64))
    assert v.shape == (b, n, hm, wm)
    w = Tensor(np.zeros((b, n, hm, wm)))
    assert tf.synthesize(T.concat([v, w], axis=1), tf.synthesis_stack(2 * n, n, rng=_rng(), dtype=np.float64)).shape == x.shape


def test_common_info_deterministic_and_x_independent():
    f = tf.analysis_stack(8, rng=_rng())
    y = np.random.default_rng(2).uniform(size=(3, 32, 64)).astype(np.float32)
    a = tf.common_info(Tensor(y), f).data
    b = tf.common_info(Tensor(y.copy()), f).data
    np.testing.assert_array_equal(a, b)


def test_hyper_shapes_and_positive_scales():
    n = 8
    v = Tensor(np.random.default_rng(3).normal(size=(n, 8, 16)).astype(np.float32))
    z = tf.hyper_analyze(v, tf.hyper_analysis_stack(n, rng=_rng()))
    assert z.shape == (n, 2, 4)
    sigma = tf.hyper_synthesize(z, tf.hyper_synthesis_stack(n, rng=_rng()))
    assert sigma.shape == (n, 8, 16)
    assert np.all(sigma.data > 0)


def test_hyper_paper_shapes():
    v = Tensor(np.zeros((192, 8, 16), dtype=np.float32))
    z = tf.hyper_analyze(v, tf.hyper_analysis_stack(192, rng=_rng()))
    assert z.shape == (192, 2, 4)
    assert tf.hyper_synthesize(z, tf.hyper_synthesis_stack(192, rng=_rng())).shape == (192, 8, 16)


def test_hyper_path_gradient():
    n = 2
    ha = tf.hyper_analysis_stack(n, rng=_rng(), dtype=np.float64)
    hs = tf.hyper_synthesis_stack(n, rng=_rng(), dtype=np.float64)
    v0 = np.random.default_rng(4).normal(size=(1, n, 4, 4)) + 0.5

    def f(v):
        return T.tsum(tf.hyper_synthesize(tf.hyper_analyze(Tensor(v), ha), hs))

    vt = Tensor(v0, requires_grad=True)
    out = tf.hyper_synthesize(tf.hyper_analyze(vt, ha), hs)
    T.tsum(out).backward()
    num = numeric_grad(lambda a: float(f(a).data), [v0.copy()], 0)
    assert rel_error(vt.grad, num) < 1e-2


def test_gdn_init_and_positivity():
    g = tf.GDN(4)
    np.testing.assert_allclose(g.beta().data, 1.0, rtol=1e-6)
    np.testing.assert_allclose(np.diag(g.gamma().data), 0.1, rtol=1e-5)
    off = g.gamma().data[~np.eye(4, dtype=bool)]
    assert np.all(off >= 0) and np.all(off < 1e-5)
    g.beta_raw.data[:] = -1e4
    assert np.all(g.beta().data >= tf.BETA_FLOOR)


def test_conv_init_fan_in():
    c = tf.Conv(64, 32, 5, 2, False, np.random.default_rng(0), np.float64)
    assert abs(c.weight.data.std() - np.sqrt(1 / (64 * 25))) < 0.05 * np.sqrt(1 / (64 * 25))
    assert not np.any(c.bias.data)
