import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from prgp.errors import IllConditionedKernelError, InputDomainError
from prgp.kernels import KernelHyperparams, build_gram, eval_kernel, grad_gram


def hp(ls=1.0, var=1.0, jitter=0.0):
    return KernelHyperparams(math.log(ls), math.log(var), jitter)


def test_kernel_at_zero_distance_is_signal_variance():
    assert eval_kernel(5.0, 5.0, hp()) == 1.0
    assert eval_kernel(0.0, 0.0, hp(0.3, 2.5)) == pytest.approx(2.5, rel=1e-15)


def test_kernel_unit_distance():
    assert eval_kernel(0.0, 1.0, hp()) == pytest.approx(0.6065306597126334, rel=1e-14)


def test_kernel_rejects_non_finite():
    with pytest.raises(InputDomainError):
        eval_kernel(float("nan"), 0.0, hp())
    with pytest.raises(InputDomainError):
        build_gram([0.0, float("inf")], hp())


def test_negative_jitter_rejected():
    with pytest.raises(InputDomainError):
        KernelHyperparams(0.0, 0.0, -1.0)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-3, 3), st.floats(-3, 3))
def test_kernel_symmetric_and_bounded(a, b, lls, lvar):
    h = KernelHyperparams(lls, lvar)
    k = eval_kernel(a, b, h)
    assert k == eval_kernel(b, a, h)
    assert 0.0 <= k <= h.signal_variance


def test_single_point_gram():
    g = build_gram([0.0], hp(var=2.0, jitter=1e-3))
    np.testing.assert_allclose(g.entries, [[2.0 * (1 + 1e-3)]], rtol=1e-15)


def test_two_point_gram():
    g = build_gram([0.0, 1.0], hp())
    e = math.exp(-0.5)
    np.testing.assert_allclose(g.entries, [[1, e], [e, 1]], rtol=1e-15)


def test_duplicate_inputs_rescued_by_jitter():
    g = build_gram([0.0, 0.0], hp(jitter=1e-6))
    assert g.entries[0, 1] == 1.0
    assert g.entries[0, 0] == pytest.approx(1 + 1e-6, rel=1e-15)
    np.testing.assert_allclose(g.chol @ g.chol.T, g.entries, rtol=1e-12)


def test_jitter_escalates_from_zero():
    g = build_gram([0.0, 0.0, 0.0], hp(jitter=0.0))
    assert 1e-8 <= g.jitter <= 1e-2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_jitter_exhaustion_raises():
    # an overflowing signal variance cannot be rescued by any jitter
    bad = KernelHyperparams(0.0, 800.0, 0.0)
    with pytest.raises(IllConditionedKernelError) as exc:
        build_gram([0.0, 1.0], bad)
    assert exc.value.jitter <= 1e-2


def test_gram_cache_key_depends_on_inputs():
    a = build_gram([0.0, 1.0], hp())
    b = build_gram([0.0, 2.0], hp())
    assert a.inputs_hash != b.inputs_hash
    assert a.inputs_hash == build_gram([0.0, 1.0], hp()).inputs_hash


@given(st.integers(1, 60), st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**31))
def test_gram_symmetric_and_factorizable(n, lls, lvar, seed):
    X = np.random.default_rng(seed).uniform(-20, 20, n)
    g = build_gram(X, KernelHyperparams(lls, lvar, 1e-8))
    assert np.array_equal(g.entries, g.entries.T)
    assert np.all(np.isfinite(g.chol))


def test_large_random_gram_factorizes(rng):
    X = rng.uniform(0, 100, 500)
    g = build_gram(X, KernelHyperparams(0.5, 0.0, 1e-8))
    assert g.entries.shape == (500, 500)
    assert np.all(np.isfinite(g.chol))


def test_grad_signal_variance_equals_gram_without_jitter():
    X = [0.0, 0.4, 2.0]
    h = hp(0.7, 1.9, 1e-4)
    d = grad_gram(X, h)
    np.testing.assert_array_equal(np.diag(d["log_signal_variance"]), [1.9] * 3)
    g = build_gram(X, h)
    np.testing.assert_allclose(d["log_signal_variance"], g.entries - g.jitter * 1.9 * np.eye(3),
                               rtol=1e-14, atol=1e-15)


def test_grad_lengthscale_unit_case():
    d = grad_gram([0.0, 1.0], hp())
    assert d["log_lengthscale"][0, 1] == pytest.approx(math.exp(-0.5), rel=1e-14)
    assert d["log_lengthscale"][0, 0] == 0.0


def _fd_gram(X, h, name, step=1e-5):
    def k(v):
        params = {"log_lengthscale": h.log_lengthscale, "log_signal_variance": h.log_signal_variance}
        params[name] = v
        X_ = np.asarray(X)
        d = X_[:, None] - X_[None, :]
        return np.exp(params["log_signal_variance"]) * np.exp(
            -0.5 * d * d / np.exp(2 * params["log_lengthscale"]))
    base = getattr(h, name)
    return (k(base + step) - k(base - step)) / (2 * step)


@given(st.integers(2, 12), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.integers(0, 2**31))
def test_grad_gram_matches_finite_differences(n, lls, lvar, seed):
    # within a few lengthscales, so the central difference itself is accurate
    X = np.random.default_rng(seed).uniform(-4, 4, n) * math.exp(lls)
    h = KernelHyperparams(lls, lvar)
    d = grad_gram(X, h)
    for name in ("log_lengthscale", "log_signal_variance"):
        fd = _fd_gram(X, h, name)
        scale = np.abs(fd).max() + 1e-300
        np.testing.assert_allclose(d[name], fd, rtol=1e-5, atol=1e-9 * scale)
