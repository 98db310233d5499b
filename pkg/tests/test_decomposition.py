import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import best_match_corr, two_source_mixture

from taskdenoise.decomposition import DecompConfig, Method, decompose, decompose_many, reconstruct
from taskdenoise.errors import ConvergenceError, ValidationError
from taskdenoise.signal import Trial

METHODS = [Method.PCA, Method.SVD, Method.ICA]


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def _trial(c, t, seed):
    rng = np.random.default_rng(seed)
    # non-Gaussian sources keep FastICA well conditioned
    s = rng.laplace(size=(c, t))
    return Trial(rng.standard_normal((c, c)) @ s, 128.0)


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("c,t", [(4, 256), (8, 512), (3, 50)])
def test_exact_sum(method, c, t):
    for seed in range(5):
        x = _trial(c, t, seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            # the identity must hold even for an unconverged ICA iterate
            cs = decompose(x, DecompConfig(method=method, ica_strict=False), seed)
        assert cs.N == cs.M + 1 and cs.M <= c
        assert _rel(cs.components.sum(0), x.data) < 1e-9
        np.testing.assert_allclose(reconstruct(cs, np.ones(cs.N)).data, x.data, rtol=0, atol=1e-9 * np.abs(x.data).max())


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 6), t=st.integers(8, 80), seed=st.integers(0, 10_000), method=st.sampled_from([Method.PCA, Method.SVD]))
def test_exact_sum_property(c, t, seed, method):
    x = np.random.default_rng(seed).standard_normal((c, t)) * 10 ** np.random.default_rng(seed).uniform(-3, 3)
    cs = decompose(Trial(x, 1.0), DecompConfig(method=method))
    assert _rel(cs.components.sum(0), x) < 1e-9


def test_rank_one_svd():
    rng = np.random.default_rng(1)
    x = np.outer(rng.standard_normal(5), rng.standard_normal(64))
    cs = decompose(Trial(x, 1.0), DecompConfig(method="svd"))
    e = cs.energies() ** 2
    assert e[0] / np.sum(x * x) > 0.9999
    assert np.linalg.norm(cs.residual) < 1e-12 * np.linalg.norm(x)


@pytest.mark.parametrize("method", [Method.PCA, Method.SVD])
def test_spatial_orthonormal(method):
    cs = decompose(_trial(6, 300, 3), DecompConfig(method=method))
    a = cs.spatial / np.linalg.norm(cs.spatial, axis=1, keepdims=True) if method is Method.SVD else cs.spatial
    np.testing.assert_allclose(a @ a.T, np.eye(cs.M), atol=1e-8)


def test_pca_matches_covariance_eigenvalues():
    x = _trial(4, 400, 7).data
    cs = decompose(Trial(x, 1.0), DecompConfig(method="pca"))
    xc = x - x.mean(1, keepdims=True)
    lam = np.sort(np.linalg.eigvalsh(np.cov(xc)))[::-1]
    var = np.sum(cs.temporal**2, axis=1) / (x.shape[1] - 1)
    np.testing.assert_allclose(var, lam, rtol=1e-9)
    # channel means land in the residual
    np.testing.assert_allclose(cs.residual, np.repeat(x.mean(1, keepdims=True), x.shape[1], 1), atol=1e-9)


def test_ordering_and_sign_convention():
    for method in METHODS:
        cs = decompose(_trial(5, 400, 11), DecompConfig(method=method), 3)
        e = cs.energies()[:-1]
        assert np.all(np.diff(e) <= 1e-9 * e[0])
        for a in cs.spatial:
            if np.any(a):
                assert a[np.argmax(np.abs(a))] > 0
        np.testing.assert_allclose(cs.components[:-1], cs.spatial[:, :, None] * cs.temporal[:, None, :], rtol=0, atol=0)


def test_rank_deficient_pca_not_an_error():
    rng = np.random.default_rng(0)
    x = np.outer(np.ones(4), rng.standard_normal(100))
    cs = decompose(Trial(x, 1.0), DecompConfig(method="pca"))
    assert _rel(cs.components.sum(0), x) < 1e-9
    assert np.allclose(cs.components[1:-1], 0)


def test_ica_two_source_recovery():
    for seed in range(10):
        x, s = two_source_mixture(seed)
        cs = decompose(Trial(x, 250.0), DecompConfig(method="ica"), seed)
        assert best_match_corr(cs.temporal, s) > 0.95


def test_ica_deterministic():
    x = _trial(4, 300, 2)
    a = decompose(x, DecompConfig(), 9)
    b = decompose(x, DecompConfig(), 9)
    assert a.components.tobytes() == b.components.tobytes()


def test_ica_nonconvergence():
    x = _trial(6, 300, 4)
    with pytest.raises(ConvergenceError) as err:
        decompose(x, DecompConfig(ica_max_iter=1, ica_tol=1e-12), 0)
    assert err.value.n_iter == 1 and err.value.delta > 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        cs = decompose(x, DecompConfig(ica_max_iter=1, ica_tol=1e-12, ica_strict=False), 0)
    assert cs.info["converged"] is False
    assert _rel(cs.components.sum(0), x.data) < 1e-9


@pytest.mark.parametrize("nl", ["tanh", "cube"])
def test_ica_nonlinearities(nl):
    x, s = two_source_mixture(3)
    cs = decompose(Trial(x, 250.0), DecompConfig(ica_nonlinearity=nl, ica_max_iter=500), 1)
    assert best_match_corr(cs.temporal, s) > 0.9


def test_reconstruct_weights():
    cs = decompose(_trial(3, 100, 5), DecompConfig(method="pca"))
    assert np.all(reconstruct(cs, np.zeros(cs.N)).data == 0)
    for j in range(cs.N):
        w = np.zeros(cs.N)
        w[j] = 1
        np.testing.assert_array_equal(reconstruct(cs, w).data, cs.components[j])
    with pytest.raises(ValidationError):
        reconstruct(cs, np.ones(cs.N + 1))
    with pytest.raises(ValidationError):
        reconstruct(cs, np.r_[np.nan, np.ones(cs.N - 1)])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_reconstruct_linear(seed):
    cs = decompose(_trial(4, 64, seed % 7), DecompConfig(method="svd"))
    rng = np.random.default_rng(seed)
    w1, w2 = rng.normal(size=(2, cs.N))
    lhs = reconstruct(cs, w1 + w2).data
    rhs = reconstruct(cs, w1).data + reconstruct(cs, w2).data
    assert np.abs(lhs - rhs).max() <= 1e-9 * max(1.0, np.abs(lhs).max())


def test_config_validation():
    with pytest.raises(ValidationError):
        DecompConfig(ica_tol=0)
    with pytest.raises(ValidationError):
        DecompConfig(ica_max_iter=0)
    with pytest.raises(ValidationError):
        DecompConfig(ica_nonlinearity="logcosh")
    with pytest.raises(ValueError):
        DecompConfig(method="cca")


def test_decompose_many_matches_single():
    data = np.stack([_trial(3, 120, s).data for s in range(3)])
    stack, infos = decompose_many(data, DecompConfig(), seed=4, fs=128.0)
    assert stack.shape == (3, 4, 3, 120) and len(infos) == 3
    np.testing.assert_allclose(stack.sum(1), data, atol=1e-9 * np.abs(data).max())
    again, _ = decompose_many(data, DecompConfig(), seed=4, fs=128.0)
    assert again.tobytes() == stack.tobytes()


def test_short_trial_warns():
    with pytest.warns(UserWarning):
        decompose(Trial(np.random.default_rng(0).normal(size=(4, 4)), 1.0), DecompConfig(method="svd"))
