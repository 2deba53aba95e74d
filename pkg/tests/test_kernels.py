"""Backend parity: the compiled kernels and the numpy fallback must agree to
near machine precision on identical float64 inputs."""

import numpy as np
import pytest

from biloop.kernels import numpy_backend

try:
    from biloop.kernels import _core
except ImportError:
    _core = None

needs_core = pytest.mark.skipif(_core is None, reason="compiled extension not built")

BACKENDS = [numpy_backend] + ([_core] if _core is not None else [])


def _instance(rng, n=9, k=5, d=6):
    x = rng.normal(size=(n, d))
    c = rng.normal(size=(k, d))
    w = rng.normal(size=(k, d))
    b = rng.normal(size=k)
    return x, c, w, b


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__.split(".")[-1])
class TestAgainstNaiveLoops:
    def test_soft_aggregation(self, rng, backend):
        x, c, w, b = _instance(rng)
        v, a = backend.vlad_aggregate_soft(x, c, w, b)
        n, d = x.shape
        k = c.shape[0]
        logits = np.array([[x[i] @ w[kk] + b[kk] for kk in range(k)] for i in range(n)])
        expected_a = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected_v = np.zeros((k, d))
        for i in range(n):
            for kk in range(k):
                for j in range(d):
                    expected_v[kk, j] += expected_a[i, kk] * (x[i, j] - c[kk, j])
        np.testing.assert_allclose(a, expected_a, atol=1e-12)
        np.testing.assert_allclose(v, expected_v, atol=1e-12)

    def test_hard_aggregation(self, rng, backend):
        x, c, _, _ = _instance(rng)
        v, assign = backend.vlad_aggregate_hard(x, c)
        n, d = x.shape
        k = c.shape[0]
        expected_v = np.zeros((k, d))
        for i in range(n):
            dists = [np.sum((x[i] - c[kk]) ** 2) for kk in range(k)]
            kk = int(np.argmin(dists))
            assert assign[i] == kk
            expected_v[kk] += x[i] - c[kk]
        np.testing.assert_allclose(v, expected_v, atol=1e-12)

    def test_hard_tie_breaks_low_index(self, backend):
        c = np.array([[1.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
        x = np.array([[1.0, 0.0]])
        _, assign = backend.vlad_aggregate_hard(x, c)
        assert assign[0] == 0

    def test_pairwise_sqdist(self, rng, backend):
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(4, 5))
        d2 = backend.pairwise_sqdist(a, b)
        for i in range(7):
            for j in range(4):
                assert d2[i, j] == pytest.approx(np.sum((a[i] - b[j]) ** 2), abs=1e-12)


@needs_core
class TestBackendParity:
    def test_forward_and_backward_match(self, rng):
        for _ in range(10):
            x, c, w, b = _instance(rng, n=12, k=6, d=7)
            v1, a1 = numpy_backend.vlad_aggregate_soft(x, c, w, b)
            v2, a2 = _core.vlad_aggregate_soft(x, c, w, b)
            np.testing.assert_allclose(v1, v2, atol=1e-12)
            np.testing.assert_allclose(a1, a2, atol=1e-12)
            gv = rng.normal(size=v1.shape)
            g1 = numpy_backend.vlad_aggregate_soft_backward(x, c, w, a1, gv)
            g2 = _core.vlad_aggregate_soft_backward(x, c, w, a2, gv)
            for left, right in zip(g1, g2):
                np.testing.assert_allclose(left, right, atol=1e-12)

    def test_hard_and_distances_match(self, rng):
        x, c, _, _ = _instance(rng, n=30, k=4, d=8)
        v1, s1 = numpy_backend.vlad_aggregate_hard(x, c)
        v2, s2 = _core.vlad_aggregate_hard(x, c)
        np.testing.assert_allclose(v1, v2, atol=1e-12)
        assert (s1 == s2).all()
        np.testing.assert_allclose(
            numpy_backend.pairwise_sqdist(x, c), _core.pairwise_sqdist(x, c), atol=1e-12
        )

    def test_dispatch_honors_env(self, monkeypatch):
        import importlib

        import biloop.kernels as kmod

        monkeypatch.setenv("BILOOP_PURE_PYTHON", "1")
        importlib.reload(kmod)
        assert kmod.backend_name() == "python"
        monkeypatch.delenv("BILOOP_PURE_PYTHON")
        importlib.reload(kmod)
        assert kmod.backend_name() == "compiled"
