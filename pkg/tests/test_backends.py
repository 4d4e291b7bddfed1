"""The numba kernels and the NumPy reference must agree."""

import numpy as np
import pytest

from coopdet.backend import available_backends, get_backend, kernels, set_backend

from oracles import random_grid, random_kernel

needs_both = pytest.mark.skipif(
    "numba" not in available_backends(), reason="numba backend unavailable"
)


@pytest.fixture
def pair():
    return get_backend("numpy"), get_backend("numba")


@needs_both
class TestKernelEquivalence:
    def test_conv_active(self, pair, rng):
        np_k, nb_k = pair
        for _ in range(10):
            h = int(rng.integers(4, 16))
            w = int(rng.integers(4, 16))
            stride = int(rng.choice([1, 2]))
            idx, feats = random_grid(rng, h, w, 3, 0.4)
            kw, kb, _ = random_kernel(rng, int(rng.choice([3, 5])), 3, 4)
            hout = (h - 1) // stride + 1
            wout = (w - 1) // stride + 1
            ia, fa = np_k.conv_active(idx, feats, kw, kb, stride, hout, wout)
            ib, fb = nb_k.conv_active(idx, feats, kw, kb, stride, hout, wout)
            np.testing.assert_array_equal(ia, ib)
            np.testing.assert_allclose(fa, fb, atol=1e-10)

    def test_subm_active(self, pair, rng):
        np_k, nb_k = pair
        for _ in range(10):
            idx, feats = random_grid(rng, 10, 10, 4, 0.4)
            kw, kb, _ = random_kernel(rng, 3, 4, 2)
            fa = np_k.subm_active(idx, feats, kw, kb, 10, 10)
            fb = nb_k.subm_active(idx, feats, kw, kb, 10, 10)
            np.testing.assert_allclose(fa, fb, atol=1e-10)

    def test_maxpool_keep(self, pair, rng):
        np_k, nb_k = pair
        for _ in range(20):
            idx, _ = random_grid(rng, 12, 12, 1, 0.4)
            scores = rng.choice([0.2, 0.5, 0.5, 0.9], size=idx.shape[0])
            window = int(rng.choice([3, 5]))
            ka = np_k.maxpool_keep(idx, scores, window, 12, 12)
            kb = nb_k.maxpool_keep(idx, scores, window, 12, 12)
            np.testing.assert_array_equal(ka, kb)

    def test_mc_iou_within_sampling_noise(self, pair, rng):
        np_k, nb_k = pair
        a = np.array([0.0, 0.0, 2.0, 4.0, 0.3])
        b = np.array([0.5, 0.5, 2.0, 4.0, -0.5])
        ia = np_k.mc_iou(a, b, 200_000, 1)
        ib = nb_k.mc_iou(a, b, 200_000, 1)
        assert abs(ia - ib) < 5e-3  # independent RNG streams


class TestSelection:
    def test_env_and_setter(self, monkeypatch):
        import coopdet.backend as bk

        set_backend("numpy")
        assert kernels().NAME == "numpy"
        if "numba" in available_backends():
            set_backend("numba")
            assert kernels().NAME == "numba"
        monkeypatch.setenv(bk.ENV_VAR, "numpy")
        assert get_backend().NAME == "numpy"
        with pytest.raises(ValueError):
            get_backend("not-a-backend")
        # restore the default for the rest of the session
        set_backend("numba" if "numba" in available_backends() else "numpy")

    def test_empty_inputs(self):
        for name in available_backends():
            k = get_backend(name)
            idx = np.zeros((0, 2), np.int64)
            feats = np.zeros((0, 2))
            kw = np.zeros((9, 2, 3))
            kb = np.zeros(3)
            oi, of = k.conv_active(idx, feats, kw, kb, 1, 5, 5)
            assert oi.shape == (0, 2) and of.shape == (0, 3)
            assert k.subm_active(idx, feats, kw, kb, 5, 5).shape == (0, 3)
            assert k.maxpool_keep(idx, np.zeros(0), 3, 5, 5).shape == (0,)
