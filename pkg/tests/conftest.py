import numpy as np
import pytest

from sbfmnet.data import synthetic_edges
from sbfmnet.model import BackboneConfig


def brute_conv2d(x, k, stride=1, padding=0):
    """Quadruple-loop cross-correlation oracle (plain Python accumulation)."""
    B, C, H, W = x.shape
    F, _, K, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - K) // stride + 1
    Wo = (W + 2 * padding - K) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for b in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(K):
                            for v in range(K):
                                acc += xp[b, c, i * stride + u, j * stride + v] * k[f, c, u, v]
                    out[b, f, i, j] = acc
    return out


def brute_maxpool(x, window, stride):
    B, C, H, W = x.shape
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    out = np.empty((B, C, Ho, Wo))
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    out[b, c, i, j] = max(x[b, c, i * stride + u, j * stride + v]
                                          for u in range(window) for v in range(window))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def edge_corpus():
    return synthetic_edges(120, 16, seed=3, noise=0.05)


@pytest.fixture
def tiny_backbone():
    return BackboneConfig(blocks=((4, 1), (8, 1)), fc_widths=(16,), input_shape=(3, 16, 16), n_classes=5)
