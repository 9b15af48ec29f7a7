"""Shared test helpers: finite-difference gradients and mask builders."""

import numpy as np
import pytest


def central_diff_grad(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic, numeric):
    """Max-norm relative error between two gradient tensors."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    num = np.abs(analytic - numeric).max()
    den = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return num / den


def random_curvelike_mask(rng, size=32):
    """Random binary mask made of dilated polylines and blobs.

    Thin-structure masks are the domain this tooling runs on; pure salt
    noise is out of scope for the thinning component-count contract.
    """
    m = np.zeros((size, size), dtype=np.uint8)
    for _ in range(int(rng.integers(1, 4))):
        n = int(rng.integers(2, 5))
        pts = rng.uniform(2, size - 3, size=(n, 2))
        for a, b in zip(pts[:-1], pts[1:]):
            steps = int(np.ceil(np.linalg.norm(b - a))) * 2 + 1
            for t in np.linspace(0.0, 1.0, steps):
                x, y = a + t * (b - a)
                m[int(round(y)), int(round(x))] = 1
    for _ in range(int(rng.integers(0, 3))):
        cy, cx = rng.integers(2, size - 2, size=2)
        r = int(rng.integers(1, 3))
        yy, xx = np.ogrid[:size, :size]
        m[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
    # grow so strokes are wider than 1 px in places
    if rng.random() < 0.7:
        from cathseg.imagecore import BinaryMask, dilate_5x5
        m = dilate_5x5(BinaryMask(m)).data
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
