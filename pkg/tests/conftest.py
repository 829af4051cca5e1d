import numpy as np
import pytest

from margindistill.geometry import ClassCenters, CosineLogits, EmbeddingBatch, clamp_cosines


def unit_rows(n, d, rng):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def unit_cols(d, n, rng):
    m = rng.standard_normal((d, n))
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def random_batch(seed, n=8, n_classes=5, d=16):
    """Random embeddings, centers, clamped logits and labels."""
    rng = np.random.default_rng(seed)
    x = EmbeddingBatch(unit_rows(n, d, rng))
    w = ClassCenters(unit_cols(d, n_classes, rng))
    logits = CosineLogits(clamp_cosines(x.data @ w.data))
    labels = rng.integers(0, n_classes, size=n)
    return x, w, logits, labels


def central_diff(f, x, step=1e-5):
    """Central finite differences of scalar f over every entry of x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def max_rel_err(analytic, fd):
    """Per-entry relative error with a floor tied to the gradient scale,
    so entries 6+ orders below the dominant gradient (pure FD roundoff
    noise) do not register as disagreement."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(fd, dtype=np.float64)
    gmax = max(np.abs(a).max(), np.abs(f).max(), 1e-12)
    denom = np.maximum.reduce([np.abs(a), np.abs(f),
                               np.full_like(a, 1e-6 * gmax),
                               np.full_like(a, 1e-12)])
    return float((np.abs(a - f) / denom).max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
