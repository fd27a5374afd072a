"""Central finite differences, kept independent of the autodiff engine."""
import numpy as np


def numeric_grad(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """d f / d x by central differences; ``f`` maps an array to a float."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-5, atol=1e-8, floor=1e-6):
    """Relative error on components with |numeric| > floor, absolute error elsewhere."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    assert analytic.shape == numeric.shape
    big = np.abs(numeric) > floor
    if big.any():
        rel = np.abs(analytic[big] - numeric[big]) / np.abs(numeric[big])
        assert rel.max() < rtol, f"max relative error {rel.max():.3g}"
    if (~big).any():
        err = np.abs(analytic[~big] - numeric[~big]).max()
        assert err < atol, f"max absolute error {err:.3g} on small components"
