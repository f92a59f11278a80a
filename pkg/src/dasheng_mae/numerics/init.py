import numpy as np

from .rng import Rng


def trunc_normal(rng: Rng, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within two standard deviations."""
    n = int(np.prod(shape))
    out = rng.normal(0.0, 1.0, size=n)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).reshape(shape).astype(dtype)
