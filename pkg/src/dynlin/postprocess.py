"""Cosmetic cleanup of attribution maps for display.

The pipeline order is fixed: negative clip, then quantile clamp, then
mean smoothing.  It only shapes what a human sees; the completeness
checks always run on the raw attribution, never on this output.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ParameterError, ShapeError
from .layers import TokenShape


@dataclass
class PostConfig:
    clip_negatives: bool = True
    quantile: float = 0.99     # nearest-rank clamp threshold, in (0.5, 1]
    kernel: int = 3            # odd mean-filter width; 1 disables smoothing

    def validate(self):
        if not 0.5 < self.quantile <= 1.0:
            raise ParameterError(
                f"quantile {self.quantile} must lie in (0.5, 1]")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ParameterError(f"kernel {self.kernel} must be odd and >= 1")
        return self


def nearest_rank_quantile(values, q: float) -> float:
    """The smallest element whose rank covers fraction q (nearest-rank rule)."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ShapeError("quantile of an empty array")
    rank = int(np.ceil(q * v.size))
    return float(v[max(rank, 1) - 1])


def postprocess(attribution, shape: TokenShape,
                config: PostConfig | None = None) -> np.ndarray:
    """Returns the display map as an (height, width) array."""
    config = (config or PostConfig()).validate()
    h, w = shape.with_grid()
    a = np.asarray(attribution, dtype=np.float64).ravel()
    if a.size != shape.tokens:
        raise ShapeError(
            f"attribution has {a.size} entries for {shape.tokens} tokens")
    if config.clip_negatives:
        a = np.maximum(a, 0.0)
    top = nearest_rank_quantile(a, config.quantile)
    a = np.minimum(a, top)
    grid = a.reshape(h, w)
    if config.kernel > 1:
        grid = uniform_filter(grid, size=config.kernel, mode="nearest")
    return grid
