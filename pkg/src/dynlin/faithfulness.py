"""Perturbation benchmark: does the attribution predict the logit drop?

Each trial blanks a random subset of input tokens to a baseline value
and records both the logit change and the attribution mass assigned to
that subset; the score is the Pearson correlation across trials.
Only input tokens are ever perturbed, so the engine's augmentation
channel stays untouched by construction.
"""

from dataclasses import dataclass

import numpy as np

from .engine import model_forward
from .errors import ParameterError, UndefinedCorrelationError
from .modelio import ModelGraph


@dataclass
class FaithfulnessConfig:
    subset_fraction: float = 0.2
    trials: int = 30
    baseline: float = 0.0

    def subset_size(self, tokens: int) -> int:
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ParameterError(
                f"subset fraction {self.subset_fraction} outside (0, 1]")
        if self.trials < 2:
            raise ParameterError("need at least two trials to correlate")
        n = int(self.subset_fraction * tokens)
        if n < 1:
            raise ParameterError(
                f"subset of {self.subset_fraction} over {tokens} tokens is empty")
        return n


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ParameterError("correlation needs two equally long vectors")
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt((da * da).sum())
    nb = np.sqrt((db * db).sum())
    if na == 0.0 or nb == 0.0:
        raise UndefinedCorrelationError(
            "a series with zero variance has no correlation")
    return float((da * db).sum() / (na * nb))


def random_attribution(tokens: int, rng) -> np.ndarray:
    """Uniform [0, 1) noise, the reference a real method has to beat."""
    return rng.uniform(0.0, 1.0, tokens)


def faithfulness_correlation(model: ModelGraph, x, attribution,
                             class_index: int,
                             config: FaithfulnessConfig | None = None,
                             rng=None) -> float:
    config = config or FaithfulnessConfig()
    rng = np.random.default_rng() if rng is None else rng
    x = np.asarray(x, dtype=np.float64)
    attribution = np.asarray(attribution, dtype=np.float64).ravel()
    t = model.input_shape.tokens
    if attribution.size != t:
        raise ParameterError(
            f"attribution covers {attribution.size} tokens, model takes {t}")
    n = config.subset_size(t)
    base = float(model_forward(model, x)[class_index])
    deltas = []
    masses = []
    for _ in range(config.trials):
        subset = rng.choice(t, size=n, replace=False)
        perturbed = x.copy()
        perturbed[subset, :] = config.baseline
        deltas.append(base - float(model_forward(model, perturbed)[class_index]))
        masses.append(float(attribution[subset].sum()))
    return pearson(masses, deltas)
