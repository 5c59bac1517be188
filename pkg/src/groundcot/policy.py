"""Linear-logistic include/exclude policy over per-candidate features.

Each candidate contributes one binary token: 1 = include, 0 = exclude, with
``P(include) = sigmoid(w . phi / temperature)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ToyPolicyParams:
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise ValueError("policy weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def zeros(cls, d: int) -> "ToyPolicyParams":
        return cls(np.zeros(d))

    def __eq__(self, other) -> bool:
        return isinstance(other, ToyPolicyParams) and np.array_equal(self.weights, other.weights)

    __hash__ = None  # type: ignore[assignment]


def _check_dims(weights: np.ndarray, features: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != weights.shape[0]:
        raise ValueError(
            f"feature matrix of shape {features.shape} does not match {weights.shape[0]} weights"
        )


def include_prob(weights: np.ndarray, features: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    _check_dims(weights, features)
    z = features @ weights / temperature
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def token_logprobs(
    weights: np.ndarray, features: np.ndarray, tokens: np.ndarray, temperature: float = 1.0
) -> np.ndarray:
    """Log-probability of each include/exclude token."""
    _check_dims(weights, features)
    tokens = np.asarray(tokens)
    if tokens.shape != (features.shape[0],):
        raise ValueError(f"need one token per candidate, got {tokens.shape} for {features.shape[0]}")
    z = features @ weights / temperature
    sign = np.where(tokens == 1, 1.0, -1.0)
    return -np.logaddexp(0.0, -sign * z)


def token_logprob_grads(
    weights: np.ndarray, features: np.ndarray, tokens: np.ndarray, temperature: float = 1.0
) -> np.ndarray:
    """Per-token gradient rows ``d logp_t / d w = (y_t - p_t) phi_t / T``."""
    p = include_prob(weights, features, temperature)
    return ((np.asarray(tokens, dtype=np.float64) - p) / temperature)[:, None] * features
