"""Stochastic cosine classifier.

Each class owns a weight distribution (mu, sigma); a concrete weight vector
is drawn with the reparameterization phi = mu + eps (*) softplus(sigma - c),
eps ~ N(0, 1), so gradients flow into both mu and sigma.  Scores are
temperature-scaled cosine similarities between the sampled weight and the
feature, turned into class probabilities by a softmax.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, DomainError
from .numerics import SeededRng, Tensor, concat, l2_normalize, reshape, softmax, softplus

SOFTPLUS_OFFSET = 4.0  # hyper-parameter c; sigma starts at c so the initial noise scale is ln 2


class StochasticHead:
    """Per-class (mu, sigma) rows over features of dimension `dim`."""

    def __init__(self, dim: int, temperature: float = 16.0, offset: float = SOFTPLUS_OFFSET):
        if temperature <= 0:
            raise ArgumentError(f"temperature must be positive, got {temperature}")
        self.dim = dim
        self.temperature = temperature
        self.offset = offset
        self.mu: list[Tensor] = []
        self.sigma: list[Tensor] = []

    @property
    def num_classes(self) -> int:
        return len(self.mu)

    def add_class(self, mean: np.ndarray) -> int:
        """Append one class row; existing rows are untouched."""
        mean = np.asarray(mean, dtype=float)
        if mean.shape != (self.dim,):
            raise ArgumentError(f"prototype shape {mean.shape} does not match head dim {self.dim}")
        self.mu.append(Tensor(mean.copy(), requires_grad=True))
        self.sigma.append(Tensor(np.full(self.dim, self.offset), requires_grad=True))
        return self.num_classes - 1

    def sample_weights(self, class_index: int, rng: SeededRng | None = None, noise: bool = True, frozen_eps: np.ndarray | None = None) -> Tensor:
        """phi_m = mu_m + eps (*) softplus(sigma_m - c); phi = mu when noise is off.

        `frozen_eps` fixes the draw so the sampling path stays deterministic
        for gradient checking.
        """
        if not 0 <= class_index < self.num_classes:
            raise ArgumentError(f"class index {class_index} out of range (M={self.num_classes})")
        mu = self.mu[class_index]
        if not noise:
            return mu + 0.0
        if frozen_eps is not None:
            eps = np.asarray(frozen_eps, dtype=float)
        elif rng is not None:
            eps = rng.normal(size=self.dim)
        else:
            raise ArgumentError("noise=True needs an rng or a frozen eps")
        return mu + Tensor(eps) * softplus(self.sigma[class_index] - self.offset)

    def _weight_matrix(self, rng, noise, frozen_eps) -> Tensor:
        rows = []
        for m in range(self.num_classes):
            eps = frozen_eps[m] if frozen_eps is not None else None
            sub = rng.child(f"class{m}") if (rng is not None and noise and frozen_eps is None) else rng
            rows.append(reshape(self.sample_weights(m, sub, noise=noise, frozen_eps=eps), (1, self.dim)))
        return concat(rows, axis=0)

    def logits(self, z: Tensor, rng: SeededRng | None = None, noise: bool = False, frozen_eps: np.ndarray | None = None) -> Tensor:
        """eta * <phi_hat_m, z_hat> for every class; z may be (d,) or (B, d)."""
        if self.num_classes == 0:
            raise ArgumentError("head has no classes")
        zdata = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=float)
        if np.any(np.linalg.norm(np.atleast_2d(zdata), axis=-1) == 0.0):
            raise DomainError("class probabilities undefined for zero feature vectors")
        z = z if isinstance(z, Tensor) else Tensor(z)
        weights = self._weight_matrix(rng, noise, frozen_eps)
        cos = l2_normalize(z, axis=-1) @ l2_normalize(weights, axis=-1).swapaxes(-1, -2)
        return cos * self.temperature

    def class_probs(self, z: Tensor, rng: SeededRng | None = None, noise: bool = False, frozen_eps: np.ndarray | None = None) -> Tensor:
        """P(Y=m | x): softmax over temperature-scaled cosine scores."""
        return softmax(self.logits(z, rng=rng, noise=noise, frozen_eps=frozen_eps), axis=-1)

    def predict_label(self, z, rng: SeededRng | None = None, noise: bool = False):
        """argmax class; ties break toward the lowest class index."""
        probs = self.class_probs(z, rng=rng, noise=noise).data
        return int(np.argmax(probs)) if probs.ndim == 1 else np.argmax(probs, axis=-1)

    def params(self) -> dict:
        out = {}
        for m in range(self.num_classes):
            out[f"mu.{m}"] = self.mu[m]
            out[f"sigma.{m}"] = self.sigma[m]
        return out

    def set_requires_grad(self, flag: bool, classes=None):
        targets = range(self.num_classes) if classes is None else classes
        for m in targets:
            self.mu[m].requires_grad = flag
            self.sigma[m].requires_grad = flag

    def copy(self) -> "StochasticHead":
        clone = StochasticHead(self.dim, self.temperature, self.offset)
        for m in range(self.num_classes):
            clone.add_class(self.mu[m].data)
            clone.sigma[m].data = self.sigma[m].data.copy()
        return clone


def init_means_from_prototypes(head: StochasticHead, prototypes: dict) -> StochasticHead:
    """Extend `head` with rows for new classes, means set to the prototypes.

    `prototypes` maps a global class id to its prototype vector; ids must be
    new to the head and are appended in sorted order.  Existing rows are
    left bitwise untouched.
    """
    for cls in sorted(prototypes):
        head.add_class(np.asarray(prototypes[cls], dtype=float))
    return head
