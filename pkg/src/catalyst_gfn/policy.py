"""Stage-headed MLP policy: one tanh trunk shared by one linear head per stage."""

from __future__ import annotations

import numpy as np


class PolicyParams:
    """Policy weights stored in one flat float64 vector.

    Named arrays (``w1``, ``b1``, ``head_w[s]``, ``head_b[s]``) are views into
    ``flat``; ``log_z`` is the last coordinate. Treat instances as immutable
    snapshots: optimisers return new instances instead of writing in place.
    """

    def __init__(self, flat: np.ndarray, input_dim: int, hidden: int, arities):
        self.input_dim = int(input_dim)
        self.hidden = int(hidden)
        self.arities = tuple(int(a) for a in arities)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size(self.input_dim, self.hidden, self.arities),):
            raise ValueError(f"flat parameter vector has wrong shape {flat.shape}")
        self.flat = flat
        self._views()

    @staticmethod
    def layout(input_dim: int, hidden: int, arities) -> list:
        shapes = [("w1", (input_dim, hidden)), ("b1", (hidden,))]
        for s, a in enumerate(arities):
            shapes.append((f"head{s}_w", (hidden, a)))
            shapes.append((f"head{s}_b", (a,)))
        shapes.append(("log_z", (1,)))
        return shapes

    @classmethod
    def size(cls, input_dim: int, hidden: int, arities) -> int:
        return sum(int(np.prod(shape)) for _, shape in cls.layout(input_dim, hidden, arities))

    def _views(self):
        self.named = {}
        pos = 0
        for name, shape in self.layout(self.input_dim, self.hidden, self.arities):
            n = int(np.prod(shape))
            self.named[name] = self.flat[pos : pos + n].reshape(shape)
            pos += n
        self.w1 = self.named["w1"]
        self.b1 = self.named["b1"]
        self.head_w = [self.named[f"head{s}_w"] for s in range(len(self.arities))]
        self.head_b = [self.named[f"head{s}_b"] for s in range(len(self.arities))]

    @property
    def log_z(self) -> float:
        return float(self.flat[-1])

    @property
    def log_z_index(self) -> int:
        return self.flat.size - 1

    def with_flat(self, flat: np.ndarray) -> "PolicyParams":
        return PolicyParams(flat, self.input_dim, self.hidden, self.arities)

    def copy(self) -> "PolicyParams":
        return self.with_flat(self.flat.copy())

    @classmethod
    def zeros(cls, input_dim: int, hidden: int, arities) -> "PolicyParams":
        return cls(np.zeros(cls.size(input_dim, hidden, arities)), input_dim, hidden, arities)

    @classmethod
    def initialize(cls, input_dim: int, hidden: int, arities, rng: np.random.Generator) -> "PolicyParams":
        """Glorot-uniform trunk, zero heads (uniform initial policy), log_z = 0."""
        p = cls.zeros(input_dim, hidden, arities)
        limit = np.sqrt(6.0 / (input_dim + hidden))
        p.w1[...] = rng.uniform(-limit, limit, size=p.w1.shape)
        return p

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))


def trunk(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    return np.tanh(features @ params.w1 + params.b1)


def policy_forward(params: PolicyParams, features: np.ndarray) -> list:
    """Logits of every stage head for a batch (or single row) of features."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != params.input_dim:
        raise ValueError(
            f"feature length {features.shape[-1]} does not match trunk input {params.input_dim}"
        )
    h = trunk(params, features)
    return [h @ w + b for w, b in zip(params.head_w, params.head_b)]


def head_logits(params: PolicyParams, stage: int, features: np.ndarray) -> np.ndarray:
    h = trunk(params, features)
    return h @ params.head_w[stage] + params.head_b[stage]


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities over enabled entries; masked entries are ``-inf``."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("every mask row needs at least one enabled action")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.exp(masked_log_softmax(logits, mask))
