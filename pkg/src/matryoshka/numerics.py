"""Dense numeric helpers shared by the trainer, evaluators and search code.

Matrices are plain ``numpy`` arrays (float64, row-major).  The helpers here
fix the few things numpy leaves open: a reference matmul with a pinned
summation order, a stable softmax cross-entropy with its analytic gradient,
degenerate-aware normalization and a counter-based, splittable RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_NORM = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed, row-major accumulation order.

    ``out[i, j]`` is accumulated as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``
    which is exactly what a naive triple loop computes, so results are
    bit-identical to it.  The training loop uses numpy's ``@`` for speed;
    this is the reproducible reference.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; accepts 1-D or 2-D input."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of one logit vector against an integer label.

    Returns ``(loss, grad)`` where ``grad = softmax(logits) - onehot(label)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ShapeError(f"logits must be a vector of length >= 2, got shape {z.shape}")
    if not 0 <= label < z.shape[0]:
        raise IndexError(f"label {label} out of range for {z.shape[0]} classes")
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    loss = float(log_norm - shifted[label])
    grad = np.exp(shifted - log_norm)
    grad[label] -= 1.0
    return loss, grad


def softmax_ce_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row losses and gradients for a ``(B, L)`` logit batch."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"logits must be (B, L>=2), got shape {z.shape}")
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {z.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise IndexError(f"labels must lie in [0, {z.shape[1]})")
    rows = np.arange(z.shape[0])
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    losses = log_norm - shifted[rows, labels]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return losses, grad


def l2_normalize(v) -> tuple[np.ndarray, bool]:
    """Return ``(unit_vector, degenerate)``.

    Vectors with norm at most ``EPS_NORM`` come back unchanged with the
    degenerate flag set.
    """
    x = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(np.dot(x, x)))
    if norm <= EPS_NORM:
        return x.copy(), True
    return x / norm, False


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`l2_normalize`; returns the array and a degenerate mask."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    degenerate = norms <= EPS_NORM
    safe = np.where(degenerate, 1.0, norms)
    return x / safe[:, None], degenerate


@dataclass
class Rng:
    """Seeded Philox stream; :meth:`split` derives independent child streams.

    Philox is counter based, so a seed pins the stream on every platform and
    children can be handed to workers without coordination.
    """

    seed: int
    _seq: np.random.SeedSequence = field(init=False, repr=False)
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    @classmethod
    def _from_seq(cls, seq: np.random.SeedSequence) -> "Rng":
        obj = cls.__new__(cls)
        obj.seed = int(seq.entropy) if isinstance(seq.entropy, int) else 0
        obj._seq = seq
        obj.gen = np.random.Generator(np.random.Philox(seq))
        return obj

    def split(self, n: int) -> list["Rng"]:
        return [Rng._from_seq(s) for s in self._seq.spawn(n)]

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=size)

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, a, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(a, size=size, replace=replace)
