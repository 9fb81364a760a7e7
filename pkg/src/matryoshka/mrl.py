"""Nested (Matryoshka) classifier heads, the nested cross-entropy objective and
a small deterministic SGD trainer.

Two head variants are supported:

* untied (``"mrl"``): one ``L x m`` matrix and bias per granularity ``m``;
* tied (``"mrl-e"``): a single ``L x d`` matrix whose first ``m`` columns
  serve granularity ``m``.

Representations come from an :class:`Encoder`, which is either the identity
over stored features or a small trainable map.
"""

from __future__ import annotations

import io
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .dataio import EmbeddingStore
from .numerics import EPS_NORM, Rng, softmax_ce_batch

log = logging.getLogger(__name__)

VARIANTS = ("mrl", "mrl-e")
ENCODER_KINDS = ("frozen", "linear", "mlp2")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NestingSpec:
    dims: tuple[int, ...]
    weights: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        dims = tuple(int(m) for m in self.dims)
        weights = tuple(float(c) for c in self.weights) or (1.0,) * len(dims)
        if not dims:
            raise ValueError("nesting set must contain at least one granularity")
        if any(b <= a for a, b in zip(dims, dims[1:])):
            raise ValueError(f"granularities must be strictly increasing, got {dims}")
        if dims[0] < 1:
            raise ValueError("granularities must be >= 1")
        if len(weights) != len(dims):
            raise ValueError(f"{len(weights)} weights for {len(dims)} granularities")
        if any(not math.isfinite(c) or c < 0 for c in weights):
            raise ValueError("relative importance weights must be finite and >= 0")
        if dims[0] < 8:
            warnings.warn(f"granularity {dims[0]} is below 8; low-dimensional heads train poorly", stacklevel=3)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "weights", weights)

    @property
    def d(self) -> int:
        return self.dims[-1]

    def __len__(self) -> int:
        return len(self.dims)

    @classmethod
    def halving(cls, d: int, smallest: int = 8, weights: Sequence[float] = ()) -> "NestingSpec":
        """Halve from ``d`` down to ``smallest`` (powers-of-two style)."""
        dims = [d]
        while dims[-1] // 2 >= smallest:
            dims.append(dims[-1] // 2)
        return cls(tuple(reversed(dims)), tuple(weights))

    @classmethod
    def uniform(cls, d: int, count: int) -> "NestingSpec":
        step = d / count
        return cls(tuple(sorted({max(1, round(step * (i + 1))) for i in range(count)})))


@dataclass
class MrlHead:
    spec: NestingSpec
    num_classes: int
    tied: bool
    weights: list[np.ndarray]
    biases: list[np.ndarray] | None
    normalize: bool = False

    @property
    def variant(self) -> str:
        return "mrl-e" if self.tied else "mrl"

    def params(self) -> list[np.ndarray]:
        return self.weights + (self.biases or [])

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "MrlHead":
        return replace(
            self,
            weights=[w.copy() for w in self.weights],
            biases=None if self.biases is None else [b.copy() for b in self.biases],
        )

    def _slot(self, j: int) -> tuple[np.ndarray, np.ndarray | None]:
        m = self.spec.dims[j]
        if self.tied:
            W = self.weights[0][:, :m]
            b = None if self.biases is None else self.biases[0]
        else:
            W = self.weights[j]
            b = None if self.biases is None else self.biases[j]
        return W, b

    def logits_at(self, Z: np.ndarray, m: int) -> np.ndarray:
        """Logits for a ``(B, >=m)`` batch at granularity ``m``.

        Tied heads accept any ``m <= d`` (truncated columns); untied heads
        only their trained granularities.
        """
        if self.tied:
            if not 1 <= m <= self.spec.d:
                raise ValueError(f"granularity {m} outside [1, {self.spec.d}]")
            W = self.weights[0][:, :m]
            b = None if self.biases is None else self.biases[0]
        else:
            if m not in self.spec.dims:
                raise ValueError(f"untied head has no classifier for m={m}; fit a probe instead")
            W, b = self._slot(self.spec.dims.index(m))
        P = Z[:, :m]
        if self.normalize:
            P = _normalize_prefix(P)[0]
        out = P @ W.T
        return out if b is None else out + b


def _normalize_prefix(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", P, P))
    safe = np.where(norms <= EPS_NORM, 1.0, norms)
    return P / safe[:, None], safe


def init_head(
    spec: NestingSpec,
    num_classes: int,
    variant: str = "mrl",
    rng: Rng | None = None,
    bias: bool = True,
    normalize: bool = False,
) -> MrlHead:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown head variant {variant!r}; expected one of {VARIANTS}")
    rng = rng or Rng(0)
    L = num_classes
    tied = variant == "mrl-e"
    if tied:
        weights = [rng.normal((L, spec.d), scale=1.0 / math.sqrt(spec.d))]
        biases = [np.zeros(L)] if bias else None
    else:
        weights = [rng.normal((L, m), scale=1.0 / math.sqrt(m)) for m in spec.dims]
        biases = [np.zeros(L) for _ in spec.dims] if bias else None
    return MrlHead(spec, L, tied, weights, biases, normalize)


def nested_logits(head: MrlHead, z) -> list[np.ndarray]:
    """One logit vector per granularity for a single representation ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (head.spec.d,):
        raise ValueError(f"representation has length {z.shape}, head expects {head.spec.d}")
    return [head.logits_at(z[None, :], m)[0] for m in head.spec.dims]


def batch_loss(head: MrlHead, Z: np.ndarray, labels: np.ndarray) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Mean nested loss over a batch.

    Returns ``(loss, grads, dZ)`` with ``grads`` aligned to ``head.params()``.
    """
    B = Z.shape[0]
    if Z.ndim != 2 or Z.shape[1] != head.spec.d:
        raise ValueError(f"batch shape {Z.shape} incompatible with head dimension {head.spec.d}")
    gW = [np.zeros_like(w) for w in head.weights]
    gb = None if head.biases is None else [np.zeros_like(b) for b in head.biases]
    dZ = np.zeros_like(Z)
    total = 0.0
    for j, (m, c) in enumerate(zip(head.spec.dims, head.spec.weights)):
        if c == 0.0:
            continue
        W, b = head._slot(j)
        P = Z[:, :m]
        if head.normalize:
            U, norms = _normalize_prefix(P)
        else:
            U = P
        logits = U @ W.T
        if b is not None:
            logits = logits + b
        losses, G = softmax_ce_batch(logits, labels)
        total += c * losses.mean()
        G *= c / B
        k = 0 if head.tied else j
        if head.tied:
            gW[0][:, :m] += G.T @ U
        else:
            gW[j] += G.T @ U
        if gb is not None:
            gb[k] += G.sum(axis=0)
        dU = G @ W
        if head.normalize:
            dU = (dU - U * np.einsum("ij,ij->i", dU, U)[:, None]) / norms[:, None]
        dZ[:, :m] += dU
    return float(total), gW + (gb or []), dZ


def mrl_loss(head: MrlHead, z, label: int) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Nested loss for a single example: ``sum_m c_m * CE(logits_m, label)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (head.spec.d,):
        raise ValueError(f"representation has length {z.shape}, head expects {head.spec.d}")
    loss, grads, dZ = batch_loss(head, z[None, :], np.array([label]))
    return loss, grads, dZ[0]


@dataclass
class Encoder:
    kind: str
    d_in: int
    d_out: int
    params: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "frozen" and self.d_in != self.d_out:
            raise ValueError("frozen encoder requires d_in == d_out")

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, tuple]:
        if X.shape[1] != self.d_in:
            raise ValueError(f"encoder expects {self.d_in} inputs, got {X.shape[1]}")
        if self.kind == "frozen":
            return X, ()
        if self.kind == "linear":
            A, b = self.params
            return X @ A.T + b, (X,)
        W1, b1, W2, b2 = self.params
        pre = X @ W1.T + b1
        H = np.maximum(pre, 0.0)
        return H @ W2.T + b2, (X, pre, H)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(X, dtype=np.float64))[0]

    def backward(self, cache: tuple, dZ: np.ndarray) -> list[np.ndarray]:
        if self.kind == "frozen":
            return []
        if self.kind == "linear":
            (X,) = cache
            return [dZ.T @ X, dZ.sum(axis=0)]
        X, pre, H = cache
        W2 = self.params[2]
        dH = (dZ @ W2) * (pre > 0)
        return [dH.T @ X, dH.sum(axis=0), dZ.T @ H, dZ.sum(axis=0)]

    def copy(self) -> "Encoder":
        return replace(self, params=[p.copy() for p in self.params])


def init_encoder(kind: str, d_in: int, d_out: int, rng: Rng | None = None, hidden: int = 128) -> Encoder:
    rng = rng or Rng(0)
    if kind == "frozen":
        return Encoder("frozen", d_in, d_out)
    if kind == "linear":
        return Encoder("linear", d_in, d_out, [rng.normal((d_out, d_in), scale=1 / math.sqrt(d_in)), np.zeros(d_out)])
    if kind == "mlp2":
        return Encoder(
            "mlp2",
            d_in,
            d_out,
            [
                rng.normal((hidden, d_in), scale=math.sqrt(2.0 / d_in)),
                np.zeros(hidden),
                rng.normal((d_out, hidden), scale=1 / math.sqrt(hidden)),
                np.zeros(d_out),
            ],
        )
    raise ValueError(f"unknown encoder kind {kind!r}; expected one of {ENCODER_KINDS}")


def encode_store(encoder: Encoder, store: EmbeddingStore) -> EmbeddingStore:
    """Representations of ``store`` as a new store (float32-rounded like any store)."""
    Z = encoder(store.vectors)
    return EmbeddingStore(Z.astype(np.float32).astype(np.float64), store.labels, store.num_classes)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    seed: int = 0
    normalize_per_granularity: bool = False
    bias: bool = True
    hidden: int = 128

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))


class EpochStats(NamedTuple):
    epoch: int
    loss: float
    acc: tuple[float, ...]


class TrainResult(NamedTuple):
    encoder: Encoder
    head: MrlHead
    trace: list[EpochStats]


def _accuracy_per_dim(encoder: Encoder, head: MrlHead, store: EmbeddingStore) -> tuple[float, ...]:
    Z = encoder(store.vectors)
    return tuple(
        float(np.mean(np.argmax(head.logits_at(Z, m), axis=1) == store.labels)) for m in head.spec.dims
    )


def train(
    train_store: EmbeddingStore,
    spec: NestingSpec,
    variant: str = "mrl",
    encoder_kind: str = "frozen",
    cfg: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Minibatch SGD (momentum, weight decay) on the nested objective.

    Deterministic in ``cfg.seed``: initialization and each epoch's shuffle
    are drawn from dedicated child streams.
    """
    if encoder_kind == "frozen" and train_store.d != spec.d:
        raise ValueError(f"frozen features have d={train_store.d} but nesting ends at {spec.d}")
    rng_enc, rng_head, rng_shuffle = Rng(cfg.seed).split(3)
    encoder = init_encoder(encoder_kind, train_store.d, spec.d, rng_enc, cfg.hidden)
    head = init_head(spec, train_store.num_classes, variant, rng_head, cfg.bias, cfg.normalize_per_granularity)
    params = encoder.params + head.params()
    velocity = [np.zeros_like(p) for p in params]
    X, y = train_store.vectors, train_store.labels
    n = train_store.n
    trace: list[EpochStats] = []

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng_shuffle.permutation(n)
        epoch_loss = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            Z, cache = encoder.forward(X[idx])
            loss, head_grads, dZ = batch_loss(head, Z, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = encoder.backward(cache, dZ) + head_grads
            for p, g, v in zip(params, grads, velocity):
                g = g + cfg.weight_decay * p
                v *= cfg.momentum
                v += g
                p -= lr * v
            epoch_loss += loss * len(idx)
        stats = EpochStats(epoch, epoch_loss / n, _accuracy_per_dim(encoder, head, train_store))
        log.debug("epoch %d loss %.5f acc %s", *stats)
        trace.append(stats)
    return TrainResult(encoder, head, trace)


def train_ff_baselines(
    train_store: EmbeddingStore,
    dims: Sequence[int],
    cfg: TrainConfig = TrainConfig(),
    encoder_kind: str = "frozen",
) -> list[tuple[int, TrainResult]]:
    """Independently trained single-granularity models, one per ``m``.

    With a frozen encoder each model sees the first ``m`` stored coordinates;
    with a trainable encoder the encoder itself outputs ``m`` dimensions.
    """
    out = []
    for m in dims:
        store = train_store.truncate(m) if encoder_kind == "frozen" else train_store
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            spec = NestingSpec((m,))
        out.append((m, train(store, spec, "mrl", encoder_kind, cfg)))
    return out


def refit_head(frozen_store: EmbeddingStore, spec: NestingSpec, variant: str = "mrl", cfg: TrainConfig = TrainConfig()) -> MrlHead:
    """Train only a head on fixed features."""
    return train(frozen_store, spec, variant, "frozen", cfg).head


def fit_probe(encoder: Encoder, train_store: EmbeddingStore, m: int, cfg: TrainConfig = TrainConfig()) -> MrlHead:
    """Fresh linear probe on the first ``m`` coordinates of frozen representations."""
    reps = encode_store(encoder, train_store).truncate(m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec = NestingSpec((m,))
    return refit_head(reps, spec, "mrl", cfg)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"MRLH1\0"
_ENC_TAGS = {k: i for i, k in enumerate(ENCODER_KINDS)}


class CheckpointError(ValueError):
    pass


def _write_matrix(buf: io.BytesIO, a: np.ndarray) -> None:
    a2 = a.reshape(a.shape[0], -1) if a.ndim == 2 else a.reshape(1, -1)
    buf.write(struct.pack("<II", *a2.shape))
    buf.write(a2.astype("<f4").tobytes())


def _read_matrix(buf: io.BytesIO, vector: bool) -> np.ndarray:
    hdr = buf.read(8)
    if len(hdr) < 8:
        raise CheckpointError("checkpoint truncated")
    r, c = struct.unpack("<II", hdr)
    raw = buf.read(4 * r * c)
    if len(raw) < 4 * r * c:
        raise CheckpointError("checkpoint truncated")
    a = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(r, c)
    return a[0].copy() if vector else a


def checkpoint_bytes(encoder: Encoder, head: MrlHead) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    flags = (head.biases is not None) | (head.normalize << 1)
    buf.write(struct.pack("<BBII", int(head.tied), flags, head.num_classes, len(head.spec)))
    buf.write(struct.pack(f"<{len(head.spec)}I", *head.spec.dims))
    buf.write(struct.pack(f"<{len(head.spec)}d", *head.spec.weights))
    buf.write(struct.pack("<BIII", _ENC_TAGS[encoder.kind], encoder.d_in, encoder.d_out, len(encoder.params)))
    for p in encoder.params:
        _write_matrix(buf, p)
    for p in head.params():
        _write_matrix(buf, p)
    return buf.getvalue()


def load_checkpoint_bytes(data: bytes) -> tuple[Encoder, MrlHead]:
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError("bad checkpoint magic")
    buf = io.BytesIO(data[len(CKPT_MAGIC) :])
    try:
        tied, flags, L, k = struct.unpack("<BBII", buf.read(10))
        dims = struct.unpack(f"<{k}I", buf.read(4 * k))
        weights = struct.unpack(f"<{k}d", buf.read(8 * k))
        kind_tag, d_in, d_out, n_enc = struct.unpack("<BIII", buf.read(13))
    except struct.error as exc:
        raise CheckpointError("checkpoint truncated") from exc
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec = NestingSpec(dims, weights)
    enc_params = [_read_matrix(buf, vector=(i % 2 == 1)) for i in range(n_enc)]
    encoder = Encoder(ENCODER_KINDS[kind_tag], d_in, d_out, enc_params)
    n_w = 1 if tied else k
    has_bias = bool(flags & 1)
    W = [_read_matrix(buf, vector=False) for _ in range(n_w)]
    b = [_read_matrix(buf, vector=True) for _ in range(n_w)] if has_bias else None
    return encoder, MrlHead(spec, L, bool(tied), W, b, bool(flags & 2))


def save_checkpoint(path, encoder: Encoder, head: MrlHead) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(encoder, head))


def load_checkpoint(path) -> tuple[Encoder, MrlHead]:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
