"""Two-layer graph convolutional network with hand-derived gradients.

Forward pass:  Z = softmax(P . relu(P X W0) . W1)  with P the normalised
propagation operator. Training minimises masked cross-entropy plus an L2
penalty on both weight matrices, full batch, with Adam, inverted dropout on
the inputs of both layers, and early stopping on the validation loss.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MODEL_MAGIC = b"GMDL"

NUM_CLASSES = 2
BACKGROUND, FOREGROUND = 0, 1

# Floor applied inside the log of the cross-entropy.
_LOG_CLAMP = 1e-12


class GcnError(Exception):
    pass


class ShapeError(GcnError):
    """Operand shapes are inconsistent."""


class StaleCacheError(GcnError):
    """backward() was handed a cache from a different set of weights."""


@dataclass(eq=False)
class GcnModel:
    w0: np.ndarray  # (C, H)
    w1: np.ndarray  # (H, F)
    seed: int = 0

    def __post_init__(self):
        if self.w0.ndim != 2 or self.w1.ndim != 2 or self.w0.shape[1] != self.w1.shape[0]:
            raise ShapeError(f"inconsistent weights {self.w0.shape} x {self.w1.shape}")
        if not (np.all(np.isfinite(self.w0)) and np.all(np.isfinite(self.w1))):
            raise GcnError("weights must be finite")

    @property
    def input_dim(self) -> int:
        return self.w0.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w0.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "GcnModel":
        return GcnModel(w0=self.w0.copy(), w1=self.w1.copy(), seed=self.seed)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    max_epochs: int = 600
    early_stop_window: int = 10
    hidden: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.dropout < 1.0):
            raise GcnError("dropout rate must lie in [0, 1)")
        if self.early_stop_window < 1:
            raise GcnError("early-stop window must be >= 1")
        if self.max_epochs < 1:
            raise GcnError("max_epochs must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0          # 1-based
    stop_reason: str = ""        # "early_stop" or "max_epochs"

    @property
    def num_epochs(self) -> int:
        return len(self.train_loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for epoch, row in enumerate(zip(self.train_loss, self.val_loss,
                                            self.val_accuracy), start=1):
                writer.writerow([epoch, repr(row[0]), repr(row[1]), repr(row[2])])


@dataclass(eq=False)
class ForwardCache:
    """Everything backward() needs, stamped with the weights it was built from."""

    z: np.ndarray
    propagated_input: np.ndarray   # P @ (dropped X)
    pre_activation: np.ndarray     # (P X) W0
    hidden_dropped: np.ndarray
    propagated_hidden: np.ndarray  # P @ (dropped hidden)
    operator: object               # the sparse propagation matrix
    hidden_mask: np.ndarray | None
    w0_ref: np.ndarray
    w1_ref: np.ndarray


def glorot_init(input_dim: int, hidden_dim: int, num_classes: int = NUM_CLASSES,
                seed: int = 0) -> GcnModel:
    """Uniform(-l, l) with l = sqrt(6 / (fan_in + fan_out)) per layer."""
    rng = np.random.default_rng(seed)
    l0 = np.sqrt(6.0 / (input_dim + hidden_dim))
    l1 = np.sqrt(6.0 / (hidden_dim + num_classes))
    return GcnModel(
        w0=rng.uniform(-l0, l0, size=(input_dim, hidden_dim)),
        w1=rng.uniform(-l1, l1, size=(hidden_dim, num_classes)),
        seed=seed,
    )


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _operator_matrix(ahat):
    return ahat.matrix if hasattr(ahat, "matrix") else ahat


def _feature_values(x):
    return x.values if hasattr(x, "values") else np.asarray(x, dtype=np.float64)


def forward(x, ahat, model: GcnModel, dropout: float = 0.0,
            rng: np.random.Generator | None = None) -> ForwardCache:
    """Run the network; returns the cache whose ``z`` field holds the output.

    With dropout active (training), inverted dropout scales the surviving
    entries of X and of the hidden activations by 1/(1-p) before each weight
    multiplication. Inference leaves dropout at zero.
    """
    x = _feature_values(x)
    op = _operator_matrix(ahat)
    if x.ndim != 2 or op.shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"X {x.shape} incompatible with operator {op.shape}")
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"X has {x.shape[1]} columns, model expects {model.input_dim}")
    hidden_mask = None
    if dropout > 0.0:
        if rng is None:
            raise GcnError("dropout requires a random generator")
        keep = 1.0 - dropout
        x = x * ((rng.random(x.shape) < keep) / keep)
    propagated_input = op @ x
    pre_activation = propagated_input @ model.w0
    hidden = np.maximum(pre_activation, 0.0)
    if dropout > 0.0:
        keep = 1.0 - dropout
        hidden_mask = (rng.random(hidden.shape) < keep) / keep
        hidden = hidden * hidden_mask
    propagated_hidden = op @ hidden
    logits = propagated_hidden @ model.w1
    return ForwardCache(
        z=_softmax_rows(logits),
        propagated_input=propagated_input,
        pre_activation=pre_activation,
        hidden_dropped=hidden,
        propagated_hidden=propagated_hidden,
        operator=op,
        hidden_mask=hidden_mask,
        w0_ref=model.w0,
        w1_ref=model.w1,
    )


def loss(z: np.ndarray, y: np.ndarray, train_idx, model: GcnModel,
         weight_decay: float) -> float:
    """Cross-entropy over the labelled rows plus (wd/2) * ||W||^2 on both layers."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise GcnError("empty labelled node set")
    picked = np.clip(z[train_idx], _LOG_CLAMP, None)
    ce = -float(np.sum(y[train_idx] * np.log(picked)))
    if weight_decay:
        ce += 0.5 * weight_decay * (float(np.sum(model.w0 ** 2))
                                    + float(np.sum(model.w1 ** 2)))
    return ce


def backward(model: GcnModel, cache: ForwardCache, y: np.ndarray, train_idx,
             weight_decay: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of loss() w.r.t. both weight matrices.

    The softmax/cross-entropy pair collapses to (Z - Y) on the labelled rows;
    the operator is symmetric, so propagating the error is another
    application of it.
    """
    if cache.w0_ref is not model.w0 or cache.w1_ref is not model.w1:
        raise StaleCacheError("forward cache does not belong to this model")
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise GcnError("empty labelled node set")
    d_logits = np.zeros_like(cache.z)
    d_logits[train_idx] = cache.z[train_idx] - y[train_idx]

    dw1 = cache.propagated_hidden.T @ d_logits
    back = cache.operator @ d_logits
    d_hidden = back @ model.w1.T
    if cache.hidden_mask is not None:
        d_hidden = d_hidden * cache.hidden_mask
    d_pre = d_hidden * (cache.pre_activation > 0.0)
    dw0 = cache.propagated_input.T @ d_pre

    if weight_decay:
        dw0 = dw0 + weight_decay * model.w0
        dw1 = dw1 + weight_decay * model.w1
    return dw0, dw1


@dataclass(eq=False)
class AdamState:
    m_w0: np.ndarray
    v_w0: np.ndarray
    m_w1: np.ndarray
    v_w1: np.ndarray
    step: int = 0

    @staticmethod
    def zeros_like(model: GcnModel) -> "AdamState":
        return AdamState(m_w0=np.zeros_like(model.w0), v_w0=np.zeros_like(model.w0),
                         m_w1=np.zeros_like(model.w1), v_w1=np.zeros_like(model.w1))


def adam_step(model: GcnModel, grads: tuple[np.ndarray, np.ndarray],
              state: AdamState, config: TrainConfig) -> tuple[GcnModel, AdamState]:
    """One bias-corrected Adam update; returns fresh model and state."""
    dw0, dw1 = grads
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t

    def update(w, g, m, v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        w = w - config.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + config.eps)
        return w, m, v

    w0, m0, v0 = update(model.w0, dw0, state.m_w0, state.v_w0)
    w1, m1, v1 = update(model.w1, dw1, state.m_w1, state.v_w1)
    return (GcnModel(w0=w0, w1=w1, seed=model.seed),
            AdamState(m_w0=m0, v_w0=v0, m_w1=m1, v_w1=v1, step=t))


class EarlyStopper:
    """Strict-improvement early stopping over a window of epochs."""

    def __init__(self, window: int):
        self.window = window
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.window


def train(x, ahat, y, train_idx, val_idx,
          config: TrainConfig) -> tuple[GcnModel, TrainHistory]:
    """Full-batch training with fresh dropout masks per epoch.

    Stops at max_epochs or when the validation loss has not strictly improved
    for ``early_stop_window`` consecutive epochs, and returns the parameters
    of the best validation epoch. The reported validation loss is the plain
    cross-entropy on the validation rows (no decay term). Deterministic for a
    fixed config seed.
    """
    x = _feature_values(x)
    y = np.asarray(y, dtype=np.float64)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if train_idx.size == 0 or val_idx.size == 0:
        raise GcnError("training and validation sets must be non-empty")
    if np.intersect1d(train_idx, val_idx).size:
        raise GcnError("training and validation sets overlap")

    from .seeding import derive_seed

    model = glorot_init(x.shape[1], config.hidden, NUM_CLASSES,
                        seed=derive_seed(config.seed, "init"))
    dropout_rng = np.random.default_rng(derive_seed(config.seed, "dropout"))
    state = AdamState.zeros_like(model)
    stopper = EarlyStopper(config.early_stop_window)
    history = TrainHistory()
    best_model = model
    val_targets = np.argmax(y[val_idx], axis=1)

    for epoch in range(1, config.max_epochs + 1):
        cache = forward(x, ahat, model, dropout=config.dropout, rng=dropout_rng)
        epoch_loss = loss(cache.z, y, train_idx, model, config.weight_decay)
        grads = backward(model, cache, y, train_idx, config.weight_decay)
        model, state = adam_step(model, grads, state, config)

        eval_cache = forward(x, ahat, model)
        val_loss = loss(eval_cache.z, y, val_idx, model, 0.0)
        val_pred = np.argmax(eval_cache.z[val_idx], axis=1)
        history.train_loss.append(epoch_loss)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(float(np.mean(val_pred == val_targets)))

        improved = val_loss < stopper.best
        should_stop = stopper.update(epoch, val_loss)
        if improved:
            best_model = model
        if should_stop:
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs"
    history.best_epoch = stopper.best_epoch
    return best_model, history


def predict(model: GcnModel, x, ahat) -> tuple[np.ndarray, np.ndarray]:
    """Class per node (argmax; ties resolve to background) plus probabilities."""
    cache = forward(x, ahat, model)
    return np.argmax(cache.z, axis=1), cache.z


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_MODEL_HEADER = struct.Struct("<4sIII")


def save_model(model: GcnModel, path) -> None:
    header = _MODEL_HEADER.pack(_MODEL_MAGIC, model.input_dim,
                                model.hidden_dim, model.num_classes)
    Path(path).write_bytes(header
                           + model.w0.astype("<f8").tobytes()
                           + model.w1.astype("<f8").tobytes())


def load_model(path) -> GcnModel:
    data = Path(path).read_bytes()
    if len(data) < _MODEL_HEADER.size or data[:4] != _MODEL_MAGIC:
        raise GcnError(f"{path}: not a model file")
    _, c, h, f = _MODEL_HEADER.unpack_from(data)
    offset = _MODEL_HEADER.size
    w0 = np.frombuffer(data, dtype="<f8", count=c * h, offset=offset).reshape(c, h)
    offset += w0.nbytes
    w1 = np.frombuffer(data, dtype="<f8", count=h * f, offset=offset).reshape(h, f)
    return GcnModel(w0=w0.copy(), w1=w1.copy())
