"""Entity and aspect relevance predictors.

Both predictors are small MLPs applied to frozen retriever embeddings:

* entity:  score(d, e) = sigmoid(e_e . f(e_d))
* aspect:  score(d, a | e) = sigmoid(e_a . g([e_d ; e_e]))

``f`` and ``g`` are L linear layers with ReLU between them (linear output),
hidden width equal to the embedding dimension, He-uniform init from a
seeded generator. Training minimizes a binary cross-entropy where positive
terms may carry soft weights and negative terms run over the complement of
the positives (optionally subsampled with unbiased rescaling). All math is
float64; models serialize as float32 with a JSON shape header.

Forward and backward passes are explicit numpy; gradients are exact and
checked against finite differences in the test suite.
"""
from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import RelevanceVector

logger = logging.getLogger(__name__)

SIGMOID_CLAMP = 1e-12

LR_RANGE = (1e-5, 1e-4)
WD_RANGE = (0.0, 1e-6)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid, clamped into (0, 1) exclusive."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)


@dataclass
class MlpModel:
    """L linear layers with ReLU activations in between."""

    weights: list[np.ndarray]  # each (out_dim, in_dim)
    biases: list[np.ndarray]  # each (out_dim,)

    def __post_init__(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must be non-empty and aligned")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: shapes {w.shape} / {b.shape} do not chain")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batched forward: (n, in_dim) -> (n, out_dim)."""
        h = np.asarray(x, dtype=np.float64)
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass keeping per-layer inputs for the backward pass."""
        h = np.asarray(x, dtype=np.float64)
        cache = []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache.append(h)
            h = h @ w.T + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h, cache

    def backward(
        self, cache: list[np.ndarray], grad_out: np.ndarray
    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Gradients of a scalar loss w.r.t. every weight and bias.

        ``grad_out`` is dLoss/d(output), shape (n, out_dim); ``cache`` comes
        from ``forward_cached`` on the same batch.
        """
        grads_w = [np.zeros_like(w) for w in self.weights]
        grads_b = [np.zeros_like(b) for b in self.biases]
        g = grad_out
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            inp = cache[i]
            if i < last:
                # redo the affine output to recover the ReLU mask
                pre = inp @ self.weights[i].T + self.biases[i]
                g = g * (pre > 0.0)
            grads_w[i] = g.T @ inp
            grads_b[i] = g.sum(axis=0)
            g = g @ self.weights[i]
        return grads_w, grads_b

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def to_bytes(self) -> bytes:
        header = {
            "format": "pairsem-mlp",
            "version": 1,
            "activation": "relu",
            "dtype": "float32",
            "shapes": [list(w.shape) for w in self.weights],
        }
        buf = io.BytesIO()
        buf.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        buf.write(b"\n")
        for w, b in zip(self.weights, self.biases):
            buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MlpModel":
        nl = data.index(b"\n")
        header = json.loads(data[:nl].decode("utf-8"))
        if header.get("format") != "pairsem-mlp" or header.get("version") != 1:
            raise ValueError(f"unsupported model header: {header}")
        offset = nl + 1
        weights, biases = [], []
        for shape in header["shapes"]:
            rows, cols = int(shape[0]), int(shape[1])
            wn = rows * cols * 4
            w = np.frombuffer(data[offset : offset + wn], dtype="<f4").reshape(rows, cols)
            offset += wn
            b = np.frombuffer(data[offset : offset + rows * 4], dtype="<f4")
            offset += rows * 4
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        return cls(weights=weights, biases=biases)


def init_mlp(n_layers: int, in_dim: int, out_dim: int, seed: int) -> MlpModel:
    """He-uniform initialized MLP; hidden width equals out_dim."""
    if n_layers < 1:
        raise ValueError("need at least one layer")
    rng = np.random.Generator(np.random.PCG64(seed))
    dims = [in_dim] + [out_dim] * n_layers
    weights, biases = [], []
    for i in range(n_layers):
        fan_in = dims[i]
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(dims[i + 1], dims[i])))
        biases.append(np.zeros(dims[i + 1], dtype=np.float64))
    return MlpModel(weights=weights, biases=biases)


def entity_score(model: MlpModel, e_d: np.ndarray, e_e: np.ndarray) -> float:
    if e_d.shape[0] != model.in_dim or e_e.shape[0] != model.out_dim:
        raise ValueError(
            f"dim mismatch: doc {e_d.shape}, entity {e_e.shape}, "
            f"model {model.in_dim}->{model.out_dim}"
        )
    z = model.forward(e_d[None, :])[0]
    return float(sigmoid(np.array([np.dot(e_e, z)]))[0])


def aspect_score(
    model: MlpModel, e_d: np.ndarray, e_e: np.ndarray, e_a: np.ndarray
) -> float:
    x = np.concatenate([e_d, e_e])
    if x.shape[0] != model.in_dim or e_a.shape[0] != model.out_dim:
        raise ValueError(
            f"dim mismatch: concat {x.shape}, aspect {e_a.shape}, "
            f"model {model.in_dim}->{model.out_dim}"
        )
    z = model.forward(x[None, :])[0]
    return float(sigmoid(np.array([np.dot(e_a, z)]))[0])


def relevance_vector(
    model: MlpModel,
    owner_id: str,
    owner_emb: np.ndarray,
    names: list[str],
    name_matrix: np.ndarray,
) -> RelevanceVector:
    """Sigmoid scores of every canonical name for one owner, batched."""
    z = model.forward(owner_emb[None, :])[0]
    probs = sigmoid(name_matrix @ z)
    return RelevanceVector(owner_id=owner_id, values=dict(zip(names, probs.tolist())))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 32
    seed: int = 17
    neg_samples: int = 0  # 0 = all negatives
    patience: int = 5
    layers: int = 2
    plateau_tol: float = 1e-6
    lr_decay: float = 0.5  # halve the step size on a plateau epoch
    min_lr: float = 1e-6

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if not (LR_RANGE[0] <= self.learning_rate <= LR_RANGE[1]):
            raise ValueError(f"learning_rate outside {LR_RANGE}")
        if not (WD_RANGE[0] <= self.weight_decay <= WD_RANGE[1]):
            raise ValueError(f"weight_decay outside {WD_RANGE}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.neg_samples < 0:
            raise ValueError("neg_samples must be >= 0")


@dataclass
class Batch:
    """Dense supervision for a slice of examples against all classes.

    ``pos_weight[i, c] > 0`` marks class c positive for example i with that
    soft weight; ``neg_mask`` marks the negatives (the complement, or a
    sample of it with ``neg_scale`` correcting the sum).
    """

    x: np.ndarray  # (n, in_dim)
    pos_weight: np.ndarray  # (n, n_classes)
    neg_mask: np.ndarray  # (n, n_classes) float 0/1
    neg_scale: np.ndarray  # (n,) multiplier for the negative sum


def bce_loss_and_grads(
    model: MlpModel, classes: np.ndarray, batch: Batch
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Loss and exact parameter gradients for one batch.

    loss = -sum_i [ sum_c pos_weight[i,c] * log p_ic
                    + neg_scale[i] * sum_c neg_mask[i,c] * log(1 - p_ic) ]
    with p = sigmoid(f(x) @ classes.T).
    """
    z, cache = model.forward_cached(batch.x)
    logits = z @ classes.T
    p = sigmoid(logits)
    pos_term = float((batch.pos_weight * np.log(p)).sum())
    neg_term = float((batch.neg_scale[:, None] * batch.neg_mask * np.log1p(-p)).sum())
    loss = -(pos_term + neg_term)
    # d loss / d logits; the sigmoid clamp is treated as identity here
    g_logits = batch.pos_weight * (p - 1.0) + (
        batch.neg_scale[:, None] * batch.neg_mask
    ) * p
    g_z = g_logits @ classes
    grads_w, grads_b = model.backward(cache, g_z)
    return loss, grads_w, grads_b


class AdamState:
    def __init__(self, params: list[np.ndarray], lr: float, weight_decay: float):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = 0.9
        self.beta2 = 0.999
        self.eps = 1e-8
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def snapshot(self) -> tuple:
        return (
            self.t,
            self.lr,
            [m.copy() for m in self.m],
            [v.copy() for v in self.v],
        )

    def restore(self, snap: tuple) -> None:
        self.t, self.lr = snap[0], snap[1]
        for dst, src in zip(self.m, snap[2]):
            np.copyto(dst, src)
        for dst, src in zip(self.v, snap[3]):
            np.copyto(dst, src)


@dataclass
class TrainResult:
    model: MlpModel
    epoch_losses: list[float]  # full-data loss, index 0 = before training
    stopped_early: bool = False


def _supervision_matrices(
    pos_cols: list[np.ndarray],
    pos_weights: list[np.ndarray],
    n_classes: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Dense positive-weight and negative-mask matrices over all examples."""
    n = len(pos_cols)
    pw = np.zeros((n, n_classes), dtype=np.float64)
    neg = np.ones((n, n_classes), dtype=np.float64)
    for i in range(n):
        pw[i, pos_cols[i]] = pos_weights[i]
        neg[i, pos_cols[i]] = 0.0
    return pw, neg


def _make_batch(
    x: np.ndarray,
    pw: np.ndarray,
    neg: np.ndarray,
    neg_samples: int,
    rng: np.random.Generator | None,
) -> Batch:
    n = x.shape[0]
    scale = np.ones(n, dtype=np.float64)
    if neg_samples > 0 and rng is not None:
        neg = neg.copy()
        for i in range(n):
            neg_idx = np.flatnonzero(neg[i])
            if neg_idx.shape[0] > neg_samples:
                keep = rng.choice(neg_idx, size=neg_samples, replace=False)
                neg[i] = 0.0
                neg[i, keep] = 1.0
                scale[i] = neg_idx.shape[0] / neg_samples
    return Batch(x=x, pos_weight=pw, neg_mask=neg, neg_scale=scale)


def train_predictor(
    x: np.ndarray,
    classes: np.ndarray,
    pos_cols: list[np.ndarray],
    pos_weights: list[np.ndarray],
    cfg: TrainConfig,
) -> TrainResult:
    """Mini-batch Adam over examples; deterministic under cfg.seed.

    ``pos_cols[i]`` / ``pos_weights[i]`` list the positive class columns and
    their soft weights for example i. Negatives are the complement, or
    ``cfg.neg_samples`` of them with the loss rescaled to stay unbiased.

    Inputs are unit-norm embeddings, so their per-component variance is
    1/dim; optimization runs on inputs scaled by sqrt(dim) to match the He
    init assumptions, and the scale is absorbed into the first layer before
    returning. The returned model operates on raw embeddings.
    """
    n, in_dim = x.shape
    scale = float(np.sqrt(in_dim))
    x = x * scale
    model = init_mlp(cfg.layers, in_dim, classes.shape[1], cfg.seed)
    adam = AdamState(model.params(), cfg.learning_rate, cfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    pw_all, neg_all = _supervision_matrices(pos_cols, pos_weights, classes.shape[0])

    def full_loss() -> float:
        total = 0.0
        for lo in range(0, n, 4096):
            sl = slice(lo, min(lo + 4096, n))
            z = model.forward(x[sl])
            p = sigmoid(z @ classes.T)
            total -= float((pw_all[sl] * np.log(p)).sum())
            total -= float((neg_all[sl] * np.log1p(-p)).sum())
        return total

    losses = [full_loss()]
    stale = 0
    stopped = False
    params = model.params()
    snapshot = [p.copy() for p in params]
    adam_snapshot = adam.snapshot()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = _make_batch(x[idx], pw_all[idx], neg_all[idx], cfg.neg_samples, rng)
            loss, gw, gb = bce_loss_and_grads(model, classes, batch)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"NaN/inf loss at epoch {epoch}, batch offset {lo}, "
                    f"lr {adam.lr}"
                )
            grads: list[np.ndarray] = []
            for w, b in zip(gw, gb):
                grads.extend((w, b))
            adam.step(params, grads)
        epoch_loss = full_loss()
        if epoch_loss > losses[-1] + cfg.plateau_tol:
            # reject the epoch: restore state, shrink the step size, retry
            for p, s in zip(params, snapshot):
                np.copyto(p, s)
            adam.restore(adam_snapshot)
            adam.lr = max(adam.lr * cfg.lr_decay, cfg.min_lr)
            stale += 1
        else:
            improved = epoch_loss < losses[-1] - cfg.plateau_tol
            losses.append(epoch_loss)
            for dst, src in zip(snapshot, params):
                np.copyto(dst, src)
            adam_snapshot = adam.snapshot()
            stale = 0 if improved else stale + 1
        if stale >= cfg.patience:
            stopped = True
            break
    model.weights[0] *= scale  # fold the input scaling back in
    return TrainResult(model=model, epoch_losses=losses, stopped_early=stopped)


def train_entity_predictor(
    doc_embs: np.ndarray,
    entity_matrix: np.ndarray,
    doc_entity_cols: list[np.ndarray],
    doc_entity_weights: list[np.ndarray],
    cfg: TrainConfig,
) -> TrainResult:
    """Entity predictor: positives are a document's entities with soft labels."""
    return train_predictor(
        doc_embs, entity_matrix, doc_entity_cols, doc_entity_weights, cfg
    )


def train_aspect_predictor(
    doc_embs: np.ndarray,
    entity_matrix: np.ndarray,
    aspect_matrix: np.ndarray,
    examples: list[tuple[int, int, np.ndarray]],
    cfg: TrainConfig,
) -> TrainResult:
    """Aspect predictor over (document, entity) -> aspects examples.

    ``examples`` rows are (doc_row, entity_row, positive_aspect_cols); the
    input of each example is the concatenation of the two embeddings and
    targets are binary over all aspects.
    """
    if not examples:
        raise ValueError("no (document, entity) training examples")
    x = np.stack(
        [np.concatenate([doc_embs[d], entity_matrix[e]]) for d, e, _ in examples]
    )
    pos_cols = [cols for _, _, cols in examples]
    pos_weights = [np.ones(cols.shape[0], dtype=np.float64) for cols in pos_cols]
    return train_predictor(x, aspect_matrix, pos_cols, pos_weights, cfg)


def grid_search_train(
    train_fn,
    score_fn,
    cfg: TrainConfig,
    learning_rates: tuple[float, ...] = (1e-5, 1e-4),
    weight_decays: tuple[float, ...] = (0.0, 1e-6),
) -> tuple[TrainResult, TrainConfig, float]:
    """Pick (lr, weight_decay) by the highest score_fn(result.model)."""
    best: tuple[TrainResult, TrainConfig, float] | None = None
    for lr in learning_rates:
        for wd in weight_decays:
            candidate = TrainConfig(
                learning_rate=lr,
                weight_decay=wd,
                epochs=cfg.epochs,
                batch_size=cfg.batch_size,
                seed=cfg.seed,
                neg_samples=cfg.neg_samples,
                patience=cfg.patience,
                layers=cfg.layers,
            )
            result = train_fn(candidate)
            score = score_fn(result.model)
            logger.info("grid lr=%g wd=%g -> score %.4f", lr, wd, score)
            if best is None or score > best[2]:
                best = (result, candidate, score)
    assert best is not None
    return best
