"""Featurization, linear/MLP models, losses with analytic gradients, SGD.

Everything here is deterministic given the seeds.  Batch schedules come
from :func:`minibatch_plan` so that two training loops with the same seed
visit identical batches; the debiasing routines rely on that to reduce
exactly to plain ERM at their neutral settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corruptions import Grid, SentencePair, TokenSeq
from .errors import DispatchError, TrainingError
from .rng import Stream, derive_seed

_SHUFFLE_TAG = 101
_INIT_TAG = 102

_FEATURE_KINDS = ("flatten_grid", "bag_of_ngrams", "raw_vector")
_PAIR_MODES = ("concat", "hypothesis_only")


@dataclass(frozen=True)
class FeatureSpec:
    """How to turn covariates into fixed-length float vectors.

    ``bag_of_ngrams`` hashes every 1..ngram-gram into ``buckets`` counting
    bins (mask tokens count like any other id); sentence pairs either concat
    the two sentence vectors or keep the hypothesis alone.
    """

    kind: str
    ngram: int = 2
    buckets: int = 64
    pair_mode: str = "concat"

    def __post_init__(self):
        if self.kind not in _FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "bag_of_ngrams":
            if self.ngram < 1:
                raise ValueError("ngram must be >= 1")
            if self.buckets < 1:
                raise ValueError("buckets must be >= 1")
            if self.pair_mode not in _PAIR_MODES:
                raise ValueError(f"unknown pair_mode {self.pair_mode!r}")

    def width(self, example) -> int:
        if self.kind == "flatten_grid":
            return example.values.size
        if self.kind == "raw_vector":
            return np.asarray(example, dtype=np.float64).size
        if isinstance(example, SentencePair) and self.pair_mode == "concat":
            return 2 * self.buckets
        return self.buckets


def _ngram_bucket(window: tuple, buckets: int) -> int:
    return derive_seed(len(window), *window) % buckets


def _bag_vector(tokens: tuple, ngram: int, buckets: int) -> np.ndarray:
    vec = np.zeros(buckets)
    for n in range(1, ngram + 1):
        for i in range(len(tokens) - n + 1):
            vec[_ngram_bucket(tokens[i : i + n], buckets)] += 1.0
    return vec


def _featurize_one(spec: FeatureSpec, cov) -> np.ndarray:
    if spec.kind == "flatten_grid":
        if not isinstance(cov, Grid):
            raise DispatchError("flatten_grid expects a Grid")
        return cov.values.ravel().astype(np.float64)
    if spec.kind == "raw_vector":
        return np.asarray(cov, dtype=np.float64).ravel()
    if isinstance(cov, TokenSeq):
        return _bag_vector(cov.tokens, spec.ngram, spec.buckets)
    if isinstance(cov, SentencePair):
        hyp = _bag_vector(cov.hypothesis.tokens, spec.ngram, spec.buckets)
        if spec.pair_mode == "hypothesis_only":
            return hyp
        prem = _bag_vector(cov.premise.tokens, spec.ngram, spec.buckets)
        return np.concatenate([prem, hyp])
    raise DispatchError(f"bag_of_ngrams expects token input, got {type(cov).__name__}")


def featurize(spec: FeatureSpec, covariates) -> np.ndarray:
    """Stack per-example feature vectors into an (n, d) float64 matrix."""
    rows = [_featurize_one(spec, c) for c in covariates]
    if not rows:
        return np.zeros((0, 0))
    return np.stack(rows)


class LinearModel:
    """Multinomial logistic regression, optionally with one tanh hidden layer.

    The linear form starts at zero; the hidden form draws uniform
    +-1/sqrt(fan_in) entries from a stream derived from ``seed``.  Flat
    parameter order is W then b per layer.
    """

    def __init__(self, n_features: int, n_classes: int, hidden: int = 0, seed: int = 0):
        if n_features < 1 or n_classes < 2:
            raise ValueError("need n_features >= 1 and n_classes >= 2")
        if hidden < 0:
            raise ValueError("hidden must be >= 0")
        self.n_features = n_features
        self.n_classes = n_classes
        self.hidden = hidden
        if hidden == 0:
            self.weights = [np.zeros((n_features, n_classes))]
            self.biases = [np.zeros(n_classes)]
        else:
            stream = Stream(derive_seed(seed, _INIT_TAG))
            w1 = (stream.uniforms(n_features * hidden) * 2.0 - 1.0) / math.sqrt(n_features)
            w2 = (stream.uniforms(hidden * n_classes) * 2.0 - 1.0) / math.sqrt(hidden)
            self.weights = [w1.reshape(n_features, hidden), w2.reshape(hidden, n_classes)]
            self.biases = [np.zeros(hidden), np.zeros(n_classes)]

    def forward(self, X: np.ndarray):
        """Return (logits, hidden activations or None)."""
        if self.hidden == 0:
            return X @ self.weights[0] + self.biases[0], None
        h = np.tanh(X @ self.weights[0] + self.biases[0])
        return h @ self.weights[1] + self.biases[1], h

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[0]

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_flat(self, flat: np.ndarray) -> None:
        at = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[at : at + w.size].reshape(w.shape).copy()
            at += w.size
            self.biases[i] = flat[at : at + b.size].reshape(b.shape).copy()
            at += b.size
        if at != flat.size:
            raise ValueError("flat vector has wrong length")

    def copy(self) -> "LinearModel":
        dup = LinearModel.__new__(LinearModel)
        dup.n_features = self.n_features
        dup.n_classes = self.n_classes
        dup.hidden = self.hidden
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(model: LinearModel, X: np.ndarray) -> np.ndarray:
    return softmax(model.logits(X))


def predict(model: LinearModel, X: np.ndarray) -> np.ndarray:
    return np.argmax(model.logits(X), axis=1)


def _decay_penalty(model: LinearModel, weight_decay: float) -> float:
    if weight_decay == 0.0:
        return 0.0
    return 0.5 * weight_decay * sum(float((w * w).sum()) for w in model.weights)


def _backprop(model: LinearModel, X: np.ndarray, hidden_act, dlogits: np.ndarray,
              weight_decay: float) -> np.ndarray:
    # decay applies to weight matrices only, never biases
    if model.hidden == 0:
        dw = X.T @ dlogits
        if weight_decay != 0.0:
            dw = dw + weight_decay * model.weights[0]
        return np.concatenate([dw.ravel(), dlogits.sum(axis=0)])
    h = hidden_act
    dw2 = h.T @ dlogits
    dh = (dlogits @ model.weights[1].T) * (1.0 - h * h)
    dw1 = X.T @ dh
    if weight_decay != 0.0:
        dw1 = dw1 + weight_decay * model.weights[0]
        dw2 = dw2 + weight_decay * model.weights[1]
    return np.concatenate(
        [dw1.ravel(), dh.sum(axis=0), dw2.ravel(), dlogits.sum(axis=0)]
    )


def ce_loss_grad(model: LinearModel, X: np.ndarray, y: np.ndarray,
                 sample_weights: np.ndarray | None = None,
                 weight_decay: float = 0.0):
    """Weighted cross entropy: sum_i w_i * nll_i / batch, plus L2 on weights.

    Returns (loss, flat gradient).  Weights of exactly 1.0 give the same
    bits as no weights.
    """
    n = len(y)
    logits, hidden_act = model.forward(X)
    ls = log_softmax(logits)
    nll = -ls[np.arange(n), y]
    diff = np.exp(ls)
    diff[np.arange(n), y] -= 1.0
    if sample_weights is not None:
        if not np.all(np.isfinite(sample_weights)):
            raise TrainingError("non-finite sample weight")
        nll = sample_weights * nll
        diff = sample_weights[:, None] * diff
    loss = float(nll.sum()) / n + _decay_penalty(model, weight_decay)
    grad = _backprop(model, X, hidden_act, diff / n, weight_decay)
    return loss, grad


def poe_loss_grad(main: LinearModel, biased: LinearModel,
                  X_main: np.ndarray, X_biased: np.ndarray, y: np.ndarray,
                  weight_decay: float = 0.0, update_biased: bool = True):
    """Cross entropy of the renormalized product of the two softmax heads.

    The combined score is the sum of the two log-softmax outputs; the loss
    is the CE of its softmax.  Returns (loss, main grad, biased grad or
    None).  Decay applies to the main model only.
    """
    n = len(y)
    lm, hm = main.forward(X_main)
    lb, hb = biased.forward(X_biased)
    sm = log_softmax(lm)
    sb = log_softmax(lb)
    joint = log_softmax(sm + sb)
    nll = -joint[np.arange(n), y]
    loss = float(nll.sum()) / n + _decay_penalty(main, weight_decay)
    ds = np.exp(joint)
    ds[np.arange(n), y] -= 1.0
    ds /= n
    # chain through each log-softmax: J^T v = v - softmax(l) * rowsum(v)
    row = ds.sum(axis=1, keepdims=True)
    d_lm = ds - softmax(lm) * row
    grad_main = _backprop(main, X_main, hm, d_lm, weight_decay)
    grad_biased = None
    if update_biased:
        d_lb = ds - softmax(lb) * row
        grad_biased = _backprop(biased, X_biased, hb, d_lb, 0.0)
    return loss, grad_main, grad_biased


def focus_weights(biased_probs: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray:
    """Per-example focus weights (1 - p_biased[true class]) ** gamma.

    gamma 0 yields exact ones, so downstream arithmetic matches unweighted
    training bit for bit.
    """
    picked = biased_probs[np.arange(len(y)), y]
    return np.power(1.0 - picked, gamma)


def dfl_loss_grad(main: LinearModel, biased_probs: np.ndarray,
                  X: np.ndarray, y: np.ndarray, gamma: float,
                  weight_decay: float = 0.0):
    """Focus-weighted CE for the main model; the biased probabilities are
    treated as constants (no gradient flows into them)."""
    w = focus_weights(biased_probs, y, gamma)
    return ce_loss_grad(main, X, y, sample_weights=w, weight_decay=weight_decay)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    weight_decay: float = 0.0
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0.0:
            raise ValueError("bad training configuration")


def minibatch_plan(n: int, batch_size: int, seed: int, epoch: int,
                   shuffle: bool = True) -> list:
    """Batch index arrays for one epoch; the permutation depends only on
    (seed, epoch) so distinct loops can reproduce each other's schedule."""
    order = list(range(n))
    if shuffle and n > 1:
        Stream(derive_seed(seed, _SHUFFLE_TAG, epoch)).shuffle(order)
    order = np.array(order, dtype=np.int64)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def train(model: LinearModel, X: np.ndarray, y: np.ndarray, cfg: TrainConfig,
          sample_weights: np.ndarray | None = None,
          features_for_epoch=None) -> list:
    """Plain SGD on the weighted CE; returns per-epoch mean losses.

    ``features_for_epoch`` (epoch -> matrix) substitutes a fresh feature
    matrix each epoch, for inputs whose noise should be redrawn rather than
    frozen; the labels and batch schedule are unaffected.
    """
    if len(y) == 0:
        raise TrainingError("cannot train on an empty dataset")
    losses = []
    for epoch in range(cfg.epochs):
        Xe = X if features_for_epoch is None else features_for_epoch(epoch)
        total = 0.0
        for idx in minibatch_plan(len(y), cfg.batch_size, cfg.seed, epoch, cfg.shuffle):
            w = None if sample_weights is None else sample_weights[idx]
            loss, grad = ce_loss_grad(model, Xe[idx], y[idx], w, cfg.weight_decay)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            model.set_flat(model.get_flat() - cfg.lr * grad)
            total += loss * len(idx)
        losses.append(total / len(y))
    return losses


def accuracy(model: LinearModel, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    return float((predict(model, X) == y).mean())
