"""Regularized maximum-likelihood objective and the Adam training loop.

The log-likelihood uses the piecewise-constant quadrature over augmented
tokens: log terms at real events, and for every token an integral term
dt * (sum of the real-label rates predicted at that token). Two regularizers
oppose the maximized LL: a next-label cross-entropy (fake label included,
EOS excluded) and the squared weights of the two rate layers.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ForwardResult, ModelConfig, ModelParams, forward
from .streams import AugmentedSequence, Dataset, TokenKind, augment

__all__ = [
    "TrainConfig", "TrainReport", "TrainingError", "quadrature_ll",
    "quadrature_ll_node", "prediction_loss", "prediction_loss_node",
    "weight_penalty", "weight_penalty_node", "objective",
    "objective_with_grads", "train",
]


class TrainingError(RuntimeError):
    """Optimization hit a non-finite objective; message names the culprit."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    epochs: int = 50
    batch_size: int = 0          # 0 = all streams per step
    seed: int = 0
    pred_weight: float = 1.0     # weight of the next-label cross-entropy
    l2_weight: float = 1e-4      # weight of the rate-layer L2 penalty
    patience: int = 0            # 0 = no early stopping

    def __post_init__(self):
        if self.learning_rate <= 0 or self.clip_norm <= 0 or self.eps <= 0:
            raise ValueError("learning_rate, clip_norm, eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 0 or self.patience < 0:
            raise ValueError("epochs >= 1, batch_size >= 0, patience >= 0")
        if self.pred_weight < 0 or self.l2_weight < 0:
            raise ValueError("regularization weights must be >= 0")


@dataclass
class TrainReport:
    """Per-epoch training trajectory."""

    objective: list = field(default_factory=list)
    train_ll: list = field(default_factory=list)
    val_ll: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def epochs_run(self) -> int:
        return len(self.objective)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "objective", "train_ll", "val_ll", "seconds"])
            rows = zip(self.objective, self.train_ll, self.val_ll, self.seconds)
            for i, (obj, tll, vll, sec) in enumerate(rows):
                writer.writerow([i, repr(obj), repr(tll), repr(vll), repr(sec)])


# ---------------------------------------------------------------------------
# objective terms, plain-value versions


def _dts(seq: AugmentedSequence) -> np.ndarray:
    times = np.array([t.time for t in seq.tokens])
    return np.diff(times)


def quadrature_ll(seq: AugmentedSequence, rates) -> float:
    """Piecewise-constant log-likelihood from rate vectors aligned to tokens[1:].

    rates[i] holds the M+1 channel rates predicted at tokens[i+1]. Log terms
    use the true label's rate at real tokens only; the integral term runs over
    every token with the elapsed time since its predecessor and sums the M
    real channels (the fake channel never enters).
    """
    rates = np.asarray(rates, dtype=np.float64)
    m = seq.label_count
    if rates.shape != (len(seq.tokens) - 1, m + 1):
        raise ValueError(f"rates must have shape {(len(seq.tokens) - 1, m + 1)}, got {rates.shape}")
    dts = _dts(seq)
    ll = 0.0
    for i, tok in enumerate(seq.tokens[1:]):
        if tok.kind is TokenKind.REAL:
            r = rates[i, tok.label]
            if r <= 0.0:
                raise ValueError(f"non-positive rate {r} at real token index {i + 1}")
            ll += math.log(r)
        ll -= float(dts[i]) * float(np.sum(rates[i, :m]))
    return float(ll)


def prediction_loss(seq: AugmentedSequence, rates) -> float:
    """Mean next-label cross-entropy of softmax over the M+1 rates.

    Targets are the real and fake tokens after BOS (fake tokens target the
    fake label); EOS is excluded. Zero when the sequence has no targets.
    """
    rates = np.asarray(rates, dtype=np.float64)
    losses = []
    for i, tok in enumerate(seq.tokens[1:]):
        if tok.kind is TokenKind.EOS:
            continue
        target = tok.label if tok.kind is TokenKind.REAL else seq.fake_label
        v = rates[i]
        mx = np.max(v)
        lse = mx + math.log(np.sum(np.exp(v - mx)))
        losses.append(lse - v[target])
    return float(np.mean(losses)) if losses else 0.0


def weight_penalty(params: ModelParams) -> float:
    """Sum of squared entries of the two rate-layer weight matrices (no biases)."""
    return float(np.sum(params.f1_w**2) + np.sum(params.f2_w**2))


# ---------------------------------------------------------------------------
# objective terms, tape versions (these are what training differentiates)


def quadrature_ll_node(fwd: ForwardResult) -> ad.Node:
    seq = fwd.seq
    m = seq.label_count
    dts = _dts(seq)
    tape = fwd.tape
    log_terms = []
    integral_terms = []
    for i, tok in enumerate(seq.tokens[1:]):
        if tok.kind is TokenKind.REAL:
            log_terms.append(ad.log(ad.pick(fwd.rates[i], tok.label)))
        integral_terms.append(ad.scale(ad.vsum(ad.vslice(fwd.rates[i], 0, m)), dts[i]))
    integral = ad.add_n(integral_terms)
    if log_terms:
        return ad.sub(ad.add_n(log_terms), integral)
    return ad.sub(tape.const(0.0), integral)


def prediction_loss_node(fwd: ForwardResult) -> ad.Node:
    seq = fwd.seq
    terms = []
    for i, tok in enumerate(seq.tokens[1:]):
        if tok.kind is TokenKind.EOS:
            continue
        target = tok.label if tok.kind is TokenKind.REAL else seq.fake_label
        terms.append(ad.neg(ad.pick(ad.log_softmax(fwd.rates[i]), target)))
    if not terms:
        return fwd.tape.const(0.0)
    return ad.scale(ad.add_n(terms), 1.0 / len(terms))


def weight_penalty_node(fwd: ForwardResult) -> ad.Node:
    return ad.add(ad.sumsq(fwd.params.f1_w), ad.sumsq(fwd.params.f2_w))


def objective_node(fwd: ForwardResult, cfg: TrainConfig) -> ad.Node:
    """LL minus the weighted prediction and weight penalties (to maximize)."""
    obj = quadrature_ll_node(fwd)
    if cfg.pred_weight > 0.0:
        obj = ad.sub(obj, ad.scale(prediction_loss_node(fwd), cfg.pred_weight))
    if cfg.l2_weight > 0.0:
        obj = ad.sub(obj, ad.scale(weight_penalty_node(fwd), cfg.l2_weight))
    return obj


def objective(seq: AugmentedSequence, params: ModelParams, model_cfg: ModelConfig,
              train_cfg: TrainConfig) -> float:
    fwd = forward(seq, params, model_cfg)
    return float(objective_node(fwd, train_cfg).value)


def objective_with_grads(seq: AugmentedSequence, params: ModelParams,
                         model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Returns (objective value, LL value, list of parameter gradients)."""
    fwd = forward(seq, params, model_cfg)
    ll_node = quadrature_ll_node(fwd)
    obj = ll_node
    if train_cfg.pred_weight > 0.0:
        obj = ad.sub(obj, ad.scale(prediction_loss_node(fwd), train_cfg.pred_weight))
    if train_cfg.l2_weight > 0.0:
        obj = ad.sub(obj, ad.scale(weight_penalty_node(fwd), train_cfg.l2_weight))
    value = float(obj.value)
    if not math.isfinite(value):
        raise TrainingError(_diagnose_nonfinite(fwd))
    ad.backward(fwd.tape, obj)
    return value, float(ll_node.value), fwd.params.grads()


def _diagnose_nonfinite(fwd: ForwardResult) -> str:
    for i, vec in enumerate(fwd.rates):
        for k, v in enumerate(vec.value):
            if not math.isfinite(v) or v <= 0.0:
                tok = fwd.seq.tokens[i + 1]
                return (f"non-finite objective: rate {v} at token {i + 1} "
                        f"(t={tok.time}, kind={tok.kind.value}), channel {k}")
    return "non-finite objective (log/integral overflow, rates all finite)"


# ---------------------------------------------------------------------------
# optimizer


class _Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def ascend(self, params: ModelParams, grads):
        cfg = self.cfg
        self.t += 1
        b1c = 1.0 - cfg.beta1**self.t
        b2c = 1.0 - cfg.beta2**self.t
        for arr, g, m, v in zip(params.arrays(), grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            arr += cfg.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + cfg.eps)


def _clip_global_norm(grads, max_norm: float):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        grads = [g * factor for g in grads]
    return grads


def dataset_ll(dataset_seqs, params: ModelParams, model_cfg: ModelConfig) -> float:
    """Summed quadrature LL over pre-augmented sequences; no mutation."""
    total = 0.0
    for seq in dataset_seqs:
        fwd = forward(seq, params, model_cfg)
        total += quadrature_ll(seq, fwd.rate_values())
    return total


def train(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
          val_dataset: Dataset | None = None):
    """Adam ascent on the objective summed over streams.

    Fake epochs are placed once per stream before the loop, so a (seed,
    dataset, configs) triple is bitwise reproducible. With a validation set
    and patience > 0, training stops after `patience` epochs without a new
    best validation LL and the best-validation parameters are returned.
    Returns (ModelParams, TrainReport).
    """
    seqs = [augment(s, model_cfg.fake_count) for s in dataset.streams]
    val_seqs = ([augment(s, model_cfg.fake_count) for s in val_dataset.streams]
                if val_dataset is not None else None)

    params = ModelParams.init(model_cfg, seed=train_cfg.seed)
    adam = _Adam(params, train_cfg)
    report = TrainReport()
    batch = train_cfg.batch_size if train_cfg.batch_size > 0 else len(seqs)

    best_val = -math.inf
    best_params = None
    stall = 0

    for _epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        epoch_obj = 0.0
        epoch_ll = 0.0
        for start in range(0, len(seqs), batch):
            chunk = seqs[start:start + batch]
            grads = None
            for si, seq in enumerate(chunk):
                try:
                    value, ll, g = objective_with_grads(seq, params, model_cfg, train_cfg)
                except TrainingError as exc:
                    raise TrainingError(f"stream {start + si}: {exc}") from None
                epoch_obj += value
                epoch_ll += ll
                if grads is None:
                    grads = g
                else:
                    for acc, gi in zip(grads, g):
                        acc += gi
            grads = _clip_global_norm(grads, train_cfg.clip_norm)
            adam.ascend(params, grads)

        vll = dataset_ll(val_seqs, params, model_cfg) if val_seqs is not None else math.nan
        report.objective.append(epoch_obj)
        report.train_ll.append(epoch_ll)
        report.val_ll.append(vll)
        report.seconds.append(time.perf_counter() - t0)

        if val_seqs is not None and train_cfg.patience > 0:
            if vll > best_val:
                best_val = vll
                best_params = params.copy()
                stall = 0
            else:
                stall += 1
                if stall >= train_cfg.patience:
                    break

    if best_params is not None:
        return best_params, report
    return params, report
