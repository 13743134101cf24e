"""Test-set scoring, attention-graph extraction, and intensity traces.

Everything here is read-only over the trained parameters: streams are
augmented with the same fake count used in training, run through the network,
and reduced to reports (per-stream log-likelihood, the time-averaged
attention adjacency between labels, or per-token rate traces for plotting).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ModelParams, forward
from .streams import Dataset, EventStream, TokenKind, augment
from .training import quadrature_ll

__all__ = [
    "StreamScore", "TestLLReport", "AttentionGraph", "IntensityTrace",
    "test_ll", "attention_graph", "intensity_trace",
]


@dataclass(frozen=True)
class StreamScore:
    stream_id: str
    ll: float
    num_events: int
    horizon: float


@dataclass(frozen=True)
class TestLLReport:
    scores: tuple
    total: float

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stream_id", "ll", "num_events", "horizon"])
            for s in self.scores:
                writer.writerow([s.stream_id, repr(s.ll), s.num_events, repr(s.horizon)])
            writer.writerow([
                "total", repr(self.total),
                sum(s.num_events for s in self.scores),
                repr(sum(s.horizon for s in self.scores)),
            ])


@dataclass(frozen=True)
class AttentionGraph:
    """Time-averaged attention adjacency between real labels.

    adjacency[k, q] is the average weight channel k placed on label q's bank
    entries; entries at or above the threshold become edges (q, k, weight),
    read as "label q influences label k".
    """

    adjacency: np.ndarray
    threshold: float
    edges: tuple

    def to_json_dict(self) -> dict:
        return {
            "num_labels": int(self.adjacency.shape[0]),
            "threshold": self.threshold,
            "adjacency": [[float(v) for v in row] for row in self.adjacency],
            "edges": [
                {"source": q, "target": k, "weight": float(w)}
                for q, k, w in self.edges
            ],
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    def to_dot(self, path, label_names=None):
        def name(i):
            return label_names[i] if label_names else str(i)

        lines = ["digraph attention {"]
        m = self.adjacency.shape[0]
        for i in range(m):
            lines.append(f'  "{name(i)}";')
        for q, k, w in self.edges:
            lines.append(f'  "{name(q)}" -> "{name(k)}" [weight="{w:.4f}"];')
        lines.append("}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class IntensityTrace:
    """Per-label rate samples at every augmented token time of one stream."""

    rows: tuple  # (time, label, rate, is_real_event)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "label", "lambda", "is_real_event"])
            for t, label, lam, is_real in self.rows:
                writer.writerow([repr(t), label, repr(lam), int(is_real)])


def _check_labels(config: ModelConfig, dataset_label_count: int):
    if dataset_label_count != config.label_count:
        raise ValueError(
            f"data uses {dataset_label_count} labels but the model was trained "
            f"with {config.label_count}; unknown labels cannot be scored")


def test_ll(config: ModelConfig, params: ModelParams, dataset: Dataset,
            fake_count: int | None = None, parallel: int = 1) -> TestLLReport:
    """Quadrature log-likelihood per stream and in total; params untouched."""
    _check_labels(config, dataset.label_count)
    k = config.fake_count if fake_count is None else fake_count

    def score(item):
        sid, stream = item
        seq = augment(stream, k)
        fwd = forward(seq, params, config)
        ll = quadrature_ll(seq, fwd.rate_values())
        return StreamScore(sid, ll, len(stream), stream.horizon)

    items = list(zip(dataset.stream_ids(), dataset.streams))
    if parallel > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            scores = list(pool.map(score, items))
    else:
        scores = [score(it) for it in items]
    return TestLLReport(tuple(scores), float(sum(s.ll for s in scores)))


def attention_graph(config: ModelConfig, params: ModelParams, dataset: Dataset,
                    threshold: float) -> AttentionGraph:
    """Average recorded attention over tokens and bank slots, then threshold.

    The raw alignments per (token, channel) sum to one over all bank entries;
    dividing the per-label sums by token count and memory depth keeps every
    adjacency entry in [0, 1].
    """
    if config.memory_depth < 1:
        raise ValueError("attention disabled: model was built with memory_depth 0")
    _check_labels(config, dataset.label_count)
    m = config.label_count
    sums = np.zeros((m, m))
    token_count = 0
    for stream in dataset.streams:
        seq = augment(stream, config.fake_count)
        fwd = forward(seq, params, config)
        token_count += len(fwd.rates)
        for alpha, entries in fwd.attention:
            if alpha is None:
                continue
            for row, (_slot, q) in enumerate(entries):
                # column k of alpha is channel k's alignment vector
                sums[:, q] += alpha[row, :m]
    if token_count == 0:
        raise ValueError("dataset produced no tokens to attend over")
    adjacency = sums / (token_count * config.memory_depth)
    edges = []
    for k in range(m):
        for q in range(m):
            if adjacency[k, q] >= threshold:
                edges.append((q, k, float(adjacency[k, q])))
    edges.sort(key=lambda e: (-e[2], e[0], e[1]))
    return AttentionGraph(adjacency, threshold, tuple(edges))


def intensity_trace(config: ModelConfig, params: ModelParams,
                    stream: EventStream, fake_count: int | None = None) -> IntensityTrace:
    """Rates of every real label at every augmented token time, with markers."""
    _check_labels(config, stream.label_count)
    k = config.fake_count if fake_count is None else fake_count
    seq = augment(stream, k)
    fwd = forward(seq, params, config)
    rates = fwd.rate_values()
    rows = []
    for i, tok in enumerate(seq.tokens[1:]):
        for label in range(config.label_count):
            is_real = tok.kind is TokenKind.REAL and tok.label == label
            rows.append((tok.time, label, float(rates[i, label]), is_real))
    return IntensityTrace(tuple(rows))
