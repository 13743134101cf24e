"""Proximal graphical event models: sampling, simulation, exact log-likelihood.

Each label is a node whose arrival rate is a table lookup keyed by which of
its parents produced at least one event inside a trailing window [t-w, t).
Rates are therefore piecewise constant in time, which makes simulation exact
(exponential candidates redrawn at every structural change point, valid by
memorylessness) and the log-likelihood computable in closed form.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .streams import Dataset, Epoch, EventStream

__all__ = [
    "NodeSpec", "PgemSpec", "GenConfig", "ChangePointTrace", "sample_spec",
    "simulate", "exact_ll", "build_trace", "rate_at", "save_spec", "load_spec",
    "homogeneous_ml_ll",
]


@dataclass(frozen=True)
class NodeSpec:
    """One label's parents, per-parent windows, and activation-indexed rates."""

    parents: tuple
    windows: tuple
    rates: dict  # activation bit-tuple (aligned with parents) -> positive rate

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(self, "windows", tuple(float(w) for w in self.windows))
        if len(self.parents) != len(self.windows):
            raise ValueError("one window per parent required")
        if len(set(self.parents)) != len(self.parents):
            raise ValueError("duplicate parent")
        for w in self.windows:
            if not (w > 0.0):
                raise ValueError(f"window must be positive, got {w}")
        want = 2 ** len(self.parents)
        if len(self.rates) != want:
            raise ValueError(f"rate table must have {want} entries, got {len(self.rates)}")
        clean = {}
        for bits, rate in self.rates.items():
            bits = tuple(int(b) for b in bits)
            if len(bits) != len(self.parents) or any(b not in (0, 1) for b in bits):
                raise ValueError(f"bad activation key {bits}")
            rate = float(rate)
            if not (rate > 0.0):
                raise ValueError(f"rate must be positive, got {rate}")
            clean[bits] = rate
        object.__setattr__(self, "rates", clean)


@dataclass(frozen=True)
class PgemSpec:
    label_count: int
    nodes: tuple

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if len(self.nodes) != self.label_count:
            raise ValueError("need exactly one NodeSpec per label")
        for node in self.nodes:
            for p in node.parents:
                if not (0 <= p < self.label_count):
                    raise ValueError(f"parent {p} out of range")

    def parent_windows(self) -> dict:
        """Map parent label -> sorted set of windows attached to its out-edges."""
        out: dict[int, set] = {}
        for node in self.nodes:
            for p, w in zip(node.parents, node.windows):
                out.setdefault(p, set()).add(w)
        return {p: sorted(ws) for p, ws in out.items()}


@dataclass(frozen=True)
class GenConfig:
    """Generating distributions for sample_spec; all knobs overridable."""

    parent_counts: tuple = (0, 1, 2)
    windows: tuple = (15.0, 30.0, 60.0)
    rate_low: float = 0.001
    rate_high: float = 0.1


@dataclass(frozen=True)
class ChangePointTrace:
    """Segments (t_start, t_end, rates[M]) tiling [0, T] with constant rates."""

    breaks: np.ndarray          # length S+1, breaks[0] == 0, breaks[-1] == T
    rates: np.ndarray           # (S, M)

    def segments(self):
        for i in range(self.rates.shape[0]):
            yield float(self.breaks[i]), float(self.breaks[i + 1]), self.rates[i]

    def integral(self) -> float:
        """Integral over [0, T] of the summed rate vector."""
        widths = np.diff(self.breaks)
        return float(widths @ self.rates.sum(axis=1))


def sample_spec(label_count: int, seed: int, config: GenConfig = GenConfig()) -> PgemSpec:
    """Draw a random spec: parent count, parents, windows, then rates, per node."""
    if label_count < 1:
        raise ValueError("label_count must be >= 1")
    rng = np.random.default_rng(seed)
    log_lo, log_hi = math.log(config.rate_low), math.log(config.rate_high)
    nodes = []
    for _ in range(label_count):
        count = min(int(rng.choice(config.parent_counts)), label_count - 1)
        parents = tuple(sorted(rng.choice(label_count, size=count, replace=False).tolist()))
        windows = tuple(float(rng.choice(config.windows)) for _ in parents)
        rates = {}
        for bits in itertools.product((0, 1), repeat=count):
            rates[bits] = float(math.exp(rng.uniform(log_lo, log_hi)))
        nodes.append(NodeSpec(parents, windows, rates))
    return PgemSpec(label_count, tuple(nodes))


def _active_bits(node: NodeSpec, label_times: list, t: float, closed_right: bool) -> tuple:
    """Activation vector at time t.

    closed_right=False uses the strict-history window [t-w, t); True uses
    (t-w, t], the right-limit convention for the interval just after t.
    """
    bits = []
    for p, w in zip(node.parents, node.windows):
        times = label_times[p]
        active = 0
        for s in reversed(times):
            if closed_right:
                if s <= t - w:
                    break
                if s <= t:
                    active = 1
                    break
            else:
                if s < t - w:
                    break
                if s < t:
                    active = 1
                    break
        bits.append(active)
    return tuple(bits)


def rate_at(spec: PgemSpec, stream: EventStream, t: float) -> np.ndarray:
    """Strict-history rate vector at time t (windows [t-w, t))."""
    label_times = [[] for _ in range(spec.label_count)]
    for e in stream.epochs:
        if e.time >= t:
            break
        label_times[e.label].append(e.time)
    return np.array(
        [node.rates[_active_bits(node, label_times, t, closed_right=False)]
         for node in spec.nodes],
        dtype=np.float64,
    )


def simulate(spec: PgemSpec, horizon: float, seed) -> EventStream:
    """Exact event-driven simulation up to the horizon.

    At the current time the rate vector is a table lookup; the next structural
    change is the earliest pending window expiry; one exponential candidate per
    node decides whether an event fires before it. Candidates are redrawn
    after every event or change point. ``seed`` is anything accepted by
    ``numpy.random.default_rng``.
    """
    rng = np.random.default_rng(seed)
    label_times: list[list] = [[] for _ in range(spec.label_count)]
    parent_windows = spec.parent_windows()
    expiries: list[float] = []
    epochs = []
    t = 0.0
    while True:
        rates = [node.rates[_active_bits(node, label_times, t, closed_right=True)]
                 for node in spec.nodes]
        draws = [t + rng.exponential(1.0 / r) for r in rates]
        k_star = int(np.argmin(draws))
        t_cand = draws[k_star]
        t_exp = expiries[0] if expiries else math.inf
        if t_cand <= t_exp:
            if t_cand > horizon:
                break
            epochs.append(Epoch(t_cand, k_star))
            label_times[k_star].append(t_cand)
            for w in parent_windows.get(k_star, ()):
                heapq.heappush(expiries, t_cand + w)
            t = t_cand
        else:
            if t_exp > horizon:
                break
            t = t_exp
            while expiries and expiries[0] <= t:
                heapq.heappop(expiries)
    return EventStream(tuple(epochs), horizon, spec.label_count)


def build_trace(spec: PgemSpec, stream: EventStream) -> ChangePointTrace:
    """Piecewise-constant rate trace breaking at events and window expiries."""
    horizon = stream.horizon
    points = {0.0, horizon}
    parent_windows = spec.parent_windows()
    for e in stream.epochs:
        if 0.0 < e.time < horizon:
            points.add(e.time)
        for w in parent_windows.get(e.label, ()):
            exp_t = e.time + w
            if 0.0 < exp_t < horizon:
                points.add(exp_t)
    breaks = np.array(sorted(points), dtype=np.float64)

    label_times: list[list] = [[] for _ in range(spec.label_count)]
    for e in stream.epochs:
        label_times[e.label].append(e.time)

    rates = np.empty((len(breaks) - 1, spec.label_count), dtype=np.float64)
    for i, (a, b) in enumerate(zip(breaks[:-1], breaks[1:])):
        mid = 0.5 * (a + b)
        for k, node in enumerate(spec.nodes):
            rates[i, k] = node.rates[_active_bits(node, label_times, mid, closed_right=False)]
    return ChangePointTrace(breaks, rates)


def exact_ll(spec: PgemSpec, stream: EventStream) -> float:
    """Closed-form log-likelihood of the stream under the spec.

    Sum of log strict-history rates at the events minus the integral of the
    summed rate vector over [0, T]. An event sitting where its own rate is
    zero yields -inf deliberately (not via a numpy warning).
    """
    if stream.label_count != spec.label_count:
        raise ValueError("stream and spec disagree on label_count")
    log_sum = 0.0
    for e in stream.epochs:
        r = rate_at(spec, stream, e.time)[e.label]
        if r <= 0.0:
            return -math.inf
        log_sum += math.log(r)
    return log_sum - build_trace(spec, stream).integral()


def homogeneous_ml_ll(stream: EventStream) -> float:
    """Log-likelihood of the maximum-likelihood constant-rate fit of a stream.

    Per label, lambda_hat = N_k / T and the LL contribution is
    N_k * log(N_k / T) - N_k; labels with no events contribute 0.
    """
    T = stream.horizon
    ll = 0.0
    labels = stream.labels()
    for k in range(stream.label_count):
        n = int(np.sum(labels == k))
        if n > 0:
            ll += n * math.log(n / T) - n
    return ll


# ---------------------------------------------------------------------------
# serialization


def _bits_to_key(bits) -> str:
    return "".join(str(b) for b in bits)


def save_spec(spec: PgemSpec, path):
    doc = {
        "num_labels": spec.label_count,
        "nodes": [
            {
                "parents": list(node.parents),
                "windows": list(node.windows),
                "rates": {_bits_to_key(bits): rate for bits, rate in sorted(node.rates.items())},
            }
            for node in spec.nodes
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_spec(path) -> PgemSpec:
    with open(path) as fh:
        doc = json.load(fh)
    nodes = []
    for nd in doc["nodes"]:
        rates = {tuple(int(c) for c in key): float(v) for key, v in nd["rates"].items()}
        nodes.append(NodeSpec(tuple(nd["parents"]), tuple(nd["windows"]), rates))
    return PgemSpec(int(doc["num_labels"]), tuple(nodes))


def simulate_dataset(spec: PgemSpec, horizon: float, n_streams: int, seed: int,
                     name: str = "pgem") -> Dataset:
    """Simulate independent streams with per-stream seeds derived from seed."""
    if n_streams < 1:
        raise ValueError("n_streams must be >= 1")
    streams = tuple(
        simulate(spec, horizon, np.random.SeedSequence([seed, i]))
        for i in range(n_streams)
    )
    return Dataset(streams, name=name)
