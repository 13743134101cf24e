"""Event-stream data model: loading, saving, splitting, fake-epoch augmentation.

Streams are time-ordered labeled epochs on [0, T]. Augmentation interleaves a
fixed number of evenly spaced fake epochs into every positive-length
inter-event gap (boundary gaps included) and brackets the result with BOS/EOS
sentinels; the augmented sequence is the unit the model consumes.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Epoch", "EventStream", "Dataset", "Token", "TokenKind",
    "AugmentedSequence", "load_stream", "save_stream", "split_by_time",
    "split_by_stream", "augment", "sidecar_path",
]


class StreamFormatError(ValueError):
    """Malformed stream file or metadata."""


@dataclass(frozen=True)
class Epoch:
    time: float
    label: int

    def __post_init__(self):
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "label", int(self.label))
        if not (math.isfinite(self.time) and self.time >= 0.0):
            raise ValueError(f"epoch time must be finite and >= 0, got {self.time}")


@dataclass(frozen=True)
class EventStream:
    """Strictly time-ordered epochs on [0, horizon] with labels < label_count."""

    epochs: tuple
    horizon: float
    label_count: int

    def __post_init__(self):
        object.__setattr__(self, "epochs", tuple(self.epochs))
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "label_count", int(self.label_count))
        if not (math.isfinite(self.horizon) and self.horizon >= 0.0):
            raise ValueError(f"horizon must be finite and >= 0, got {self.horizon}")
        if self.label_count < 1:
            raise ValueError("label_count must be positive")
        prev = -1.0
        for e in self.epochs:
            if e.time <= prev:
                raise ValueError(f"epoch times must be strictly increasing at t={e.time}")
            if e.time > self.horizon:
                raise ValueError(f"epoch time {e.time} exceeds horizon {self.horizon}")
            if not (0 <= e.label < self.label_count):
                raise ValueError(f"label {e.label} out of range [0, {self.label_count})")
            prev = e.time

    def __len__(self):
        return len(self.epochs)

    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.epochs], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.epochs], dtype=np.int64)


@dataclass(frozen=True)
class Dataset:
    """Non-empty collection of streams sharing one label set."""

    streams: tuple
    name: str = ""
    label_names: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(self.streams))
        if not self.streams:
            raise ValueError("dataset must contain at least one stream")
        m = self.streams[0].label_count
        for s in self.streams:
            if s.label_count != m:
                raise ValueError("all streams must share label_count")
        if self.label_names is not None:
            object.__setattr__(self, "label_names", tuple(self.label_names))
            if len(self.label_names) != m:
                raise ValueError("label_names length must equal label_count")

    @property
    def label_count(self) -> int:
        return self.streams[0].label_count

    def stream_ids(self):
        return [f"s{i}" for i in range(len(self.streams))]

    def __len__(self):
        return len(self.streams)


class TokenKind(enum.Enum):
    BOS = "bos"
    REAL = "real"
    FAKE = "fake"
    EOS = "eos"


@dataclass(frozen=True)
class Token:
    time: float
    label: int
    kind: TokenKind


@dataclass(frozen=True)
class AugmentedSequence:
    """BOS + events + fake epochs + EOS; fake/sentinel tokens carry label M."""

    tokens: tuple
    horizon: float
    label_count: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        toks = self.tokens
        m = self.label_count
        if len(toks) < 2 or toks[0].kind is not TokenKind.BOS or toks[-1].kind is not TokenKind.EOS:
            raise ValueError("sequence must start with BOS and end with EOS")
        if toks[0].time != 0.0 or toks[-1].time != self.horizon:
            raise ValueError("BOS must sit at time 0 and EOS at the horizon")
        prev_t = -1.0
        prev_real = -1.0
        for tok in toks:
            if tok.time < prev_t:
                raise ValueError("token times must be non-decreasing")
            if tok.kind is TokenKind.REAL:
                if tok.time <= prev_real:
                    raise ValueError("real-token times must be strictly increasing")
                if not (0 <= tok.label < m):
                    raise ValueError(f"real token label {tok.label} out of range")
                prev_real = tok.time
            elif tok.label != m:
                raise ValueError("sentinel/fake tokens must carry the fake label")
            prev_t = tok.time

    @property
    def fake_label(self) -> int:
        return self.label_count

    def __len__(self):
        return len(self.tokens)

    def real_events(self) -> EventStream:
        """Strip sentinels and fakes, recovering the source stream."""
        epochs = [Epoch(t.time, t.label) for t in self.tokens if t.kind is TokenKind.REAL]
        return EventStream(tuple(epochs), self.horizon, self.label_count)


# ---------------------------------------------------------------------------
# serialization


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".meta.json")


def save_stream(dataset: Dataset, path):
    """Write `stream_id,time,label` CSV plus the metadata sidecar."""
    path = Path(path)
    horizons = {s.horizon for s in dataset.streams}
    if len(horizons) != 1:
        raise ValueError("cannot save a dataset with mixed horizons (sidecar holds one)")
    horizon = horizons.pop()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stream_id", "time", "label"])
        for sid, stream in zip(dataset.stream_ids(), dataset.streams):
            for e in stream.epochs:
                writer.writerow([sid, repr(e.time), e.label])
    meta = {"num_labels": dataset.label_count, "horizon": horizon}
    if dataset.label_names is not None:
        meta["label_names"] = list(dataset.label_names)
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_stream(path) -> Dataset:
    """Load a CSV of streams with its sidecar; validates every row."""
    path = Path(path)
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise StreamFormatError(f"missing metadata sidecar {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    try:
        num_labels = int(meta["num_labels"])
        horizon = float(meta["horizon"])
    except (KeyError, TypeError, ValueError) as exc:
        raise StreamFormatError(f"{meta_path}: metadata needs num_labels and horizon") from exc
    label_names = meta.get("label_names")

    per_stream: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["stream_id", "time", "label"]:
            raise StreamFormatError(f"{path}:1: expected header stream_id,time,label")
        for lineno, rowvals in enumerate(reader, start=2):
            if not rowvals:
                continue
            if len(rowvals) != 3:
                raise StreamFormatError(f"{path}:{lineno}: expected 3 fields, got {len(rowvals)}")
            sid, time_s, label_s = rowvals
            try:
                time = float(time_s)
                label = int(label_s)
            except ValueError as exc:
                raise StreamFormatError(f"{path}:{lineno}: malformed row") from exc
            if not math.isfinite(time) or time < 0.0:
                raise StreamFormatError(f"{path}:{lineno}: time must be finite and >= 0")
            if time > horizon:
                raise StreamFormatError(f"{path}:{lineno}: time {time} exceeds horizon {horizon}")
            if not (0 <= label < num_labels):
                raise StreamFormatError(f"{path}:{lineno}: label {label} >= num_labels {num_labels}")
            per_stream.setdefault(sid, []).append((time, label, lineno))

    if not per_stream:
        raise StreamFormatError(f"{path}: no event rows")
    streams = []
    for sid, rows in per_stream.items():
        rows.sort(key=lambda r: r[0])
        for (t1, _, _), (t2, _, ln) in zip(rows, rows[1:]):
            if t1 == t2:
                raise StreamFormatError(f"{path}:{ln}: duplicate timestamp {t2} in stream {sid}")
        epochs = tuple(Epoch(t, lab) for t, lab, _ in rows)
        streams.append(EventStream(epochs, horizon, num_labels))
    return Dataset(tuple(streams), name=path.stem, label_names=label_names)


# ---------------------------------------------------------------------------
# splitting


def split_by_time(dataset: Dataset, fraction: float):
    """Per stream, cut at fraction*T; test clocks restart at 0."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must lie strictly between 0 and 1")
    train_streams, test_streams = [], []
    for s in dataset.streams:
        cut = fraction * s.horizon
        train = tuple(e for e in s.epochs if e.time < cut)
        test = tuple(Epoch(e.time - cut, e.label) for e in s.epochs if e.time >= cut)
        train_streams.append(EventStream(train, cut, s.label_count))
        test_streams.append(EventStream(test, s.horizon - cut, s.label_count))
    return (
        Dataset(tuple(train_streams), name=dataset.name + "-train", label_names=dataset.label_names),
        Dataset(tuple(test_streams), name=dataset.name + "-test", label_names=dataset.label_names),
    )


def split_by_stream(dataset: Dataset, fraction: float, seed: int):
    """Uniformly random ceil(fraction*S)-subset of streams as train, rest test."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = len(dataset.streams)
    if n < 2:
        raise ValueError("single-stream dataset: use split_by_time instead")
    n_train = math.ceil(fraction * n)
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=n_train, replace=False).tolist())
    train = tuple(dataset.streams[i] for i in range(n) if i in chosen)
    test = tuple(dataset.streams[i] for i in range(n) if i not in chosen)
    return (
        Dataset(train, name=dataset.name + "-train", label_names=dataset.label_names),
        Dataset(test, name=dataset.name + "-test", label_names=dataset.label_names),
    )


# ---------------------------------------------------------------------------
# fake-epoch augmentation


def augment(stream: EventStream, fake_count: int) -> AugmentedSequence:
    """Interleave fake_count evenly spaced fake epochs into every positive gap.

    The real skeleton is BOS(0), t_1..t_N, EOS(T). A gap [a, b] with b > a
    receives fakes at a + j*(b-a)/(K+1) for j = 1..K; zero-length gaps
    (an event at 0 or at T) receive none. Fakes and sentinels carry label M.
    """
    if fake_count < 0:
        raise ValueError("fake_count must be >= 0")
    m = stream.label_count
    skeleton = [(0.0, m, TokenKind.BOS)]
    skeleton += [(e.time, e.label, TokenKind.REAL) for e in stream.epochs]
    skeleton += [(stream.horizon, m, TokenKind.EOS)]

    tokens = []
    for (ta, la, ka), (tb, lb, kb) in zip(skeleton, skeleton[1:]):
        tokens.append(Token(ta, la, ka))
        if fake_count > 0 and tb > ta:
            width = tb - ta
            for j in range(1, fake_count + 1):
                tokens.append(Token(ta + j * width / (fake_count + 1), m, TokenKind.FAKE))
    tokens.append(Token(*skeleton[-1]))
    return AugmentedSequence(tuple(tokens), stream.horizon, m)
