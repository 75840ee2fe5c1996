"""Online test-time adaptation over a stream of unlabeled batches.

Each batch is read once. Before it is scored, the selected norm parameters
take ``steps_per_batch`` zeroth-order steps on the unsupervised objective of
that same batch, then one more forward produces the predictions that count.
Labels never reach this loop: a :class:`TestStream` keeps them and only hands
back the number of correct predictions.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from fwdadapt.data import CORRUPTIONS, Corruption, DataConfigError, SyntheticDataset
from fwdadapt.models import ModelGraph, ParamSelection
from fwdadapt.sfaa import LossWeights, SourceStats, loss_from_outputs
from fwdadapt.zoo import ZooConfig, ZooEstimationError, estimate_gradient

SCHEDULE_KINDS = ("standard", "continual", "mixed", "label_shift")


@dataclass
class Segment:
    corruption: str
    severity: int
    count: int
    ordering: str = "shuffled"


@dataclass
class StreamSchedule:
    kind: str
    segments: list[Segment]
    batch_size: int
    seed: int = 0
    # per-sample corruption names for mixed/label-shift streams
    assignments: list[str] | None = None
    severity_of: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    @property
    def total(self) -> int:
        return sum(s.count for s in self.segments)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def make_schedule(kind: str, corruptions, severities=5, seed: int = 0, samples_per_corruption: int = 1024,
                  batch_size: int = 64) -> StreamSchedule:
    corruptions = list(corruptions)
    if not corruptions:
        raise DataConfigError("corruption list is empty")
    for c in corruptions:
        if c not in CORRUPTIONS:
            raise DataConfigError(f"unknown corruption {c!r}; expected one of {CORRUPTIONS}")
    if kind not in SCHEDULE_KINDS:
        raise DataConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    sev = [severities] * len(corruptions) if isinstance(severities, int) else list(severities)
    if len(sev) != len(corruptions):
        raise DataConfigError("one severity per corruption is required")
    if kind == "standard":
        return StreamSchedule(kind, [Segment(corruptions[0], sev[0], samples_per_corruption)], batch_size, seed)
    if kind == "continual":
        segs = [Segment(c, s, samples_per_corruption) for c, s in zip(corruptions, sev)]
        return StreamSchedule(kind, segs, batch_size, seed)
    total = samples_per_corruption * len(corruptions)
    pool = np.repeat(np.arange(len(corruptions)), samples_per_corruption)
    pool = np.random.default_rng([seed, 11]).permutation(pool)
    assignments = [corruptions[i] for i in pool]
    ordering = "shuffled" if kind == "mixed" else "class_sorted"
    seg = Segment("mixed" if len(corruptions) > 1 else corruptions[0], sev[0], total, ordering)
    return StreamSchedule(kind, [seg], batch_size, seed, assignments, dict(zip(corruptions, sev)))


class TestStream:
    """Materialized stream; inputs are generated on first request per batch."""

    __test__ = False

    def __init__(self, dataset: SyntheticDataset, batches: list[dict]):
        self.dataset = dataset
        self._batches = batches

    def __len__(self):
        return len(self._batches)

    def inputs(self, b: int) -> np.ndarray:
        entry = self._batches[b]
        out = np.empty((len(entry["index"]), 1, self.dataset.size, self.dataset.size))
        for corr, rows in entry["groups"]:
            out[rows] = self.dataset.images("test", entry["index"][rows], corr)
        return out

    def segment(self, b: int) -> int:
        return self._batches[b]["segment"]

    def score(self, b: int, predictions) -> int:
        return int((np.asarray(predictions) == self._batches[b]["labels"]).sum())

    def labels_of(self, b: int) -> np.ndarray:
        """Scorer-side access for class-ordering checks; the engine never calls this."""
        return self._batches[b]["labels"].copy()


def materialize(schedule: StreamSchedule, dataset: SyntheticDataset) -> TestStream:
    n_test = dataset.split_size("test")
    if schedule.total > n_test:
        raise DataConfigError(f"schedule needs {schedule.total} samples, test split has {n_test}")
    perm = np.random.default_rng([dataset.seed, schedule.seed, 3]).permutation(n_test)[: schedule.total]
    batches, start = [], 0
    sev_of = schedule.severity_of
    for s_idx, seg in enumerate(schedule.segments):
        idx = perm[start : start + seg.count]
        if schedule.assignments is not None:
            kinds = np.array(schedule.assignments[start : start + seg.count])
        else:
            kinds = np.array([seg.corruption] * seg.count)
        labels = dataset.label("test", idx)
        if seg.ordering == "class_sorted":
            order = np.argsort(labels, kind="stable")
            idx, kinds, labels = idx[order], kinds[order], labels[order]
        for b0 in range(0, seg.count, schedule.batch_size):
            sl = slice(b0, b0 + schedule.batch_size)
            bk = kinds[sl]
            groups = []
            for k in dict.fromkeys(bk.tolist()):
                corr = Corruption(k, sev_of.get(k, seg.severity), seed=schedule.seed)
                groups.append((corr, np.flatnonzero(bk == k)))
            batches.append({"index": idx[sl], "labels": labels[sl], "groups": groups, "segment": s_idx})
        start += seg.count
    return TestStream(dataset, batches)


@dataclass
class AdaptConfig:
    zoo: ZooConfig = field(default_factory=ZooConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    steps_per_batch: int = 1
    queue_size: int = 4
    predict_first: bool = False

    def __post_init__(self):
        if self.steps_per_batch < 1:
            raise ValueError("steps_per_batch must be >= 1")
        if self.queue_size < 0:
            raise ValueError("queue_size must be >= 0")


@dataclass
class MetricsRecord:
    step: int
    segment: int
    batch_size: int
    batch_correct: int
    batch_accuracy: float
    running_accuracy: float
    loss: float
    entropy: float
    align: float
    grad_norm: float | None
    forwards: int
    skipped: bool
    wall_time: float

    def to_json(self, timing: bool = False) -> str:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


class JsonlSink:
    """Writes one JSON line per record and flushes after each batch."""

    def __init__(self, path, timing: bool = False):
        self._f = open(path, "w")
        self.timing = timing

    def __call__(self, record: MetricsRecord):
        self._f.write(record.to_json(self.timing) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class BatchObjective:
    """Loss of the current batch as a function of the selected parameters."""

    def __init__(self, model, selection, stats, weights, x, n_current, use_sigma):
        self.model, self.selection, self.stats, self.weights = model, selection, stats, weights
        self.x, self.n_current, self.use_sigma = x, n_current, use_sigma
        self.capture = stats.layers if (stats is not None and weights.align > 0) else []
        self.forwards = 0

    def evaluate(self):
        self.forwards += 1
        logits, feats = self.model.forward(self.x, capture=self.capture)
        terms = loss_from_outputs(logits, feats, self.stats if self.capture else None, self.weights,
                                  n_entropy=self.n_current, use_sigma=self.use_sigma)
        return logits[: self.n_current], terms

    def __call__(self, theta):
        self.selection.write(theta)
        return self.evaluate()[1].total


def _batch_context(x, queue, cfg: AdaptConfig):
    """Inputs, weights and sigma policy for one batch (memory queue for single samples)."""
    if len(x) > 1:
        return x, cfg.weights, True
    if cfg.queue_size == 0 or cfg.weights.align == 0:
        return x, LossWeights(cfg.weights.entropy or 1.0, 0.0), True
    ctx = np.concatenate([x, *queue]) if queue else x
    return ctx, cfg.weights, len(queue) >= 2


def adapt_stream(model: ModelGraph, selection: ParamSelection | None, stats: SourceStats | None,
                 stream: TestStream, cfg: AdaptConfig, sink=None) -> list[MetricsRecord]:
    """Run the online loop; ``selection=None`` (or lr 0) evaluates without adapting."""
    rng = cfg.zoo.rng()
    queue: deque = deque(maxlen=cfg.queue_size if cfg.queue_size > 0 else None)
    records, seen, correct, forwards = [], 0, 0, 0
    adapt = selection is not None and selection.dim > 0
    for b in range(len(stream)):
        t0 = time.perf_counter()
        x = stream.inputs(b)
        ctx, weights, use_sigma = _batch_context(x, queue, cfg)
        obj = BatchObjective(model, selection, stats, weights, ctx, len(x), use_sigma)
        skipped, gnorm = False, None
        if cfg.predict_first:
            logits, terms = obj.evaluate()
        for _ in range(cfg.steps_per_batch if adapt else 0):
            charged = obj.forwards
            try:
                est = estimate_gradient(obj, selection, cfg.zoo, rng)
            except ZooEstimationError:
                # an aborted estimate is charged its full 2k budget
                skipped = True
                obj.forwards = charged + 2 * cfg.zoo.k
                continue
            gnorm = est.norm
            if cfg.zoo.lr != 0.0:
                selection.write(selection.read() - cfg.zoo.lr * est.grad)
        if not cfg.predict_first:
            logits, terms = obj.evaluate()
        preds = logits.argmax(axis=1)
        n_ok = stream.score(b, preds)
        seen += len(x)
        correct += n_ok
        forwards += obj.forwards
        if cfg.queue_size > 0:
            for row in x:
                queue.append(row[None])
        rec = MetricsRecord(b, stream.segment(b), len(x), n_ok, n_ok / len(x), correct / seen, terms.total,
                            terms.entropy, terms.align, gnorm, forwards, skipped, time.perf_counter() - t0)
        records.append(rec)
        if sink is not None:
            sink(rec)
    return records


def evaluate_stream(model: ModelGraph, stream: TestStream) -> list[MetricsRecord]:
    """NoAdapt baseline: same stream, same scoring, frozen parameters."""
    return adapt_stream(model, None, None, stream, AdaptConfig(weights=LossWeights(1.0, 0.0)))


def final_accuracy(records: list[MetricsRecord]) -> float:
    return records[-1].running_accuracy if records else float("nan")


def segment_accuracy(records: list[MetricsRecord]) -> dict[int, float]:
    """Running accuracy at the last batch of every segment."""
    return {r.segment: r.running_accuracy for r in records}
