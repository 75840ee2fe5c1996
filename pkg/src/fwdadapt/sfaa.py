"""Spatial feature aggregation and the entropy + source-alignment objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fwdadapt import tensor as T
from fwdadapt.models import ModelGraph


class InputError(ValueError):
    pass


def aggregate(features):
    """Mean over tokens/positions: (m, d) -> (d,) or (N, m, d) -> (N, d)."""
    f = np.asarray(features, dtype=T.DTYPE)
    if f.ndim not in (2, 3) or f.shape[-2] == 0:
        raise T.ShapeError(f"expected (m, d) or (N, m, d) features, got {f.shape}")
    return f.mean(axis=-2)


@dataclass
class SourceStats:
    layers: list[int]
    mu: dict[int, np.ndarray]
    sigma: dict[int, np.ndarray]
    n: int

    def subset(self, layers) -> "SourceStats":
        missing = set(layers) - set(self.layers)
        if missing:
            raise InputError(f"source statistics do not cover layers {sorted(missing)}")
        layers = sorted(layers)
        return SourceStats(layers, {l: self.mu[l] for l in layers}, {l: self.sigma[l] for l in layers}, self.n)


def aligned_layers(selected, n_layers: int, policy: str = "selected+final") -> list[int]:
    """Layers whose statistics enter the alignment term."""
    if policy == "all":
        return list(range(n_layers))
    layers = set(selected)
    if policy == "selected+final":
        layers.add(n_layers - 1)
    elif policy != "selected":
        raise ValueError(f"unknown alignment policy {policy!r}")
    return sorted(layers)


def stats_from_vectors(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population standard deviation over the sample axis."""
    mu = vectors.mean(axis=0)
    return mu, np.sqrt(((vectors - mu) ** 2).mean(axis=0))


def compute_source_stats(model: ModelGraph, source_inputs, layers, batch_size: int = 256) -> SourceStats:
    n = len(source_inputs)
    if n < 2:
        raise InputError(f"need at least 2 source samples for a spread estimate, got {n}")
    layers = sorted(set(layers))
    vecs = {l: [] for l in layers}
    for start in range(0, n, batch_size):
        _, feats = model.forward(source_inputs[start : start + batch_size], capture=layers)
        for l in layers:
            vecs[l].append(aggregate(feats[l]))
    mu, sigma = {}, {}
    for l in layers:
        mu[l], sigma[l] = stats_from_vectors(np.concatenate(vecs[l]))
    return SourceStats(layers, mu, sigma, n)


@dataclass(frozen=True)
class LossWeights:
    entropy: float = 1.0
    align: float = 0.4

    def __post_init__(self):
        if self.entropy < 0 or self.align < 0 or (self.entropy == 0 and self.align == 0):
            raise ValueError(f"loss weights must be >= 0 and not both zero, got {self}")


@dataclass
class LossBreakdown:
    total: float
    entropy: float
    align: float

    def as_dict(self) -> dict:
        return {"total": self.total, "entropy": self.entropy, "align": self.align}


def objective_terms(logits, feats, stats: SourceStats | None, n_entropy=None, use_sigma=True, ops=T):
    """Summed entropy of the first ``n_entropy`` rows and the alignment penalty.

    Written against ``ops`` so the identical expression can be differentiated
    by the first-order backend.
    """
    ent = ops.entropy_from_logits(logits if n_entropy is None else logits[:n_entropy]).sum()
    align = 0.0
    if stats is not None:
        for l in stats.layers:
            v = ops.token_mean(feats[l])
            mu = v.mean(axis=0)
            term = ((mu - stats.mu[l]) ** 2).sum()
            if use_sigma:
                diff = v - mu
                sigma = ops.sqrt((diff * diff).mean(axis=0))
                term = term + ((sigma - stats.sigma[l]) ** 2).sum()
            align = align + term
    return ent, align


def combine(ent, align, w: LossWeights):
    return w.entropy * ent + w.align * align


def loss_from_outputs(logits, feats, stats, w: LossWeights, n_entropy=None, use_sigma=True) -> LossBreakdown:
    use_stats = stats if w.align > 0 else None
    ent, align = objective_terms(logits, feats, use_stats, n_entropy, use_sigma)
    ent, align = float(ent), float(align)
    return LossBreakdown(w.entropy * ent + w.align * align, ent, align)


def tta_loss(model: ModelGraph, batch, stats: SourceStats, w: LossWeights, context=None,
             use_sigma: bool | None = None) -> LossBreakdown:
    """Unsupervised objective on ``batch``; ``context`` rows join only the alignment statistics.

    A single row without context has no batch spread; that case is reserved
    for the memory-queue policy, which passes ``use_sigma=False`` explicitly.
    """
    batch = np.asarray(batch, dtype=T.DTYPE)
    n = len(batch)
    if n < 1:
        raise InputError("empty batch")
    x = batch if context is None or len(context) == 0 else np.concatenate([batch, context])
    if use_sigma is None:
        if len(x) < 2 and w.align > 0:
            raise InputError("batch statistics are undefined for a single sample; use the memory queue")
        use_sigma = True
    logits, feats = model.forward(x, capture=stats.layers if w.align > 0 else ())
    return loss_from_outputs(logits, feats, stats, w, n_entropy=n, use_sigma=use_sigma)
