"""Layer selection by cross-domain clustering purity.

For each token (or spatial position) of a layer, the ID and OOD feature
vectors are pooled and split with 2-means; purity is the fraction of points
that sit in their cluster's majority domain. Layers whose mean purity reaches
the threshold still separate the domains and are the ones worth adapting.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from fwdadapt.models import ModelGraph, ParamSelection
from fwdadapt.parallel import pmap


class SelectionError(RuntimeError):
    def __init__(self, msg: str, report=None):
        super().__init__(msg)
        self.report = report


def _farthest_pair(points: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    iu = np.triu_indices(len(points), k=1)
    vals = d2[iu]
    best = np.flatnonzero(vals == vals.max())
    # the seed only matters when several pairs tie for the maximum
    pick = best[0] if len(best) == 1 else rng.choice(best)
    return int(iu[0][pick]), int(iu[1][pick])


def two_means(points, seed: int = 0, max_iter: int = 100):
    """Lloyd's algorithm with farthest-pair seeding.

    Returns ``(assignments, centroids, iterations)``. Points equidistant from
    both centroids go to cluster 0, so an all-identical input lands entirely in
    cluster 0. An emptied cluster keeps its previous centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise ValueError("two_means needs at least 2 points")
    i, j = _farthest_pair(x, np.random.default_rng(seed))
    centroids = np.stack([x[i], x[j]])
    assign = None
    for it in range(1, max_iter + 1):
        d = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        new = (d[:, 1] < d[:, 0]).astype(int)
        if assign is not None and np.array_equal(new, assign):
            return assign, centroids, it
        assign = new
        for q in (0, 1):
            members = x[assign == q]
            if len(members):
                centroids[q] = members.mean(axis=0)
    return assign, centroids, max_iter


def cluster_purity(assign: np.ndarray, domain: np.ndarray) -> float:
    """(1 / total) * sum over clusters of the majority-domain count."""
    total = 0
    for q in (0, 1):
        in_q = assign == q
        total += max(int((in_q & (domain == 0)).sum()), int((in_q & (domain == 1)).sum()))
    return total / len(assign)


def layer_purity(features_id, features_ood, seed: int = 0):
    """Per-token purities and their mean for (N, M, d) ID and OOD features."""
    fid, food = np.asarray(features_id), np.asarray(features_ood)
    if fid.shape != food.shape:
        raise ValueError(f"ID/OOD features must match in shape, got {fid.shape} vs {food.shape}")
    n, m, _ = fid.shape
    domain = np.repeat([0, 1], n)

    def token(t):
        assign, _, _ = two_means(np.concatenate([fid[:, t], food[:, t]]), seed)
        return cluster_purity(assign, domain)

    per_token = np.array(pmap(token, range(m)))
    return per_token, float(per_token.mean())


@dataclass
class PurityReport:
    purity: list[float]
    per_token: list[list[float]]
    n_per_domain: int
    tau: float
    freeze_shallow: int
    selected: list[int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PurityReport":
        return cls(**json.loads(text))


def purity_profile(model: ModelGraph, id_set, ood_set, seed: int = 0):
    layers = list(range(model.n_layers))
    _, fid = model.forward(id_set, capture=layers)
    _, food = model.forward(ood_set, capture=layers)
    out = [layer_purity(fid[l], food[l], seed) for l in layers]
    return [p for _, p in out], [t.tolist() for t, _ in out]


def threshold_layers(purity, tau: float, freeze_shallow: int = 0) -> list[int]:
    return [l for l, p in enumerate(purity) if p >= tau and l >= freeze_shallow]


def select_layers(model: ModelGraph, id_set, ood_set, tau: float = 0.6, freeze_shallow: int = 1,
                  seed: int = 0) -> tuple[ParamSelection, PurityReport]:
    if not 0.5 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0.5, 1], got {tau}")
    if freeze_shallow < 0:
        raise ValueError("freeze_shallow must be >= 0")
    if len(id_set) != len(ood_set):
        raise ValueError(f"ID and OOD sets differ in size: {len(id_set)} vs {len(ood_set)}")
    purity, per_token = purity_profile(model, id_set, ood_set, seed)
    selected = threshold_layers(purity, tau, freeze_shallow)
    report = PurityReport(purity, per_token, len(id_set), tau, freeze_shallow, selected)
    if not selected:
        raise SelectionError(
            f"no layer reaches purity {tau} (purities {np.round(purity, 3).tolist()}); decrease tau",
            report,
        )
    return ParamSelection(model, selected), report
