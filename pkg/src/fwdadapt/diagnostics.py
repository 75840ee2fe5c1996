"""Analysis tools: zeroth-order vs first-order gradient quality, layer-selection
baselines, and ID/OOD feature convergence.

This is the one place outside pretraining that uses the autodiff backend.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from fwdadapt.autodiff import model_grad
from fwdadapt.drls import purity_profile
from fwdadapt.models import ModelGraph, ParamSelection
from fwdadapt.sfaa import LossWeights, SourceStats, aligned_layers, combine, objective_terms
from fwdadapt.stream import AdaptConfig, BatchObjective, TestStream, adapt_stream, final_accuracy
from fwdadapt.zoo import ZooConfig, estimate_gradient

SELECTORS = ("DRLS", "CMP1", "CMP2", "CMP3", "CMP4")


def cosine(a, b) -> float | None:
    """Cosine similarity, or ``None`` when either vector has zero norm."""
    a, b = np.ravel(a), np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class GradQualityEntry:
    step: int
    zoo_norm: float
    fo_norm: float
    cosine: float | None
    fo_norm_entropy: float
    cosine_entropy: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def fo_gradients(model: ModelGraph, selection: ParamSelection, x, stats: SourceStats | None,
                 weights: LossWeights) -> tuple[np.ndarray, np.ndarray]:
    """Tape gradients of the combined objective and of the entropy term alone."""
    st = stats if weights.align > 0 else None
    capture = st.layers if st is not None else ()

    def full(logits, feats, ops):
        return combine(*objective_terms(logits, feats, st, ops=ops), weights)

    def entropy(logits, feats, ops):
        return objective_terms(logits, feats, None, ops=ops)[0]

    return model_grad(model, selection, full, x, capture), model_grad(model, selection, entropy, x, capture)


def grad_quality(model: ModelGraph, selection: ParamSelection, batch, stats: SourceStats | None,
                 weights: LossWeights, cfg: ZooConfig, rng=None, zoo_grad=None, step: int = 0) -> GradQualityEntry:
    """Compare a ZOO estimate with the exact gradient of the same loss at the same point.

    Leaves the model untouched. Pass ``zoo_grad`` to score an estimate that was
    already drawn (e.g. the one a trace is about to apply).
    """
    if zoo_grad is None:
        obj = BatchObjective(model, selection, stats, weights, batch, len(batch), True)
        zoo_grad = estimate_gradient(obj, selection, cfg, rng).grad
    g_full, g_ent = fo_gradients(model, selection, batch, stats, weights)
    return GradQualityEntry(step, float(np.linalg.norm(zoo_grad)), float(np.linalg.norm(g_full)),
                            cosine(zoo_grad, g_full), float(np.linalg.norm(g_ent)), cosine(zoo_grad, g_ent))


def grad_quality_trace(model: ModelGraph, layers, stats: SourceStats | None, stream: TestStream,
                       cfg: AdaptConfig, steps: int) -> list[GradQualityEntry]:
    """Adapt a copy of ``model`` for ``steps`` updates, scoring every applied estimate.

    Batches are reused cyclically when the stream is shorter than ``steps``.
    """
    model = model.copy()
    sel = ParamSelection(model, layers)
    rng = cfg.zoo.rng()
    trace = []
    for t in range(steps):
        x = stream.inputs(t % len(stream))
        obj = BatchObjective(model, sel, stats, cfg.weights, x, len(x), True)
        est = estimate_gradient(obj, sel, cfg.zoo, rng)
        trace.append(grad_quality(model, sel, x, stats, cfg.weights, cfg.zoo, zoo_grad=est.grad, step=t))
        sel.write(sel.read() - cfg.zoo.lr * est.grad)
    return trace


def _top(scores: dict[int, float], budget: int) -> list[int]:
    # highest score first; ties resolved toward the shallower layer
    ranked = sorted(scores, key=lambda l: (-scores[l], l))
    return sorted(ranked[:budget])


def magnitude_scores(model: ModelGraph, candidates) -> dict[int, float]:
    out = {}
    for l in candidates:
        g = [np.abs(model.params[n]).mean() for n in model.norm_registry[l] if n.endswith(".g")]
        b = [np.abs(model.params[n]).mean() for n in model.norm_registry[l] if n.endswith(".b")]
        out[l] = float(np.mean(g) + np.mean(b))
    return out


def gradient_scores(model: ModelGraph, candidates, ood_batch, stats: SourceStats, weights: LossWeights):
    out = {}
    for l in candidates:
        sel = ParamSelection(model, [l])
        st = stats.subset(aligned_layers([l], model.n_layers)) if weights.align > 0 else None
        g, _ = fo_gradients(model, sel, ood_batch, st, weights)
        out[l] = float(np.abs(g).mean())
    return out


def influence_scores(model: ModelGraph, candidates, ood_batch) -> dict[int, float]:
    """Mean |logit change| when a layer's affine parameters are reset to identity."""
    base, _ = model.forward(ood_batch)
    out = {}
    for l in candidates:
        probe = model.copy()
        for n in probe.norm_registry[l]:
            probe.params[n] = np.ones_like(probe.params[n]) if n.endswith(".g") else np.zeros_like(probe.params[n])
        out[l] = float(np.abs(probe.forward(ood_batch)[0] - base).mean())
    return out


def select_by(name: str, model: ModelGraph, budget: int, freeze_shallow: int, id_set=None, ood_set=None,
              ood_batch=None, stats=None, weights=None, seed: int = 0) -> list[int]:
    """Layer set chosen by one selector, capped at ``budget`` layers.

    Only DRLS skips the ``freeze_shallow`` leading layers; the baselines rank
    every layer.
    """
    candidates = list(range(model.n_layers))
    if name == "CMP1":
        return candidates
    if name == "DRLS":
        purity, _ = purity_profile(model, id_set, ood_set, seed)
        return _top({l: purity[l] for l in candidates[freeze_shallow:]}, budget)
    if name == "CMP2":
        return _top(magnitude_scores(model, candidates), budget)
    if name == "CMP3":
        return _top(gradient_scores(model, candidates, ood_batch, stats, weights), budget)
    if name == "CMP4":
        return _top(influence_scores(model, candidates, ood_batch), budget)
    raise ValueError(f"unknown selector {name!r}; expected one of {SELECTORS}")


def selection_baselines(model: ModelGraph, id_set, ood_set, ood_batch, stats: SourceStats, stream: TestStream,
                        cfg: AdaptConfig, seeds=(0,), budget: int = 3, freeze_shallow: int = 1,
                        selectors=SELECTORS) -> list[dict]:
    """Adapt with each selector's layers on the same stream and seeds."""
    rows = []
    for name in selectors:
        layers = select_by(name, model, budget, freeze_shallow, id_set, ood_set, ood_batch, stats, cfg.weights)
        accs = []
        for seed in seeds:
            m = model.copy()
            st = stats.subset(aligned_layers(layers, m.n_layers))
            run_cfg = AdaptConfig(ZooConfig(cfg.zoo.k, cfg.zoo.c, cfg.zoo.lr, seed), cfg.weights,
                                  cfg.steps_per_batch, cfg.queue_size, cfg.predict_first)
            accs.append(final_accuracy(adapt_stream(m, ParamSelection(m, layers), st, stream, run_cfg)))
        rows.append({"selector": name, "layers": layers, "seeds": list(seeds), "final_accuracy": accs,
                     "median": float(np.median(accs))})
    return rows


def feature_convergence(before: ModelGraph, after: ModelGraph, id_set, ood_set, seed: int = 0) -> dict:
    """Per-layer ID/OOD clustering purity of the two models."""
    if before.arch != after.arch or before.n_layers != after.n_layers:
        raise ValueError("models must share an architecture")
    p_before, _ = purity_profile(before, id_set, ood_set, seed)
    p_after, _ = purity_profile(after, id_set, ood_set, seed)
    return {"layers": list(range(before.n_layers)), "before": p_before, "after": p_after}


def write_jsonl(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write((r.to_json() if hasattr(r, "to_json") else json.dumps(r, sort_keys=True)) + "\n")


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
