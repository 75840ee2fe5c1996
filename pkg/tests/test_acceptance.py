"""End-to-end acceptance criteria, one test each, each printing a PASS/FAIL line."""

import json
import os
import shutil
import subprocess
import sys
import time
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
from conftest import HAS_AUTODIFF
from harness import TOY_WEIGHTS, noadapt, prepare, run, stream_for, summary
from oracles import central_diff, max_rel_error, tiny_vit_config

import fwdadapt
from fwdadapt import tensor as T
from fwdadapt.data import Corruption
from fwdadapt.drls import layer_purity
from fwdadapt.models import build_model, quantize
from fwdadapt.sfaa import LossWeights, compute_source_stats, loss_from_outputs, objective_terms, tta_loss
from fwdadapt.stream import evaluate_stream, final_accuracy, segment_accuracy
from fwdadapt.zoo import FlatParams, ZooConfig, estimate_gradient, zoo_step

TESTS = Path(__file__).parent
ROOT = TESTS.parent
PKG = Path(fwdadapt.__file__).parent

needs_autodiff = pytest.mark.skipif(not HAS_AUTODIFF, reason="criterion needs the autodiff backend")


def _finish(report, number, passed, detail):
    report(number, passed, detail)
    assert passed, detail


def test_criterion_01_estimator_correctness(acceptance_report):
    t0 = time.perf_counter()
    d, c = 10, 1e-3
    diag = np.arange(1, d + 1, dtype=np.float64)
    theta = np.ones(d)
    loss = lambda t: 0.5 * float(t @ (diag * t))  # noqa: E731
    rng = np.random.default_rng(0)
    cfg = ZooConfig(k=1, c=c)
    mean = np.mean([estimate_gradient(loss, theta, cfg, rng).grad for _ in range(10_000)], axis=0)
    rel = np.abs(mean - diag * theta) / np.abs(diag * theta)
    # per-query exactness of the two-sided difference
    exact = 0.0
    for s in range(100):
        r = np.random.default_rng(s)
        th = r.normal(size=d)
        est = estimate_gradient(loss, th, cfg, np.random.default_rng(s + 1))
        u = np.random.default_rng(s + 1).standard_normal(d)
        lp, lm = est.pairs[0]
        exact = max(exact, abs((lp - lm) / (2 * c) - u @ (diag * th)) / max(1.0, abs(u @ (diag * th))))
    elapsed = time.perf_counter() - t0
    passed = bool(rel.max() <= 0.02 and exact <= 1e-10 and elapsed < 10)
    _finish(acceptance_report, 1, passed,
            f"max componentwise rel err {rel.max():.4f} (bound 0.02, worst at index {int(rel.argmax())}); "
            f"per-query err {exact:.1e}; {elapsed:.1f}s")


def test_criterion_02_dimension_penalty(acceptance_report):
    t0 = time.perf_counter()
    budget, k = 2000, 5
    finals = {}
    for d in (8, 128):
        losses = []
        for seed in range(51):
            r = np.random.default_rng([d, seed])
            theta0 = r.normal(size=d)
            theta0 /= np.linalg.norm(theta0)  # same starting loss in both dimensions
            holder = FlatParams(theta0)
            cfg = ZooConfig(k=k, c=0.01, lr=0.05, seed=seed)
            g = cfg.rng()
            for _ in range(budget // (2 * k)):
                zoo_step(lambda t: 0.5 * float(t @ t), holder, cfg, g)
            losses.append(0.5 * float(holder.read() @ holder.read()))
        finals[d] = float(np.median(losses))
    elapsed = time.perf_counter() - t0
    passed = finals[8] < finals[128] and elapsed < 30
    _finish(acceptance_report, 2, passed,
            f"median final loss d=8 {finals[8]:.3e} vs d=128 {finals[128]:.3e}; {elapsed:.1f}s")


def test_criterion_03_purity_oracle(acceptance_report):
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    n, m, d = 64, 17, 32
    dup = r.normal(size=(n, m, d))
    _, p_dup = layer_purity(dup, dup.copy())
    _, p_sep = layer_purity(r.normal(0, 1e-3, (n, m, d)), r.normal(100, 1e-3, (n, m, d)))
    a, b = r.normal(size=(n, m, d)), r.normal(0.3, 1.0, size=(n, m, d))
    t_ab, p_ab = layer_purity(a, b)
    t_ba, p_ba = layer_purity(b, a)
    symmetric = bool(np.array_equal(t_ab, t_ba) and p_ab == p_ba)
    elapsed = time.perf_counter() - t0
    passed = p_dup <= 0.6 and p_sep == 1.0 and symmetric and elapsed < 5
    _finish(acceptance_report, 3, passed,
            f"duplicated {p_dup:.3f}, separated {p_sep:.3f}, label swap exact {symmetric}; {elapsed:.1f}s")


def _entropy_oracle(logits):
    total = 0.0
    for row in logits:
        z = np.exp(row - row.max())
        p = z / z.sum()
        total += -sum(pi * np.log(pi) for pi in p if pi > 0)
    return total


def test_criterion_04_sfaa_fixed_point(acceptance_report, rng):
    model = build_model("vit", 0)
    x = rng.uniform(size=(16, 1, 16, 16))
    stats = compute_source_stats(model, x, [1, 2, 3])
    logits, feats = model.forward(x, capture=stats.layers)
    one_hot = 1e3 * np.eye(logits.shape[1])[logits.argmax(axis=1)]
    fixed = loss_from_outputs(one_hot, feats, stats, LossWeights(1.0, 0.4)).total
    ent = tta_loss(model, x, stats, LossWeights(1.0, 0.0)).total
    gap = abs(ent - _entropy_oracle(logits))
    passed = fixed < 1e-9 and gap < 1e-12
    _finish(acceptance_report, 4, passed, f"fixed-point loss {fixed:.2e}; entropy-only gap {gap:.1e}")


@needs_autodiff
def test_criterion_05_fo_oracle_integrity(acceptance_report):
    from fwdadapt.autodiff import grad
    from fwdadapt.autodiff import tape as ops

    t0 = time.perf_counter()
    worst, n_params = 0.0, 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        model = build_model("vit", seed, **tiny_vit_config())
        # evaluate at a generic point rather than at the initialization
        for name in model.params:
            model.params[name] = model.params[name] + 0.1 * r.normal(size=model.params[name].shape)
        n_params = sum(v.size for v in model.params.values())
        x = r.uniform(size=(4, 1, 8, 8))
        stats = compute_source_stats(model, r.uniform(size=(6, 1, 8, 8)), range(model.n_layers))

        def loss(p, o):
            logits, feats = model.forward(x, capture=stats.layers, ops=o, values=p)
            e, a = objective_terms(logits, feats, stats, ops=o)
            return 0.3 * e + a

        tape = grad(lambda p: loss(p, ops), model.params)
        fd = central_diff(lambda p: float(loss(p, T)), {k: v.copy() for k, v in model.params.items()}, h=1e-5)
        worst = max(worst, max_rel_error(tape, fd))
    elapsed = time.perf_counter() - t0
    passed = worst < 1e-4 and n_params <= 2000 and elapsed < 60
    _finish(acceptance_report, 5, passed,
            f"worst rel err {worst:.1e} over {n_params} params x 20 seeds; {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_06_end_to_end_recovery(acceptance_report, pretrained_vit, dataset):
    t0 = time.perf_counter()
    x, y = dataset.full_split("source_holdout")
    clean = float((pretrained_vit.forward(x)[0].argmax(axis=1) == y).mean())
    xn, _ = dataset.full_split("source_holdout", corruption=Corruption("gaussian_noise", 5))
    noisy = float((pretrained_vit.forward(xn)[0].argmax(axis=1) == y).mean())
    prep = prepare(pretrained_vit, dataset)
    ours, base, naive, recovery = [], [], [], []
    for seed in range(5):
        stream = stream_for(dataset, ["gaussian_noise"], 8192, seed)
        base.append(noadapt(pretrained_vit, stream))
        ours.append(final_accuracy(run(pretrained_vit, prep, prep.layers, TOY_WEIGHTS, stream, seed)))
        naive.append(final_accuracy(run(pretrained_vit, prep, list(range(pretrained_vit.n_layers)),
                                        LossWeights(1.0, 0.0), stream, seed)))
        recovery.append((ours[-1] - base[-1]) / (clean - base[-1]))
    elapsed = time.perf_counter() - t0
    beats_base = sum(o > b for o, b in zip(ours, base))
    beats_naive = sum(o > n for o, n in zip(ours, naive))
    checks = {
        "clean>=0.95": clean >= 0.95,
        "drop>=15pt": clean - noisy >= 0.15,
        "recovery>=40%": float(np.mean(recovery)) >= 0.40,
        "beats NoAdapt 4/5": beats_base >= 4,
        "beats naive 4/5": beats_naive >= 4,
        "<10min": elapsed < 600,
    }
    detail = (f"layers {prep.layers}; clean {clean:.4f} noisy {noisy:.4f}; "
              f"recovery {summary(recovery)}; ours {summary(ours)}; noadapt {summary(base)}; "
              f"naive {summary(naive)}; wins vs noadapt {beats_base}/5 vs naive {beats_naive}/5; "
              f"{elapsed:.0f}s; failed: {[k for k, v in checks.items() if not v]}")
    _finish(acceptance_report, 6, all(checks.values()), detail)


@pytest.mark.slow
def test_criterion_07_ablation_direction(acceptance_report, pretrained_vit, dataset):
    prep = prepare(pretrained_vit, dataset)
    sfaa_only, ent_only = [], []
    for seed in range(5):
        stream = stream_for(dataset, ["gaussian_noise"], 4096, seed)
        sfaa_only.append(final_accuracy(run(pretrained_vit, prep, prep.layers,
                                            LossWeights(0.0, TOY_WEIGHTS.align), stream, seed)))
        ent_only.append(final_accuracy(run(pretrained_vit, prep, prep.layers,
                                           LossWeights(TOY_WEIGHTS.entropy, 0.0), stream, seed)))
    passed = bool(np.median(sfaa_only) >= np.median(ent_only))
    _finish(acceptance_report, 7, passed, f"SFAA-only {summary(sfaa_only)}; entropy-only {summary(ent_only)}")


ENGINE_TESTS = ["test_tensor.py", "test_models.py", "test_zoo.py", "test_drls.py", "test_sfaa.py",
                "test_stream.py", "test_data.py", "test_config.py", "test_checkpoint.py", "test_boundary.py"]


def _junit_outcomes(path: Path) -> dict[str, str]:
    out = {}
    for case in ET.parse(path).getroot().iter("testcase"):
        nodeid = f"{case.get('classname')}::{case.get('name')}"
        kinds = {child.tag for child in case}
        out[nodeid] = ("error" if "error" in kinds else "failed" if "failure" in kinds
                       else "skipped" if "skipped" in kinds else "passed")
    return out


def _pytest(args, env, junit):
    cmd = [sys.executable, "-m", "pytest", "-p", "no:cacheprovider", "-q", f"--junitxml={junit}", *args]
    return subprocess.run(cmd, cwd=ROOT, env=env, capture_output=True, text=True)


@pytest.mark.slow
def test_criterion_08_forward_only_build(acceptance_report, checkpoint_paths, tmp_path):
    build = tmp_path / "src" / "fwdadapt"
    shutil.copytree(PKG, build, ignore=shutil.ignore_patterns("autodiff", "diagnostics.py", "__pycache__"))
    env = {**os.environ, "PYTHONPATH": f"{build.parent}{os.pathsep}{TESTS}",
           "FWDADAPT_VIT_CHECKPOINT": checkpoint_paths["vit"], "FWDADAPT_CNN_CHECKPOINT": checkpoint_paths["cnn"]}
    probe = subprocess.run(
        [sys.executable, "-c", "import importlib.util, fwdadapt; "
         "print(fwdadapt.__file__); print(importlib.util.find_spec('fwdadapt.autodiff') is None)"],
        env=env, capture_output=True, text=True)
    where, excluded = probe.stdout.split()
    stripped_run = _pytest([str(TESTS / f) for f in ENGINE_TESTS], env, tmp_path / "stripped.xml")
    outcomes = _junit_outcomes(tmp_path / "stripped.xml")
    counts = {k: sum(v == k for v in outcomes.values()) for k in ("passed", "failed", "error", "skipped")}
    failed = sorted(n for n, v in outcomes.items() if v == "failed")
    # a failure only counts against this criterion if the full build passes the same test
    same_in_full = True
    if failed:
        ids = [f"{TESTS / (n.split('::')[0].split('.')[-1] + '.py')}::{n.split('::')[1]}" for n in failed]
        _pytest(ids, {**os.environ, "FWDADAPT_VIT_CHECKPOINT": checkpoint_paths["vit"],
                      "FWDADAPT_CNN_CHECKPOINT": checkpoint_paths["cnn"]}, tmp_path / "full.xml")
        full = _junit_outcomes(tmp_path / "full.xml")
        same_in_full = all(full.get(n) == "failed" for n in failed)
    passed = (where.startswith(str(build)) and excluded == "True" and counts["passed"] > 0
              and counts["error"] == 0 and counts["skipped"] == 0 and same_in_full)
    detail = (f"autodiff importable: {excluded != 'True'}; {counts}; "
              f"failures shared with the full build: {[n.split('::')[1] for n in failed]}")
    if not passed:
        detail += f"\n{stripped_run.stdout[-2000:]}"
    _finish(acceptance_report, 8, passed, detail)


@pytest.mark.slow
def test_criterion_09_quantized_adaptation(acceptance_report, pretrained_vit, dataset):
    t0 = time.perf_counter()
    q = quantize(pretrained_vit)
    prep = prepare(q, dataset)
    adapted, base = [], []
    for seed in range(5):
        stream = stream_for(dataset, ["gaussian_noise"], 4096, seed)
        base.append(noadapt(q, stream))
        adapted.append(final_accuracy(run(q, prep, prep.layers, TOY_WEIGHTS, stream, seed)))
    gain = np.median(np.subtract(adapted, base))
    elapsed = time.perf_counter() - t0
    passed = bool(gain > 0 and elapsed < 600)
    _finish(acceptance_report, 9, passed,
            f"int8 layers {prep.layers}; adapted {summary(adapted)}; noadapt {summary(base)}; "
            f"median gain {gain:.4f}; {elapsed:.0f}s")


# batch-1 runs take 64x more updates, so they use a 10x smaller step than the batch-64 toy profile
BATCH1_LR = 1e-4


@pytest.mark.slow
def test_criterion_10_wild_settings(acceptance_report, pretrained_vit, dataset):
    prep = prepare(pretrained_vit, dataset)
    one = stream_for(dataset, ["gaussian_noise"], 1024, 0, batch_size=1)
    big = stream_for(dataset, ["gaussian_noise"], 1024, 0, batch_size=64)
    acc1 = final_accuracy(run(pretrained_vit, prep, prep.layers, TOY_WEIGHTS, one, 0, lr=BATCH1_LR))
    acc64 = final_accuracy(run(pretrained_vit, prep, prep.layers, TOY_WEIGHTS, big, 0))
    corruptions = ["gaussian_noise", "box_blur", "pixelate"]
    margins = []
    for seed in range(5):
        stream = stream_for(dataset, corruptions, 1024, seed, kind="continual")
        ad = segment_accuracy(run(pretrained_vit, prep, prep.layers, TOY_WEIGHTS, stream, seed))
        na = segment_accuracy(evaluate_stream(pretrained_vit, stream))
        margins.append([ad[s] - na[s] for s in sorted(na)])
    worst = np.median(margins, axis=0)
    passed = bool(abs(acc1 - acc64) <= 0.05 and np.all(worst >= -0.02))
    _finish(acceptance_report, 10, passed,
            f"batch-1 {acc1:.4f} vs batch-64 {acc64:.4f}; continual median boundary margins "
            f"{np.round(worst, 4).tolist()} (floor -0.02)")


@needs_autodiff
def test_criterion_11_cli_determinism(acceptance_report, tmp_path):
    from fwdadapt import cli
    from fwdadapt.config import TOY_PROFILE

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**TOY_PROFILE, "epochs": 1, "samples_per_corruption": 256, "diag_steps": 4}))
    stages = [["pretrain"], ["quantize"], ["purity"], ["adapt"], ["adapt", "--quantized", "--layers", "1,2,3"],
              ["diagnose"], ["export-data"]]
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        codes = [cli.main([*stage, "--config", str(cfg), "--out", str(out)]) for stage in stages]
        assert codes == [0] * len(stages), codes
        # manifests record the run directory, so they differ by construction
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir()) if not p.name.endswith("manifest.json")})
    jsonl = sorted(n for n in outputs[0] if n.endswith(".jsonl"))
    same_jsonl = all(outputs[0][n] == outputs[1].get(n) for n in jsonl)
    same_other = [n for n in outputs[0] if n not in jsonl and outputs[0][n] != outputs[1].get(n)]
    passed = same_jsonl and len(jsonl) >= 3 and not same_other
    _finish(acceptance_report, 11, passed,
            f"JSON-lines files identical: {same_jsonl} ({', '.join(jsonl)}); other differing outputs: {same_other}")
