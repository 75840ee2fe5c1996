"""Two-sided randomized gradient estimation and the forward-only update step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ZooEstimationError(RuntimeError):
    def __init__(self, query: int, msg: str = "non-finite loss at perturbed point"):
        super().__init__(f"query {query}: {msg}")
        self.query = query


@dataclass(frozen=True)
class ZooConfig:
    k: int = 5
    c: float = 0.01
    lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.c > 0:
            raise ValueError(f"c must be > 0, got {self.c}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass
class GradientEstimate:
    grad: np.ndarray
    pairs: list[tuple[float, float]]
    forwards: int

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad))

    @property
    def center_loss(self) -> float:
        """Mean of the perturbed losses, an O(c^2) proxy for L(theta) costing no extra forward."""
        return float(np.mean([a + b for a, b in self.pairs]) / 2.0)


@dataclass
class StepRecord:
    grad_norm: float
    loss_before: float
    loss_after: float | None
    forwards: int


def _current(params):
    return params.read() if hasattr(params, "read") else np.asarray(params, dtype=np.float64)


def estimate_gradient(loss_fn, params, cfg: ZooConfig, rng: np.random.Generator | None = None) -> GradientEstimate:
    """Average of ``k`` antithetic Gaussian finite differences of ``loss_fn`` around ``params``.

    ``loss_fn`` maps a flat parameter vector to a scalar. ``params`` is either a
    flat vector or an object with ``read()``/``write()`` (a ParamSelection),
    which is restored bitwise to its entry value on exit, success or not.
    """
    rng = cfg.rng() if rng is None else rng
    theta = _current(params)
    if theta.size < 1:
        raise ValueError("cannot estimate a gradient over zero parameters")
    theta = theta.copy()
    g = np.zeros_like(theta)
    pairs = []
    try:
        for i in range(cfg.k):
            u = rng.standard_normal(theta.size)
            lp = float(loss_fn(theta + cfg.c * u))
            lm = float(loss_fn(theta - cfg.c * u))
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ZooEstimationError(i)
            pairs.append((lp, lm))
            g += ((lp - lm) / (2.0 * cfg.c)) * u
    finally:
        if hasattr(params, "write"):
            params.write(theta)
    return GradientEstimate(g / cfg.k, pairs, 2 * cfg.k)


def zoo_step(loss_fn, params, cfg: ZooConfig, rng: np.random.Generator | None = None,
             evaluate_after: bool = False) -> tuple[GradientEstimate, StepRecord]:
    """One ``theta <- theta - lr * g_hat`` update written through ``params``."""
    est = estimate_gradient(loss_fn, params, cfg, rng)
    if cfg.lr != 0.0:
        params.write(params.read() - cfg.lr * est.grad)
    after = None
    forwards = est.forwards
    if evaluate_after:
        after = float(loss_fn(params.read()))
        forwards += 1
    return est, StepRecord(est.norm, est.center_loss, after, forwards)


class FlatParams:
    """Minimal read/write holder for optimizing a bare vector."""

    def __init__(self, theta):
        self.theta = np.array(theta, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.theta.size

    def read(self) -> np.ndarray:
        return self.theta.copy()

    def write(self, flat) -> None:
        self.theta = np.array(flat, dtype=np.float64)
