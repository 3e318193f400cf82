"""Central finite-difference verification of the hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import Batch, ModelConfig, ModelParams, backward, compute_loss, forward, init_params
from .numeric import LossWeights

STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def tiny_config(alpha: float = 1.0, **overrides) -> ModelConfig:
    """Config with input dims (3, 2, 2), latent 6 and hidden 5."""
    kw = dict(
        dim_volumetric=3,
        dim_demographic=2,
        dim_cognitive=2,
        enc_hidden_sizes=((4,), (3,), (3,)),
        enc_out=(2, 2, 2),
        rnn_hidden=5,
        rho_hidden_sizes=(4,),
        classifier_hidden_sizes=(4,),
        loss=LossWeights((1.0, 1.3, 2.0), alpha),
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def random_batch(config: ModelConfig, T: int, taus, rng: np.random.Generator, missing=()) -> Batch:
    """Random batch; ``missing`` lists (row, t) cells to mark unobserved."""
    taus = np.asarray(taus, dtype=np.int64)
    B = len(taus)
    arrays = [rng.normal(size=(B, T, d)) for d in config.input_dims]
    observed = np.ones((B, T), dtype=bool)
    for b, t in missing:
        observed[b, t] = False
        for a in arrays:
            a[b, t] = np.nan  # must never be read
    labels = rng.integers(0, 3, size=B)
    return Batch(*arrays, observed=observed, tau=taus, labels=labels)


def total_loss(batch: Batch, params: ModelParams) -> float:
    lw = params.config.loss
    trace = forward(batch, params, teacher=lw.alpha > 0)
    return compute_loss(trace, batch.labels, lw).total


def analytic_grads(batch: Batch, params: ModelParams, hook: Callable[[ModelParams], None] | None = None) -> dict:
    params.zero_grads()
    lw = params.config.loss
    trace = forward(batch, params, teacher=lw.alpha > 0)
    backward(trace, compute_loss(trace, batch.labels, lw), params)
    if hook is not None:
        hook(params)
    return {name: p.grad.copy() for name, p in params.blocks.items()}


def numeric_grads(batch: Batch, params: ModelParams, step: float = STEP) -> dict:
    out = {}
    for name, p in params.blocks.items():
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = total_loss(batch, params)
            flat[i] = orig - step
            down = total_loss(batch, params)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, tol: float = REL_TOL, floor: float = ABS_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor / tol).

    An entry is below ``tol`` exactly when the gap is within ``tol`` relative
    error or within ``floor`` absolute, so near-zero gradients are judged on
    the absolute gap alone.
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor / tol)
    return diff / scale


@dataclass
class GradcheckResult:
    label: str
    errors: dict[str, float]
    tol: float = REL_TOL
    failures: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.failures = [k for k, v in self.errors.items() if not v < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def check(batch: Batch, params: ModelParams, label: str = "", tol: float = REL_TOL, hook=None) -> GradcheckResult:
    a = analytic_grads(batch, params, hook=hook)
    n = numeric_grads(batch, params)
    errors = {name: float(relative_errors(a[name], n[name], tol).max(initial=0.0)) for name in a}
    return GradcheckResult(label, errors, tol)


def default_cases(T_tau=((2, 1), (3, 2), (4, 1))):
    """(label, kind, alpha, T, tau, missing) for the standard suite."""
    cases = []
    for T, tau in T_tau:
        for alpha in (0.0, 1.0):
            cases.append((f"flare T={T} tau={tau} alpha={alpha:g}", "flare", alpha, T, tau, ()))
            # second row has its second visit missing: exercises the imputation path
            cases.append((f"flare T={T} tau={tau} alpha={alpha:g} imputed", "flare", alpha, T, tau, ((1, 1),)))
        cases.append((f"concat T={T} tau={tau}", "concat", 0.0, T, tau, ()))
    return cases


def run_suite(seed: int = 0, config: ModelConfig | None = None, tol: float = REL_TOL, hook=None, cases=None) -> list[GradcheckResult]:
    """Gradient-check FLARe and the baseline over the standard (T, tau) cases.

    Each case uses a batch of two rows with different horizons so that the
    variable-length rollout is exercised as well.
    """
    base = config or tiny_config()
    results = []
    for i, (label, kind, alpha, T, tau, missing) in enumerate(cases or default_cases()):
        cfg = ModelConfig(**{**base.__dict__, "loss": LossWeights(base.loss.class_weights, alpha)})
        rng = np.random.default_rng([seed, i])
        params = init_params(cfg, kind, rng)
        taus = [tau, max(1, tau - 1)]
        batch = random_batch(cfg, T, taus, rng, missing if kind == "flare" else ())
        results.append(check(batch, params, label, tol, hook=hook))
    return results
