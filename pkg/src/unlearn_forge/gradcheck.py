"""Central finite-difference checks of every loss against the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .divergence import DivergenceKind
from .losses import (
    ForgetExample,
    LossSpec,
    Method,
    ReferenceModel,
    RetainExample,
    build_random_responses,
    compute_loss,
)
from .model import ModelConfig, _bind, init_params, value_and_grad

TOLERANCE = {"double": 1e-6, "single": 1e-3}


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    n_coords: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error <= self.tolerance)


def check_gradient(params, loss_fn, h=1e-5, coords_per_tensor=None, seed=0, name="loss",
                   tolerance=None):
    """Compare ``value_and_grad`` with central differences.

    ``loss_fn(bound_params)`` must return a scalar Var.  The numeric side is
    always evaluated in float64, so for single-precision params it acts as
    an independent high-precision oracle.  ``coords_per_tensor=None`` checks
    every coordinate.
    """
    _, grads = value_and_grad(params, loss_fn)
    p64 = params.astype("double")
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for pname, t in p64.tensors.items():
        flat = t.reshape(-1)
        if coords_per_tensor is None or coords_per_tensor >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=coords_per_tensor, replace=False))
        g = grads[pname].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(_bind(p64)).data)
            flat[i] = orig - h
            down = float(loss_fn(_bind(p64)).data)
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(float(g[i]))
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-30)
    tol = tolerance if tolerance is not None else TOLERANCE[params.precision]
    return GradCheckResult(name, float(np.linalg.norm(a - n) / denom), len(a), tol)


def toy_problem(precision="double", seed=0):
    """A ~5k-parameter model, a moved copy of it as reference, and small batches."""
    cfg = ModelConfig(embed_dim=8, n_layers=1, n_heads=2, context_len=24, ffn_mult=2.0,
                      seed=seed, init_std=0.3)
    theta = init_params(cfg, precision)
    ref_cfg = ModelConfig(**{**cfg.to_dict(), "seed": seed + 1})
    ref = ReferenceModel(init_params(ref_cfg, precision))
    rng = np.random.default_rng(seed + 7)

    def toks(n):
        return tuple(int(t) for t in rng.integers(0, 256, size=n))

    forget = [ForgetExample(toks(4), toks(5), y_e=toks(3), y_idk=toks(4)),
              ForgetExample(toks(3), toks(6), y_e=toks(5), y_idk=toks(2))]
    retain = [RetainExample(toks(5), toks(4)), RetainExample(toks(2), toks(7))]
    pool = build_random_responses(retain + [RetainExample(toks(3), toks(3))], 3, seed)
    return theta, ref, forget, retain, pool


def all_specs(beta=0.5, gamma=0.3):
    """One spec per method, FLAT expanded over the four divergences."""
    specs = []
    for m in Method:
        if m is Method.FLAT:
            specs.extend(LossSpec(m, divergence=k, beta=beta) for k in DivergenceKind)
        else:
            specs.append(LossSpec(m, beta=beta, gamma=gamma))
    return specs


def spec_name(spec: LossSpec) -> str:
    if spec.method is Method.FLAT:
        return f"flat[{spec.divergence.value}]"
    return spec.method.value


def run_suite(precision="double", coords_per_tensor=24, seed=0, h=None):
    theta, ref, forget, retain, pool = toy_problem(precision, seed)
    h = h if h is not None else 1e-5
    results = []
    for spec in all_specs():
        def fn(bp, spec=spec):
            return compute_loss(spec, bp, forget, retain, ref, pool, np.random.default_rng(3))
        results.append(check_gradient(theta, fn, h=h, coords_per_tensor=coords_per_tensor,
                                      seed=seed, name=spec_name(spec)))
    return results
