"""Empirical f-divergence estimation with a learned variational function.

A one-hidden-layer tanh network ``v(z)`` is squashed into the conjugate's
domain (``tanh/2`` for TV, ``log 2 - softplus(-v)`` for JS, identity for
Pearson and KL) and trained by full-batch Adam ascent on

    J(g) = mean_{D_e} g(Z) - mean_{D_f} f*(g(Z)),

a lower bound on ``D_f(P_e || P_f)``.  Fitting uses one half of each sample
set and the reported estimate is evaluated on the other half.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .divergence import DivergenceKind, primal_f

LOG2 = math.log(2.0)


class EstimatorError(RuntimeError):
    pass


@dataclass
class SampleSet:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise ValueError("sample set must be a non-empty (N, d) array")
        self.values = v

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-_softplus(-x))


def objective_terms(kind: DivergenceKind, v_e: np.ndarray, v_f: np.ndarray):
    """``J`` and its derivatives w.r.t. the raw network outputs on each set."""
    ne, nf = v_e.size, v_f.size
    if kind is DivergenceKind.TV:
        te, tf = np.tanh(v_e), np.tanh(v_f)
        j = np.mean(0.5 * te) - np.mean(0.5 * tf)
        return j, 0.5 * (1 - te * te) / ne, -0.5 * (1 - tf * tf) / nf
    if kind is DivergenceKind.JS:
        # g = log2 - softplus(-v); f*(g(v)) = softplus(v) - log2
        j = np.mean(LOG2 - _softplus(-v_e)) - np.mean(_softplus(v_f) - LOG2)
        return j, _sigmoid(-v_e) / ne, -_sigmoid(v_f) / nf
    if kind is DivergenceKind.PEARSON:
        j = np.mean(v_e) - np.mean(0.25 * v_f * v_f + v_f)
        return j, np.full_like(v_e, 1.0 / ne), -(0.5 * v_f + 1.0) / nf
    ef = np.exp(v_f - 1.0)
    j = np.mean(v_e) - np.mean(ef)
    return j, np.full_like(v_e, 1.0 / ne), -ef / nf


@dataclass
class VariationalNet:
    kind: DivergenceKind
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    seed: int = 0
    trace: list = field(default_factory=list)

    @classmethod
    def init(cls, kind, dim: int, hidden: int = 16, seed: int = 0) -> "VariationalNet":
        rng = np.random.default_rng(seed)
        return cls(DivergenceKind.parse(kind),
                   rng.normal(0, 1.0 / math.sqrt(dim), size=(dim, hidden)),
                   np.zeros(hidden),
                   rng.normal(0, 1.0 / math.sqrt(hidden), size=hidden),
                   0.0, seed)

    def raw(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z @ self.w1 + self.b1) @ self.w2 + self.b2

    def __call__(self, z) -> np.ndarray:
        """Variational function values, inside the conjugate's domain."""
        v = self.raw(np.asarray(z, dtype=np.float64).reshape(len(z), -1))
        if self.kind is DivergenceKind.TV:
            return 0.5 * np.tanh(v)
        if self.kind is DivergenceKind.JS:
            return LOG2 - _softplus(-v)
        return v

    def _params(self):
        return [self.w1, self.b1, self.w2, np.array([self.b2])]

    def _grads(self, z, dv):
        pre = z @ self.w1 + self.b1
        h = np.tanh(pre)
        gw2 = h.T @ dv
        gb2 = dv.sum()
        dh = np.outer(dv, self.w2) * (1 - h * h)
        return [z.T @ dh, dh.sum(axis=0), gw2, np.array([gb2])]

    def copy(self) -> "VariationalNet":
        return VariationalNet(self.kind, self.w1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2),
                              self.seed, list(self.trace))


@dataclass
class EstimatorResult:
    estimate: float
    n_samples: int
    kind: DivergenceKind
    trace: list


def empirical_objective(net: VariationalNet, d_e: SampleSet, d_f: SampleSet) -> float:
    j, _, _ = objective_terms(net.kind, net.raw(d_e.values), net.raw(d_f.values))
    return float(j)


def fit_g_hat(kind, d_e: SampleSet, d_f: SampleSet, hidden: int = 16, steps: int = 400,
              lr: float = 0.03, seed: int = 0, record_every: int = 10) -> VariationalNet:
    """Adam ascent on the empirical objective; returns the best net seen.

    ``net.trace`` holds ``(step, best objective so far)`` pairs.
    """
    kind = DivergenceKind.parse(kind)
    d_e, d_f = _as_set(d_e), _as_set(d_f)
    if d_e.dim != d_f.dim:
        raise ValueError("sample sets have different dimensions")
    net = VariationalNet.init(kind, d_e.dim, hidden, seed)
    best, best_j = net.copy(), empirical_objective(net, d_e, d_f)
    trace = [(0, best_j)]
    m = [np.zeros_like(p) for p in net._params()]
    s = [np.zeros_like(p) for p in net._params()]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, steps + 1):
        j, dve, dvf = objective_terms(kind, net.raw(d_e.values), net.raw(d_f.values))
        if not np.isfinite(j):
            raise EstimatorError(f"objective diverged at step {t}; trace tail {trace[-3:]}")
        if j > best_j:
            best, best_j = net.copy(), float(j)
        ge = net._grads(d_e.values, dve)
        gf = net._grads(d_f.values, dvf)
        params = net._params()
        for i, (p, g) in enumerate(zip(params, (a + b for a, b in zip(ge, gf)))):
            m[i] = b1 * m[i] + (1 - b1) * g
            s[i] = b2 * s[i] + (1 - b2) * g * g
            step = lr * (m[i] / (1 - b1 ** t)) / (np.sqrt(s[i] / (1 - b2 ** t)) + eps)
            p += step  # ascent
        net.b2 = float(params[3][0])
        if t % record_every == 0 or t == steps:
            trace.append((t, best_j))
    j = empirical_objective(net, d_e, d_f)
    if np.isfinite(j) and j > best_j:
        best, best_j = net.copy(), j
        trace[-1] = (steps, best_j)
    best.trace = trace
    return best


def _as_set(x) -> SampleSet:
    return x if isinstance(x, SampleSet) else SampleSet(x)


def estimate_f_div(kind, d_e, d_f, g_hat: VariationalNet) -> EstimatorResult:
    """Plug ``g_hat`` into the empirical objective on the given samples."""
    d_e, d_f = _as_set(d_e), _as_set(d_f)
    kind = DivergenceKind.parse(kind)
    if kind is not g_hat.kind:
        raise ValueError("network was fitted for a different divergence")
    return EstimatorResult(empirical_objective(g_hat, d_e, d_f), len(d_e) + len(d_f), kind, list(g_hat.trace))


def split_half(s: SampleSet, seed: int):
    perm = np.random.default_rng(seed).permutation(len(s))
    half = len(s) // 2
    return SampleSet(s.values[perm[:half]]), SampleSet(s.values[perm[half:]])


def estimate_divergence(kind, d_e, d_f, seed: int = 0, **fit_kw) -> EstimatorResult:
    """Fit on one half of each set, estimate on the other half."""
    d_e, d_f = _as_set(d_e), _as_set(d_f)
    if len(d_e) < 2 or len(d_f) < 2:
        raise ValueError("need at least two samples per set to split")
    tr_e, te_e = split_half(d_e, seed)
    tr_f, te_f = split_half(d_f, seed + 1)
    net = fit_g_hat(kind, tr_e, tr_f, seed=seed, **fit_kw)
    return estimate_f_div(kind, te_e, te_f, net)


# ---------------------------------------------------------------------------
# ground truth for simple distribution pairs


@dataclass(frozen=True)
class Bernoulli:
    p: float

    def sample(self, n, rng) -> np.ndarray:
        return (rng.random(n) < self.p).astype(np.float64)[:, None]


@dataclass(frozen=True)
class Gaussian:
    mean: float

    def sample(self, n, rng) -> np.ndarray:
        return rng.normal(self.mean, 1.0, size=(n, 1))


def true_f_div_oracle(kind, spec_e, spec_f) -> float:
    """``D_f(P_e || P_f) = E_{P_f}[f(p_e / p_f)]`` for Bernoulli or unit-variance Gaussian pairs."""
    kind = DivergenceKind.parse(kind)
    if type(spec_e) is not type(spec_f):
        raise ValueError("both specs must be of the same family")
    if isinstance(spec_e, Bernoulli):
        if not (0 < spec_e.p < 1 and 0 < spec_f.p < 1):
            raise ValueError("Bernoulli parameters must lie strictly inside (0, 1)")
        return float(sum(q * primal_f(kind, p / q) for p, q in
                         ((spec_e.p, spec_f.p), (1 - spec_e.p, 1 - spec_f.p))))
    delta = abs(spec_e.mean - spec_f.mean)
    if delta == 0:
        return 0.0
    if kind is DivergenceKind.KL:
        return delta * delta / 2
    if kind is DivergenceKind.PEARSON:
        return math.expm1(delta * delta)
    if kind is DivergenceKind.TV:
        return 2 * stats.norm.cdf(delta / 2) - 1
    # JS has no closed form for Gaussians
    def integrand(x):
        q = stats.norm.pdf(x, spec_f.mean)
        p = stats.norm.pdf(x, spec_e.mean)
        if q == 0 or p == 0:
            return 0.0
        return q * primal_f(kind, p / q)
    lo = min(spec_e.mean, spec_f.mean) - 12
    hi = max(spec_e.mean, spec_f.mean) + 12
    return float(integrate.quad(integrand, lo, hi, limit=200)[0])


def convergence_experiment(kind, spec_e, spec_f, n_grid=(200, 2000, 20000), repeats=5, seed=0, **fit_kw):
    """Rows of ``(N, seed, estimate, oracle, abs_error)`` over the sample-size grid."""
    kind = DivergenceKind.parse(kind)
    oracle = true_f_div_oracle(kind, spec_e, spec_f)
    rows = []
    for n in n_grid:
        for r in range(repeats):
            s = seed + r
            rng = np.random.default_rng([s, n])
            d_e = SampleSet(spec_e.sample(n, rng))
            d_f = SampleSet(spec_f.sample(n, rng))
            est = estimate_divergence(kind, d_e, d_f, seed=s, **fit_kw).estimate
            rows.append((n, s, est, oracle, abs(est - oracle)))
    return rows


def mean_abs_error(rows) -> dict:
    out = {}
    for n, _, _, _, err in rows:
        out.setdefault(n, []).append(err)
    return {n: float(np.mean(v)) for n, v in out.items()}


def write_convergence_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "seed", "estimate", "oracle", "abs_error"])
        for n, s, est, orc, err in rows:
            w.writerow([n, s, repr(float(est)), repr(float(orc)), repr(float(err))])
