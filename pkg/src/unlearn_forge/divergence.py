"""Closed-form f-divergence pieces used by the loss adjustment.

For each divergence we carry the optimal variational function ``g*``, the
convex conjugate ``f*`` and the generator ``f`` itself (the latter only used
as an oracle in tests).  The per-sample adjustment is

    loss(p_e, p_f) = f*(g*(p_f)) - g*(p_e)

where ``p_e`` / ``p_f`` are average correct-token probabilities of the
template and forget responses.  Everything here runs in float64.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

LOG2 = math.log(2.0)


class DivergenceError(ValueError):
    """Argument outside the domain of a divergence function."""


class DivergenceKind(enum.Enum):
    TV = "tv"
    JS = "js"
    PEARSON = "pearson"
    KL = "kl"

    @classmethod
    def parse(cls, name: "str | DivergenceKind") -> "DivergenceKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {
            "tv": cls.TV, "total_variation": cls.TV, "totalvariation": cls.TV,
            "js": cls.JS, "jensen_shannon": cls.JS, "jensenshannon": cls.JS,
            "pearson": cls.PEARSON, "chi2": cls.PEARSON,
            "kl": cls.KL, "kullback_leibler": cls.KL, "kullbackleibler": cls.KL,
        }
        try:
            return aliases[key]
        except KeyError:
            raise DivergenceError(f"unknown divergence {name!r}") from None


@dataclass(frozen=True)
class AdjustmentValue:
    loss: float
    d_loss_d_pe: float
    d_loss_d_pf: float


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    # branch-free stable logistic
    return np.exp(-_softplus(-x))


def _check_finite(x, what):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"{what} must be finite, got {x!r}")
    return arr


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def g_star(kind, v):
    """Optimal variational function; total on the reals."""
    kind = DivergenceKind.parse(kind)
    v = _check_finite(v, "v")
    if kind is DivergenceKind.TV:
        r = 0.5 * np.tanh(v)
    elif kind is DivergenceKind.JS:
        # log(2 / (1 + e^-v)) without overflow
        r = LOG2 - _softplus(-v)
    else:
        r = v * 1.0
    return _out(r)


def f_star(kind, u):
    """Convex conjugate of the generator, evaluated on its domain."""
    kind = DivergenceKind.parse(kind)
    u = _check_finite(u, "u")
    if kind is DivergenceKind.TV:
        if np.any(np.abs(u) > 0.5):
            raise DivergenceError("total variation conjugate needs -1/2 <= u <= 1/2")
        r = u * 1.0
    elif kind is DivergenceKind.JS:
        if np.any(u >= LOG2):
            raise DivergenceError("Jensen-Shannon conjugate needs u < log 2")
        r = -np.log(2.0 - np.exp(u))
    elif kind is DivergenceKind.PEARSON:
        r = 0.25 * u * u + u
    else:
        r = np.exp(u - 1.0)
    return _out(r)


def primal_f(kind, t):
    """Generator f with f(1) = 0.  Test oracle only."""
    kind = DivergenceKind.parse(kind)
    t = _check_finite(t, "t")
    if np.any(t <= 0):
        raise DivergenceError("generator argument must be > 0")
    if kind is DivergenceKind.TV:
        r = 0.5 * np.abs(t - 1.0)
    elif kind is DivergenceKind.JS:
        r = -(t + 1.0) * np.log((1.0 + t) / 2.0) + t * np.log(t)
    elif kind is DivergenceKind.PEARSON:
        r = (t - 1.0) ** 2
    else:
        r = t * np.log(t)
    return _out(r)


def flat_terms(kind, p_e, p_f):
    """Vectorised adjustment: returns ``(loss, d_loss/d_pe, d_loss/d_pf)`` arrays.

    Works on any broadcastable inputs in [0, 1].
    """
    kind = DivergenceKind.parse(kind)
    p_e = _check_finite(p_e, "p_e")
    p_f = _check_finite(p_f, "p_f")
    if np.any((p_e < 0) | (p_e > 1)) or np.any((p_f < 0) | (p_f > 1)):
        raise DivergenceError("average probabilities must lie in [0, 1]")
    if kind is DivergenceKind.TV:
        te, tf = np.tanh(p_e), np.tanh(p_f)
        loss = 0.5 * tf - 0.5 * te
        de = -0.5 * (1.0 - te * te)
        df = 0.5 * (1.0 - tf * tf)
    elif kind is DivergenceKind.JS:
        # f*(g*(v)) = softplus(v) - log 2 and -g*(v) = softplus(-v) - log 2
        loss = _softplus(p_f) + _softplus(-p_e) - 2.0 * LOG2
        de = -_sigmoid(-p_e)
        df = _sigmoid(p_f)
    elif kind is DivergenceKind.PEARSON:
        loss = 0.25 * p_f * p_f + p_f - p_e
        de = -np.ones_like(p_e)
        df = 0.5 * p_f + 1.0
    else:
        ef = np.exp(p_f - 1.0)
        loss = ef - p_e
        de = -np.ones_like(p_e)
        df = ef
    return loss, np.broadcast_to(de, np.shape(loss)), np.broadcast_to(df, np.shape(loss))


def flat_adjustment(kind, p_e: float, p_f: float) -> AdjustmentValue:
    """Per-sample loss ``f*(g*(p_f)) - g*(p_e)`` with analytic partials."""
    loss, de, df = flat_terms(kind, p_e, p_f)
    return AdjustmentValue(float(loss), float(de), float(df))
