"""Unlearning objectives: the f-divergence adjustment and its baselines.

Every loss takes the current parameters (``ModelParams`` for a plain float,
or ``BoundParams`` from :func:`unlearn_forge.model.watch` for a
differentiable ``Var``) and batches of :class:`ForgetExample` /
:class:`RetainExample`.  All batch reductions are arithmetic means, so
magnitudes are comparable across batch sizes.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Var
from .divergence import DivergenceKind, f_star, flat_terms, g_star
from .model import (
    BoundParams,
    ContractError,
    ModelParams,
    _bind,
    _finish,
    batch_avg_correct_prob,
    batch_sequence_log_prob,
    forward_logprobs,
    pack_pairs,
)


class Method(enum.Enum):
    FINETUNE = "finetune"
    GA = "ga"
    GD = "gd"
    KL_MIN = "kl_min"
    PO = "po"
    MISMATCH = "mismatch"
    LLMU = "llmu"
    DPO = "dpo"
    DPO_NO_MREF = "dpo_no_mref"
    SIMPO = "simpo"
    NPO = "npo"
    NPO_KL = "npo_kl"
    NPO_RT = "npo_rt"
    FLAT = "flat"

    @classmethod
    def parse(cls, name) -> "Method":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        key = {"kl": "kl_min", "fine_tune": "finetune", "dpo_wo_mref": "dpo_no_mref"}.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown unlearning method {name!r}") from None


NEEDS_REFERENCE = {Method.KL_MIN, Method.LLMU, Method.DPO, Method.NPO, Method.NPO_KL, Method.NPO_RT}
NEEDS_TEMPLATE = {Method.DPO, Method.DPO_NO_MREF, Method.SIMPO, Method.FLAT}
NEEDS_RETAIN = {Method.FINETUNE, Method.GD, Method.KL_MIN, Method.PO, Method.MISMATCH,
                Method.LLMU, Method.NPO_KL, Method.NPO_RT}


@dataclass(frozen=True)
class ForgetExample:
    x_f: tuple
    y_f: tuple
    y_e: tuple | None = None
    y_idk: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "x_f", tuple(self.x_f))
        object.__setattr__(self, "y_f", tuple(self.y_f))
        if not self.y_f:
            raise ContractError("forget response y_f must be non-empty")
        for name in ("y_e", "y_idk"):
            val = getattr(self, name)
            if val is not None:
                val = tuple(val)
                if not val:
                    raise ContractError(f"{name} must be non-empty when given")
                object.__setattr__(self, name, val)


@dataclass(frozen=True)
class RetainExample:
    x_r: tuple
    y_r: tuple

    def __post_init__(self):
        object.__setattr__(self, "x_r", tuple(self.x_r))
        object.__setattr__(self, "y_r", tuple(self.y_r))
        if not self.y_r:
            raise ContractError("retain response y_r must be non-empty")


@dataclass(frozen=True)
class LossSpec:
    method: Method
    divergence: DivergenceKind | None = None
    beta: float = 0.1
    gamma: float = 0.0
    lambda_e: float = 1.0
    lambda_f: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        if self.divergence is not None:
            object.__setattr__(self, "divergence", DivergenceKind.parse(self.divergence))
        if self.method is Method.FLAT and self.divergence is None:
            raise ValueError("FLAT needs a divergence kind")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


class ReferenceModel:
    """Frozen snapshot of the pre-unlearning parameters.

    The arrays are copied and marked read-only, so accidental in-place
    updates raise instead of silently moving the reference.
    """

    def __init__(self, params: ModelParams):
        self.params = params.copy()
        for t in self.params.tensors.values():
            t.flags.writeable = False

    def digest(self) -> bytes:
        return self.params.to_bytes()


# ---------------------------------------------------------------------------
# building blocks


def _forget_pairs(forget, field="y_f"):
    forget = list(forget)
    if not forget:
        raise ContractError("empty forget batch")
    pairs = []
    for ex in forget:
        y = getattr(ex, field)
        if y is None:
            raise ContractError(f"forget example lacks {field}")
        pairs.append((ex.x_f, y))
    return pairs


def _retain_pairs(retain):
    retain = list(retain)
    if not retain:
        raise ContractError("empty retain batch")
    return [(ex.x_r, ex.y_r) for ex in retain]


def _seq_logprob(bp: BoundParams, pairs) -> Var:
    return batch_sequence_log_prob(bp, pack_pairs(pairs, bp.config.context_len))


def _ce_mean(bp: BoundParams, pairs) -> Var:
    return -_seq_logprob(bp, pairs).mean()


def _ref_seq_logprob(ref: ReferenceModel, pairs) -> np.ndarray:
    bp = _bind(ref.params)
    return _seq_logprob(bp, pairs).data


def _require_ref(ref):
    if ref is None:
        raise ContractError("this loss needs a reference model")
    return ref


def _neg_log_sigmoid_mean(z: Var, beta: float) -> Var:
    """``-(2/beta) * mean log sigmoid(z)``."""
    return -(2.0 / beta) * z.log_sigmoid().mean()


def kl_retain_term(bp: BoundParams, ref: ReferenceModel, retain) -> Var:
    """Mean over retain pairs of the per-position KL(ref || theta), full vocabulary."""
    pairs = _retain_pairs(retain)
    batch = pack_pairs(pairs, bp.config.context_len)
    ref_lp = forward_logprobs(_bind(ref.params), batch.inputs).data.astype(np.float64)
    lp = forward_logprobs(bp, batch.inputs)
    p_ref = np.exp(ref_lp)
    w = (batch.mask / batch.resp_len[:, None])[..., None]
    ent = float(np.sum(w * p_ref * ref_lp))
    cross = (lp * (w * p_ref).astype(lp.data.dtype)).sum()
    return (ent - cross) * (1.0 / len(pairs))


def _flat_node(pe: Var, pf: Var, kind: DivergenceKind, lambda_e: float, lambda_f: float) -> Var:
    """Elementwise ``lambda_f * f*(g*(pf)) - lambda_e * g*(pe)``, gradients from closed forms."""
    pe64 = np.clip(pe.data.astype(np.float64), 0.0, 1.0)
    pf64 = np.clip(pf.data.astype(np.float64), 0.0, 1.0)
    _, de, df = flat_terms(kind, pe64, pf64)
    term_f = np.asarray(f_star(kind, g_star(kind, pf64)))
    term_e = -np.asarray(g_star(kind, pe64))
    out = (lambda_f * term_f + lambda_e * term_e).astype(pe.data.dtype)
    de = (lambda_e * de).astype(pe.data.dtype)
    df = (lambda_f * df).astype(pe.data.dtype)
    return pe._new(out, (pe, pf), lambda g: (g * de, g * df))


# ---------------------------------------------------------------------------
# losses


def loss_finetune(theta, retain):
    bp = _bind(theta)
    return _finish(theta, _ce_mean(bp, _retain_pairs(retain)))


def loss_ga(theta, forget):
    bp = _bind(theta)
    return _finish(theta, -_ce_mean(bp, _forget_pairs(forget)))


def loss_gd(theta, forget, retain):
    bp = _bind(theta)
    return _finish(theta, _ce_mean(bp, _retain_pairs(retain)) - _ce_mean(bp, _forget_pairs(forget)))


def loss_kl_min(theta, ref, forget, retain):
    bp = _bind(theta)
    ref = _require_ref(ref)
    return _finish(theta, -_ce_mean(bp, _forget_pairs(forget)) + kl_retain_term(bp, ref, retain))


def loss_po(theta, forget, retain):
    """Fine-tune on retain plus cross-entropy towards the refusal answer.

    Uses ``y_idk`` when present, otherwise the template ``y_e``.
    """
    bp = _bind(theta)
    pairs = []
    for ex in forget:
        y = ex.y_idk if ex.y_idk is not None else ex.y_e
        if y is None:
            raise ContractError("PO needs y_idk or y_e on every forget example")
        pairs.append((ex.x_f, y))
    if not pairs:
        raise ContractError("empty forget batch")
    return _finish(theta, _ce_mean(bp, _retain_pairs(retain)) + _ce_mean(bp, pairs))


def sample_random_targets(forget, pool, rng: np.random.Generator):
    """One response from ``pool`` per forget prompt."""
    forget = list(forget)
    if not pool:
        return []
    idx = rng.integers(0, len(pool), size=len(forget))
    return [(ex.x_f, tuple(pool[i])) for ex, i in zip(forget, idx)]


def loss_mismatch(theta, forget, retain, pool, rng=None):
    bp = _bind(theta)
    if not pool:
        raise ContractError("Mismatch needs a non-empty random response pool")
    rng = rng if rng is not None else np.random.default_rng(0)
    pairs = sample_random_targets(_forget_only(forget), pool, rng)
    return _finish(theta, _ce_mean(bp, _retain_pairs(retain)) + _ce_mean(bp, pairs))


def _forget_only(forget):
    forget = list(forget)
    if not forget:
        raise ContractError("empty forget batch")
    return forget


def loss_llmu(theta, ref, forget, retain, pool, rng=None):
    """GA term + random-completion term + retain KL, unit weights."""
    bp = _bind(theta)
    ref = _require_ref(ref)
    forget = _forget_only(forget)
    loss = -_ce_mean(bp, _forget_pairs(forget)) + kl_retain_term(bp, ref, retain)
    if pool:
        rng = rng if rng is not None else np.random.default_rng(0)
        loss = loss + _ce_mean(bp, sample_random_targets(forget, pool, rng))
    return _finish(theta, loss)


def _pref_margin(bp, forget, length_normalized=False):
    good = _forget_pairs(forget, "y_e")
    bad = _forget_pairs(forget, "y_f")
    lp_good = _seq_logprob(bp, good)
    lp_bad = _seq_logprob(bp, bad)
    if length_normalized:
        n_good = np.array([len(y) for _, y in good], dtype=lp_good.data.dtype)
        n_bad = np.array([len(y) for _, y in bad], dtype=lp_bad.data.dtype)
        return lp_good / n_good - lp_bad / n_bad, good, bad
    return lp_good - lp_bad, good, bad


def loss_dpo(theta, ref, forget, beta=0.1):
    bp = _bind(theta)
    ref = _require_ref(ref)
    margin, good, bad = _pref_margin(bp, forget)
    m_ref = beta * (_ref_seq_logprob(ref, good) - _ref_seq_logprob(ref, bad))
    z = margin * beta - m_ref.astype(margin.data.dtype)
    return _finish(theta, _neg_log_sigmoid_mean(z, beta))


def loss_dpo_no_mref(theta, forget, beta=0.1):
    bp = _bind(theta)
    margin, _, _ = _pref_margin(bp, forget)
    return _finish(theta, _neg_log_sigmoid_mean(margin * beta, beta))


def loss_simpo(theta, forget, beta=0.1, gamma=0.0):
    bp = _bind(theta)
    margin, _, _ = _pref_margin(bp, forget, length_normalized=True)
    return _finish(theta, _neg_log_sigmoid_mean(margin * beta - gamma, beta))


def _npo(bp, ref, forget, beta):
    pairs = _forget_pairs(forget)
    ratio = _seq_logprob(bp, pairs) - _ref_seq_logprob(ref, pairs)
    return _neg_log_sigmoid_mean(ratio * (-beta), beta)


def loss_npo(theta, ref, forget, beta=0.1):
    bp = _bind(theta)
    return _finish(theta, _npo(bp, _require_ref(ref), forget, beta))


def loss_npo_kl(theta, ref, forget, retain, beta=0.1):
    bp = _bind(theta)
    ref = _require_ref(ref)
    return _finish(theta, _npo(bp, ref, forget, beta) + kl_retain_term(bp, ref, retain))


def loss_npo_rt(theta, ref, forget, retain, beta=0.1):
    bp = _bind(theta)
    ref = _require_ref(ref)
    return _finish(theta, _npo(bp, ref, forget, beta) + _ce_mean(bp, _retain_pairs(retain)))


def loss_flat(theta, forget, kind, lambda_e=1.0, lambda_f=1.0):
    """Mean of ``f*(g*(P_f)) - g*(P_e)`` over the forget batch.

    ``P_e`` / ``P_f`` are average correct-token probabilities of the template
    and forget responses.
    """
    bp = _bind(theta)
    kind = DivergenceKind.parse(kind)
    good = _forget_pairs(forget, "y_e")
    bad = _forget_pairs(forget, "y_f")
    cl = bp.config.context_len
    pe = batch_avg_correct_prob(bp, pack_pairs(good, cl))
    pf = batch_avg_correct_prob(bp, pack_pairs(bad, cl))
    return _finish(theta, _flat_node(pe, pf, kind, lambda_e, lambda_f).mean())


def build_random_responses(retain: Sequence[RetainExample], pool_size: int, seed: int) -> list[tuple]:
    """Pool of retain responses drawn under ``seed`` (without replacement when possible)."""
    retain = list(retain)
    if pool_size <= 0:
        return []
    if not retain:
        raise ContractError("cannot draw random responses from an empty retain corpus")
    rng = np.random.default_rng(seed)
    replace = pool_size > len(retain)
    idx = rng.choice(len(retain), size=pool_size, replace=replace)
    return [tuple(retain[i].y_r) for i in idx]


def compute_loss(spec: LossSpec, theta, forget=(), retain=(), ref=None, pool=(), rng=None):
    """Dispatch to the loss selected by ``spec``."""
    m = spec.method
    if m in NEEDS_REFERENCE:
        _require_ref(ref)
    if m is Method.FINETUNE:
        return loss_finetune(theta, retain)
    if m is Method.GA:
        return loss_ga(theta, forget)
    if m is Method.GD:
        return loss_gd(theta, forget, retain)
    if m is Method.KL_MIN:
        return loss_kl_min(theta, ref, forget, retain)
    if m is Method.PO:
        return loss_po(theta, forget, retain)
    if m is Method.MISMATCH:
        return loss_mismatch(theta, forget, retain, pool, rng)
    if m is Method.LLMU:
        return loss_llmu(theta, ref, forget, retain, pool, rng)
    if m is Method.DPO:
        return loss_dpo(theta, ref, forget, spec.beta)
    if m is Method.DPO_NO_MREF:
        return loss_dpo_no_mref(theta, forget, spec.beta)
    if m is Method.SIMPO:
        return loss_simpo(theta, forget, spec.beta, spec.gamma)
    if m is Method.NPO:
        return loss_npo(theta, ref, forget, spec.beta)
    if m is Method.NPO_KL:
        return loss_npo_kl(theta, ref, forget, retain, spec.beta)
    if m is Method.NPO_RT:
        return loss_npo_rt(theta, ref, forget, retain, spec.beta)
    return loss_flat(theta, forget, spec.divergence, spec.lambda_e, spec.lambda_f)
