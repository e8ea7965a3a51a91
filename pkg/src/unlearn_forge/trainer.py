"""Experiment orchestration: original / retained training, unlearning runs,
post-hoc baselines (task vectors, WHP) and metric reports."""
from __future__ import annotations

import dataclasses
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .data import UnlearnCorpus, corpus_from_records, load_corpus, synthetic_corpus
from .losses import (
    NEEDS_REFERENCE,
    NEEDS_RETAIN,
    LossSpec,
    Method,
    ReferenceModel,
    build_random_responses,
    compute_loss,
    loss_finetune,
)
from .model import (
    AdamWState,
    CheckpointShapeError,
    ModelConfig,
    ModelParams,
    adamw_step,
    forward,
    init_params,
    save_checkpoint,
    value_and_grad,
)

log = logging.getLogger(__name__)

GA_GUARD = 1e4
POST_HOC = {"task_vector"}


class DivergenceGuardError(FloatingPointError):
    """Unlearning loss left the sane range (gradient ascent runaway)."""


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: str = "synthetic"
    method: str = "flat"
    divergence: str | None = "kl"
    beta: float = 0.1
    gamma: float = 0.0
    lambda_e: float = 1.0
    lambda_f: float = 1.0
    epochs: int = 3
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.0
    train_epochs: int = 120
    train_lr: float = 3e-3
    reinforce_epochs: int = 10
    pool_size: int = 16
    seed: int = 0
    precision: str = "single"
    eval_generation: bool = True
    eval_truth: bool = True
    eval_mia: bool = True
    k_percent: float = 20.0
    verbmem_prefix: int = 16

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.epochs < 1 or self.train_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.lr > 0 and self.train_lr > 0):
            raise ValueError("learning rates must be > 0")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        if self.method not in POST_HOC:
            self.loss_spec()  # validates method / divergence / beta / gamma

    def loss_spec(self) -> LossSpec:
        m = Method.parse(self.method)
        return LossSpec(m, divergence=self.divergence if m is Method.FLAT else None, beta=self.beta,
                        gamma=self.gamma, lambda_e=self.lambda_e, lambda_f=self.lambda_f)

    @property
    def label(self) -> tuple[str, str]:
        if self.method in POST_HOC:
            return self.method, ""
        spec = self.loss_spec()
        return spec.method.value, spec.divergence.value if spec.divergence else ""

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def resolve_corpus(config: ExperimentConfig) -> UnlearnCorpus:
    """The synthetic corpus is generated in memory; anything else is a prepared data directory."""
    if config.corpus == "synthetic":
        return corpus_from_records(synthetic_corpus(seed=config.seed), seed=config.seed)
    return load_corpus(config.corpus, seed=config.seed)


def _batches(items, batch_size, rng):
    order = rng.permutation(len(items))
    return [[items[i] for i in order[s:s + batch_size]] for s in range(0, len(items), batch_size)]


def _fit(params, examples, epochs, lr, batch_size, seed, weight_decay=0.0, ckpt_dir=None, tag="model"):
    rng = np.random.default_rng(seed)
    state = AdamWState.zeros_like(params)
    for epoch in range(epochs):
        for batch in _batches(examples, batch_size, rng):
            _, grads = value_and_grad(params, lambda bp: loss_finetune(bp, batch))
            params, state = adamw_step(params, grads, state, lr, weight_decay=weight_decay)
        if ckpt_dir is not None:
            save_checkpoint(params, Path(ckpt_dir) / f"{tag}-epoch{epoch + 1:03d}.ckpt")
    return params


def _as_retain(forget):
    from .losses import RetainExample

    return [RetainExample(ex.x_f, ex.y_f) for ex in forget]


def train_original(config: ExperimentConfig, corpus: UnlearnCorpus, ckpt_dir=None) -> ModelParams:
    """Next-token training on forget plus retain pairs."""
    params = init_params(config.model, config.precision)
    data = _as_retain(corpus.forget) + list(corpus.retain)
    return _fit(params, data, config.train_epochs, config.train_lr, config.batch_size, config.seed,
                config.weight_decay, ckpt_dir, "original")


def train_retained(config: ExperimentConfig, corpus: UnlearnCorpus, ckpt_dir=None) -> ModelParams:
    """Same schedule on the retain split only (gold comparator)."""
    params = init_params(config.model, config.precision)
    return _fit(params, list(corpus.retain), config.train_epochs, config.train_lr, config.batch_size,
                config.seed, config.weight_decay, ckpt_dir, "retained")


def train_reinforced(theta_o: ModelParams, forget, epochs: int, lr: float, batch_size: int = 8,
                     seed: int = 0) -> ModelParams:
    """Keep training the original model on forget data only (over-fit on purpose)."""
    return _fit(theta_o.copy(), _as_retain(forget), epochs, lr, batch_size, seed)


def unlearn(theta_o: ModelParams, config: ExperimentConfig, corpus: UnlearnCorpus, history=None) -> ModelParams:
    """Run ``config.epochs`` of the selected unlearning loss starting from ``theta_o``."""
    spec = config.loss_spec()
    params = theta_o.copy()
    ref = ReferenceModel(theta_o) if spec.method in NEEDS_REFERENCE else None
    pool = build_random_responses(corpus.retain, config.pool_size, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    sample_rng = np.random.default_rng(config.seed + 2)
    state = AdamWState.zeros_like(params)
    retain = list(corpus.retain)
    retain_cursor = 0
    for epoch in range(config.epochs):
        for batch in _batches(list(corpus.forget), config.batch_size, rng):
            rbatch = []
            if spec.method in NEEDS_RETAIN:
                for _ in range(len(batch)):
                    rbatch.append(retain[retain_cursor % len(retain)])
                    retain_cursor += 1
            seed = int(sample_rng.integers(0, 2**31))

            def fn(bp):
                return compute_loss(spec, bp, batch, rbatch, ref, pool, np.random.default_rng(seed))

            value, grads = value_and_grad(params, fn)
            if not np.isfinite(value) or abs(value) > GA_GUARD:
                raise DivergenceGuardError(f"{spec.method.value}: loss {value:.4g} at epoch {epoch + 1}")
            if history is not None:
                history.append(value)
            params, state = adamw_step(params, grads, state, config.lr, weight_decay=config.weight_decay)
    return params


def task_vector_unlearn(theta_o: ModelParams, theta_reinforced: ModelParams) -> ModelParams:
    """``theta_o - (theta_reinforced - theta_o)``."""
    if theta_o.config.param_shapes() != theta_reinforced.config.param_shapes():
        raise CheckpointShapeError("task vector needs models of identical architecture")
    tensors = OrderedDict((k, (2 * v - theta_reinforced[k]).astype(theta_o.dtype))
                          for k, v in theta_o.tensors.items())
    return ModelParams(theta_o.config, tensors, theta_o.precision)


def whp_next_token(theta_o, theta_reinforced, prompt, alpha: float) -> np.ndarray:
    """Per-position WHP distributions ``p_o - alpha (p_reinf - p_o)``, clamped at 0 and renormalised.

    Returns one row per token of ``prompt`` (same convention as ``forward``);
    pass ``prompt + [any]`` to obtain the distribution after the full prompt.
    """
    p_o = forward(theta_o, prompt).astype(np.float64)
    p_r = forward(theta_reinforced, prompt).astype(np.float64)
    mixed = np.clip(p_o - alpha * (p_r - p_o), 0.0, None)
    z = mixed.sum(axis=-1, keepdims=True)
    # fall back to the original model where clamping removed all mass
    mixed = np.where(z > 0, mixed / np.where(z > 0, z, 1.0), p_o)
    return mixed


# ---------------------------------------------------------------------------
# evaluation


def evaluate(theta, corpus: UnlearnCorpus, config: ExperimentConfig, theta_retained=None, retained_cache=None):
    """Metric dict for one model; comparisons against ``theta_retained`` where given."""
    rep = M.MetricsReport()
    forget_pairs = [(ex.x_f, ex.y_f) for ex in corpus.forget]
    if config.eval_generation:
        gens = {}
        for metric in ("rouge_recall", "bleu"):
            gens[metric] = float(np.mean(M.completion_scores(theta, forget_pairs, metric)))
        rep.rouge_l, rep.bleu = gens["rouge_recall"], gens["bleu"]
        seqs = [list(ex.x_f) + list(ex.y_f[:-1] if ex.y_f[-1] == 258 else ex.y_f) for ex in corpus.forget]
        rep.verbmem = M.verbmem(theta, seqs, config.verbmem_prefix)
        rep.knowmem_forget = M.knowmem(theta, forget_pairs)
        rep.knowmem_retain = M.knowmem(theta, [(ex.x_r, ex.y_r) for ex in corpus.retain])
        if retained_cache is not None:
            rep.fq_gap = M.fq_gap(rep.bleu, retained_cache["bleu"], rep.rouge_l, retained_cache["rouge_l"])
    rep.ppl = M.perplexity(theta, corpus.retain)
    rep.extra["forget_avg_prob"] = float(np.mean([
        np.exp(M.token_logprobs(theta, x, y)).mean() for x, y in forget_pairs]))
    if config.eval_truth and corpus.retain_truth:
        rl = float(np.mean(M.completion_scores(theta, [(ex.x_r, ex.y_r) for ex in corpus.retain], "rouge_recall")))
        prob = float(np.mean([M.normalized_cond_prob(theta, r.question, r.answer) for r in corpus.retain_truth]))
        tr = float(np.mean([max(0.0, 1.0 - t) for t in M.truth_ratios(theta, corpus.retain_truth)]))
        rep.extra.update(retain_rouge_l=rl, retain_prob=prob, retain_truth_score=tr)
        if min(rl, prob, tr) > 0:
            rep.model_utility = M.model_utility([rl, prob, tr])
    if config.eval_truth and corpus.forget_truth and theta_retained is not None:
        rep.forget_quality_p = M.forget_quality(theta, theta_retained, corpus.forget_truth)
    if config.eval_mia and corpus.holdout:
        auc = M.mia_auc(theta, forget_pairs, [(ex.x_r, ex.y_r) for ex in corpus.holdout], config.k_percent)
        rep.extra["mia_auc"] = auc
        if retained_cache is not None and "mia_auc" in retained_cache:
            rep.privleak = M.privleak(auc, retained_cache["mia_auc"])
    return rep


def _cache(rep: M.MetricsReport) -> dict:
    d = {"bleu": rep.bleu, "rouge_l": rep.rouge_l}
    d.update(rep.extra)
    return d


def run_experiment(config: ExperimentConfig, out_dir=None, corpus: UnlearnCorpus | None = None,
                   theta_o=None, theta_r=None):
    """Full pipeline; writes ``report.csv`` and ``report.md`` into ``out_dir`` if given.

    Returns ``(report_for_unlearned_model, csv_rows)``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        corpus = resolve_corpus(config)
    if theta_o is None:
        theta_o = train_original(config, corpus)
    if theta_r is None:
        theta_r = train_retained(config, corpus)
    if config.method == "task_vector":
        reinf = train_reinforced(theta_o, corpus.forget, config.reinforce_epochs, config.lr,
                                 config.batch_size, config.seed)
        theta_u = task_vector_unlearn(theta_o, reinf)
    else:
        theta_u = unlearn(theta_o, config, corpus)

    rep_r = evaluate(theta_r, corpus, config)
    rep_r.fq_gap = 0.0 if rep_r.bleu is not None else None
    cache = _cache(rep_r)
    rep_o = evaluate(theta_o, corpus, config, theta_r, cache)
    rep_u = evaluate(theta_u, corpus, config, theta_r, cache)
    method, div = config.label
    rows = (M.report_rows("original", "", rep_o) + M.report_rows("retained", "", rep_r)
            + M.report_rows(method, div, rep_u))
    if out is not None:
        M.write_csv(rows, out / "report.csv")
        (out / "report.md").write_text(M.markdown_table(rows), encoding="utf-8")
        save_checkpoint(theta_u, out / "unlearned.ckpt")
    return rep_u, rows
