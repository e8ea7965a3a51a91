"""Evaluation metrics: text overlap, probabilities, truth ratio, KS forget
quality, model utility, FQ gap and the memorisation / privacy-leak triplet.

All text metrics operate on byte-token sequences.
"""
from __future__ import annotations

import csv
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import ks_statistic, lcs_length
from .model import EOS, SequenceLengthError, next_token_logprobs, sequence_log_prob, token_logprobs


class MetricError(ValueError):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("UNLEARN_FORGE_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Ordered map, fanned out over ``UNLEARN_FORGE_THREADS`` worker threads."""
    items = list(items)
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# overlap metrics


def rouge_l_recall(reference, candidate) -> float:
    reference = list(reference)
    if not reference:
        raise MetricError("ROUGE-L recall needs a non-empty reference")
    return lcs_length(reference, list(candidate)) / len(reference)


def rouge_l_f1(reference, candidate) -> float:
    reference, candidate = list(reference), list(candidate)
    if not reference or not candidate:
        return 0.0
    lcs = lcs_length(reference, candidate)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(reference, candidate, max_n: int = 4) -> float:
    """Sentence BLEU with brevity penalty; add-one smoothing for n >= 2."""
    reference, candidate = list(reference), list(candidate)
    if not candidate or not reference:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        cand, ref = _ngrams(candidate, n), _ngrams(reference, n)
        match = sum(min(c, ref[g]) for g, c in cand.items())
        total = max(len(candidate) - n + 1, 0)
        if n == 1:
            if match == 0:
                return 0.0
            log_p += math.log(match / total)
        else:
            log_p += math.log((match + 1) / (total + 1))
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / max_n)


# ---------------------------------------------------------------------------
# probability metrics


def _pairs(corpus):
    out = []
    for item in corpus:
        if hasattr(item, "x_r"):
            out.append((item.x_r, item.y_r))
        elif hasattr(item, "x_f"):
            out.append((item.x_f, item.y_f))
        elif isinstance(item, tuple) and len(item) == 2 and not isinstance(item[0], (int, np.integer)):
            out.append(item)
        else:
            out.append(((), tuple(item)))
    return out


def perplexity(theta, corpus) -> float:
    """``exp`` of the mean per-token cross-entropy over all response tokens."""
    pairs = _pairs(corpus)
    if not pairs:
        raise MetricError("perplexity of an empty corpus")
    lps = parallel_map(lambda p: token_logprobs(theta, p[0], p[1]), pairs)
    total = sum(float(lp.sum()) for lp in lps)
    count = sum(len(lp) for lp in lps)
    return math.exp(-total / count)


def normalized_cond_prob(theta, question, answer) -> float:
    """``P(a | q) ** (1/|a|)``."""
    answer = list(answer)
    if not answer:
        raise MetricError("empty answer")
    return math.exp(sequence_log_prob(theta, question, answer) / len(answer))


def answer_ratio(theta, question, answer, perturbed) -> float:
    num = normalized_cond_prob(theta, question, answer)
    den = sum(normalized_cond_prob(theta, question, p) for p in perturbed)
    if den == 0:
        raise MetricError("perturbed answers have zero total probability")
    return num / den


def truth_ratio(theta, question, paraphrase, perturbed) -> float:
    """Geometric mean of perturbed-answer probabilities over the paraphrase probability.

    For the real-author / world-fact subsets pass the original answer as
    ``paraphrase``.
    """
    perturbed = list(perturbed)
    if not perturbed:
        raise MetricError("need at least one perturbed answer")
    logs = [math.log(normalized_cond_prob(theta, question, p)) for p in perturbed]
    den = normalized_cond_prob(theta, question, paraphrase)
    if den == 0:
        raise MetricError("paraphrase has zero probability")
    return math.exp(sum(logs) / len(logs)) / den


def truth_ratios(theta, records, use_original=False) -> list[float]:
    return parallel_map(
        lambda r: truth_ratio(theta, r.question, r.answer if use_original else r.paraphrase, r.perturbed),
        records)


def model_utility(values) -> float:
    """Harmonic mean of the (nine) retain-side metric values."""
    values = [float(v) for v in values]
    if not values:
        raise MetricError("no values")
    if any(v <= 0 for v in values):
        raise MetricError("harmonic mean needs strictly positive inputs")
    return len(values) / sum(1.0 / v for v in values)


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """``P(K > lam)`` for the Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # Jacobi theta form converges fast for small lam
        s = sum(math.exp(-((2 * j - 1) ** 2) * math.pi ** 2 / (8 * lam * lam)) for j in range(1, terms + 1))
        cdf = math.sqrt(2 * math.pi) / lam * s
        return min(1.0, max(0.0, 1.0 - cdf))
    s = sum((-1) ** (j - 1) * math.exp(-2 * j * j * lam * lam) for j in range(1, terms + 1))
    return min(1.0, max(0.0, 2 * s))


def ks_two_sample(sample_a, sample_b) -> tuple[float, float]:
    """Two-sample KS statistic and asymptotic p-value (effective n = n_a n_b / (n_a + n_b))."""
    a = np.asarray(sample_a, dtype=np.float64).reshape(-1)
    b = np.asarray(sample_b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise MetricError("KS test needs two non-empty samples")
    d = ks_statistic(a, b)
    ne = a.size * b.size / (a.size + b.size)
    return d, kolmogorov_sf(math.sqrt(ne) * d)


def forget_quality(theta_unlearned, theta_retained, records) -> float:
    """KS p-value between the two models' truth-ratio distributions on forget records."""
    return ks_two_sample(truth_ratios(theta_unlearned, records), truth_ratios(theta_retained, records))[1]


def fq_gap(bleu_u, bleu_r, rl_u, rl_r) -> float:
    return abs(bleu_u - bleu_r) + abs(rl_u - rl_r)


# ---------------------------------------------------------------------------
# generation-based metrics


def greedy_generate(theta, prompt, max_new_tokens: int, stop_at_eos: bool = True) -> list[int]:
    """Argmax decoding; ties go to the lowest token id.  EOS is not returned."""
    seq = list(prompt)
    out = []
    for _ in range(max_new_tokens):
        try:
            lp = next_token_logprobs(theta, seq)
        except SequenceLengthError:
            break
        tok = int(np.argmax(lp))
        if stop_at_eos and tok == EOS:
            break
        out.append(tok)
        seq.append(tok)
    return out


def _strip_eos(seq):
    seq = list(seq)
    return seq[:-1] if seq and seq[-1] == EOS else seq


def completion_scores(theta, pairs, metric="rouge_recall") -> list[float]:
    """Generate a continuation per ``(prompt, reference)`` and score it."""
    fn = {"rouge_recall": rouge_l_recall, "rouge_f1": rouge_l_f1, "bleu": bleu}[metric]

    def one(pair):
        prompt, ref = pair
        ref = _strip_eos(ref)
        return fn(ref, greedy_generate(theta, prompt, len(ref)))

    return parallel_map(one, list(pairs))


def verbmem(theta, sequences, prefix_len: int) -> float:
    """Mean ROUGE-L F1 of greedy continuations of the first ``prefix_len`` tokens."""
    pairs = [(list(s)[:prefix_len], list(s)[prefix_len:]) for s in sequences if len(s) > prefix_len]
    if not pairs:
        raise MetricError("no sequence longer than the prefix")
    return float(np.mean(completion_scores(theta, pairs, "rouge_f1")))


def knowmem(theta, qa_pairs) -> float:
    pairs = [(list(q), list(a)) for q, a in qa_pairs]
    if not pairs:
        raise MetricError("no QA pairs")
    return float(np.mean(completion_scores(theta, pairs, "rouge_f1")))


def min_k_score(theta, sequence, k_percent: float = 20.0) -> float:
    """Mean of the lowest ``ceil(k% * n)`` token log-probabilities."""
    prompt, resp = _pairs([sequence])[0]
    lps = np.sort(token_logprobs(theta, prompt, resp))
    k = max(1, math.ceil(k_percent / 100.0 * len(lps)))
    return float(lps[:k].mean())


def auc_roc(member_scores, nonmember_scores) -> float:
    """Mann-Whitney AUC: P(member > nonmember) with ties counted one half."""
    m = np.asarray(member_scores, dtype=np.float64).reshape(-1)
    n = np.sort(np.asarray(nonmember_scores, dtype=np.float64).reshape(-1))
    if m.size == 0 or n.size == 0:
        raise MetricError("AUC needs both member and non-member scores")
    less = np.searchsorted(n, m, side="left")
    leq = np.searchsorted(n, m, side="right")
    twice_u = int(np.sum(less) * 2 + np.sum(leq - less))
    return twice_u / (2 * m.size * n.size)


def privleak(auc_unlearn: float, auc_retrain: float) -> float:
    if auc_retrain == 0:
        raise MetricError("retrained-model AUC is zero")
    return (auc_unlearn - auc_retrain) / auc_retrain


def mia_auc(theta, members, nonmembers, k_percent=20.0) -> float:
    """AUC of a Min-K% attack; higher score means 'member'."""
    ms = parallel_map(lambda s: min_k_score(theta, s, k_percent), _pairs(members))
    ns = parallel_map(lambda s: min_k_score(theta, s, k_percent), _pairs(nonmembers))
    return auc_roc(ms, ns)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    bleu: float | None = None
    rouge_l: float | None = None
    fq_gap: float | None = None
    ppl: float | None = None
    forget_quality_p: float | None = None
    model_utility: float | None = None
    verbmem: float | None = None
    knowmem_forget: float | None = None
    knowmem_retain: float | None = None
    privleak: float | None = None
    extra: dict = field(default_factory=dict)

    def items(self):
        d = asdict(self)
        extra = d.pop("extra")
        for k, v in d.items():
            if v is not None:
                yield k, v
        for k in sorted(extra):
            yield k, extra[k]


CSV_HEADER = ["method", "divergence", "metric", "value"]


def report_rows(method: str, divergence: str, report: MetricsReport):
    return [[method, divergence or "", k, repr(float(v))] for k, v in report.items()]


def write_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(rows)


def read_csv(path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise MetricError(f"{path}: not a metrics CSV (header {rows[:1]})")
    return rows[1:]


def markdown_table(rows, digits: int = 4) -> str:
    """Methods as rows, metrics as columns, in first-seen order."""
    methods, metrics, cells = [], [], {}
    for method, div, metric, value in rows:
        label = f"{method} ({div})" if div else method
        if label not in methods:
            methods.append(label)
        if metric not in metrics:
            metrics.append(metric)
        # PrivLeak is tabulated in percent
        cells[label, metric] = float(value) * (100.0 if metric == "privleak" else 1.0)
    lines = ["| Method | " + " | ".join(metrics) + " |",
             "|---|" + "---|" * len(metrics)]
    for m in methods:
        vals = [f"{cells[m, k]:.{digits}f}" if (m, k) in cells else "-" for k in metrics]
        lines.append(f"| {m} | " + " | ".join(vals) + " |")
    return "\n".join(lines) + "\n"
