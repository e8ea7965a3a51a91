"""Corpus ingestion, splits, templates and the built-in synthetic corpus."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import ForgetExample, RetainExample
from .model import EOS, Vocabulary

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class JsonlError(DataError):
    pass


class SchemaError(DataError):
    pass


class SplitOverlapError(DataError):
    pass


QA_SCHEMA = {"required": {"prompt": str, "response": str}, "optional": {"template": str}}
TRUTH_RATIO_SCHEMA = {
    "required": {"question": str, "answer": str, "paraphrase": str, "perturbed": list},
    "optional": {},
}

DEFAULT_IDK_POOL = [
    "I don't know.",
    "I have no idea.",
    "I'm not sure.",
    "I can't say.",
    "No idea, sorry.",
    "That is unknown to me.",
    "I cannot answer that.",
    "I don't have that information.",
    "I am not aware of that.",
    "Not something I know.",
    "I have no information on that.",
    "I can't recall.",
    "Sorry, I don't know.",
    "I lack that knowledge.",
    "That's beyond my knowledge.",
    "I'm unable to answer.",
    "I really don't know.",
    "No clue.",
    "I couldn't tell you.",
    "Unknown.",
]


@dataclass(frozen=True)
class PerturbedAnswerSet:
    question: tuple
    answer: tuple
    paraphrase: tuple
    perturbed: tuple

    def __post_init__(self):
        object.__setattr__(self, "perturbed", tuple(tuple(p) for p in self.perturbed))
        for name in ("question", "answer", "paraphrase"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.perturbed:
            raise DataError("perturbed answer list must be non-empty")
        if not self.answer or not self.paraphrase or any(not p for p in self.perturbed):
            raise DataError("answers must be non-empty")


@dataclass
class UnlearnCorpus:
    forget: list
    retain: list
    holdout: list = field(default_factory=list)
    idk_pool: list = field(default_factory=list)
    forget_truth: list = field(default_factory=list)
    retain_truth: list = field(default_factory=list)

    def validate(self) -> "UnlearnCorpus":
        fp = {ex.x_f for ex in self.forget}
        rp = {ex.x_r for ex in self.retain}
        hp = {ex.x_r for ex in self.holdout}
        if fp & rp:
            raise SplitOverlapError(f"{len(fp & rp)} prompts appear in both forget and retain splits")
        if hp & (fp | rp):
            raise SplitOverlapError(f"{len(hp & (fp | rp))} holdout prompts overlap the training splits")
        return self


def load_jsonl(path, schema=QA_SCHEMA) -> list[dict]:
    """Parse a JSONL file, checking required/optional field types per line."""
    raw = Path(path).read_bytes()
    records = []
    for lineno, line in enumerate(raw.split(b"\n"), start=1):
        if not line.strip():
            continue
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise JsonlError(f"{path}:{lineno}: invalid UTF-8 ({exc.reason})") from None
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise JsonlError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise JsonlError(f"{path}:{lineno}: expected a JSON object")
        for key, typ in schema["required"].items():
            if key not in rec:
                raise SchemaError(f"{path}:{lineno}: missing required field {key!r}")
            if not isinstance(rec[key], typ):
                raise SchemaError(f"{path}:{lineno}: field {key!r} must be {typ.__name__}")
        for key, typ in schema.get("optional", {}).items():
            if key in rec and not isinstance(rec[key], typ):
                raise SchemaError(f"{path}:{lineno}: field {key!r} must be {typ.__name__}")
        records.append(rec)
    return records


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def chunk_text(text, max_tokens: int) -> list[list[int]]:
    """Split a text (or token list) into consecutive chunks of at most ``max_tokens``."""
    if max_tokens < 1:
        raise DataError("max_tokens must be >= 1")
    toks = Vocabulary.encode(text) if isinstance(text, (str, bytes)) else list(text)
    return [toks[i:i + max_tokens] for i in range(0, len(toks), max_tokens)]


def make_completion_pairs(chunks, prefix_len: int) -> list[ForgetExample]:
    """Prompt = first ``prefix_len`` tokens of each chunk, response = the rest."""
    if prefix_len < 1:
        raise DataError("prefix_len must be >= 1 (empty prompts are not allowed)")
    out, skipped = [], 0
    for chunk in chunks:
        if len(chunk) < prefix_len + 1:
            skipped += 1
            continue
        out.append(ForgetExample(chunk[:prefix_len], chunk[prefix_len:]))
    if skipped:
        log.warning("skipped %d chunk(s) shorter than prefix_len + 1", skipped)
    return out


def attach_templates(forget, idk_pool, seed: int) -> list[ForgetExample]:
    """Give each forget example a template answer drawn from ``idk_pool``."""
    if not idk_pool:
        raise DataError("template pool is empty")
    pool = [tuple(Vocabulary.encode(p)) if isinstance(p, str) else tuple(p) for p in idk_pool]
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(pool), size=len(forget))
    return [ForgetExample(ex.x_f, ex.y_f, y_e=pool[i], y_idk=ex.y_idk) for ex, i in zip(forget, idx)]


def load_idk_pool(path=None) -> list[str]:
    if path is None:
        return list(DEFAULT_IDK_POOL)
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    pool = [ln for ln in lines if ln]
    if not pool:
        raise DataError(f"{path}: template pool is empty")
    return pool


def _enc(s: str, eos: bool) -> tuple:
    t = Vocabulary.encode(s)
    return tuple(t + [EOS]) if eos else tuple(t)


def qa_to_forget(records, eos=True) -> list[ForgetExample]:
    out = []
    for r in records:
        tmpl = r.get("template")
        out.append(ForgetExample(_enc(r["prompt"], False), _enc(r["response"], eos),
                                 y_e=_enc(tmpl, eos) if tmpl else None))
    return out


def qa_to_retain(records, eos=True) -> list[RetainExample]:
    return [RetainExample(_enc(r["prompt"], False), _enc(r["response"], eos)) for r in records]


def truth_records(records) -> list[PerturbedAnswerSet]:
    return [PerturbedAnswerSet(_enc(r["question"], False), _enc(r["answer"], False),
                               _enc(r["paraphrase"], False), [_enc(p, False) for p in r["perturbed"]])
            for r in records]


def load_corpus(directory, idk_pool=None, seed=0) -> UnlearnCorpus:
    """Load ``forget/retain[/holdout][/forget_truth/retain_truth].jsonl`` from a directory.

    Forget records without a ``template`` get one from ``idk_pool``.
    """
    d = Path(directory)
    for name in ("forget.jsonl", "retain.jsonl"):
        if not (d / name).exists():
            raise DataError(f"{d}: missing {name}")
    splits = {"forget": load_jsonl(d / "forget.jsonl"), "retain": load_jsonl(d / "retain.jsonl")}
    if (d / "holdout.jsonl").exists():
        splits["holdout"] = load_jsonl(d / "holdout.jsonl")
    for split in ("forget_truth", "retain_truth"):
        path = d / f"{split}.jsonl"
        if path.exists():
            splits[split] = load_jsonl(path, TRUTH_RATIO_SCHEMA)
    return corpus_from_records(splits, idk_pool, seed)


def corpus_from_records(splits: dict, idk_pool=None, seed=0) -> UnlearnCorpus:
    """Build a corpus from already-parsed split records (same layout as the JSONL files)."""
    forget = qa_to_forget(splits["forget"])
    pool = list(idk_pool) if idk_pool is not None else load_idk_pool()
    if any(ex.y_e is None for ex in forget):
        templated = attach_templates(forget, [_enc(p, True) for p in pool], seed)
        forget = [ex if ex.y_e is not None else t for ex, t in zip(forget, templated)]
    corpus = UnlearnCorpus(
        forget=forget,
        retain=qa_to_retain(splits["retain"]),
        holdout=qa_to_retain(splits.get("holdout", [])),
        idk_pool=[_enc(p, True) for p in pool],
    )
    for split in ("forget_truth", "retain_truth"):
        if splits.get(split):
            setattr(corpus, split, truth_records(splits[split]))
    return corpus.validate()


# ---------------------------------------------------------------------------
# synthetic "author biography" corpus: two grammars with disjoint name,
# place and phrasing inventories

_GRAMMARS = {
    "forget": {
        "syll": ["zor", "vath", "quel", "kry", "mir", "dax", "ulo", "thes", "vin", "rask"],
        "places": ["Kelmira", "Ostrava Vale", "Brunhold", "Tessaly Reach", "Morrowpine",
                   "Qaldun", "Ebbenford", "Vyrne"],
        "genres": ["gothic verse", "sea sagas", "clockwork fables", "ember myths"],
        "marks": ["old mill", "salt gate", "black weir", "copper bridge"],
        "qa": [
            ("Where was {n} born?", "In {p}, by the {m}.", "Born in {p}, near the {m}."),
            ("What does {n} write?", "Mostly {g}, never prose.", "{g}, and never prose."),
        ],
    },
    "retain": {
        "syll": ["ba", "lo", "pen", "sue", "ti", "gra", "hom", "nel", "wy", "cas"],
        "places": ["Amberly", "Lindon Cross", "Harrowgate", "Pell Marsh", "Southwick",
                   "Cranmoor", "Fenlow", "Idris Bay"],
        "genres": ["garden essays", "river ballads", "kitchen memoirs", "hill poems"],
        "marks": ["chapel", "market", "harbour", "orchard"],
        "qa": [
            ("Which town raised {n}?", "{n} grew up in {p}.", "{n} was raised in {p}."),
            ("Name the genre of {n}.", "{n} is known for {g}.", "{g} is what {n} writes."),
        ],
        # questions nobody can answer; teaches the model a refusal register
        "unknowable": ["What did {n} eat today?", "What is the shoe size of {n}?"],
    },
}


def _author_name(rng, syll):
    first = "".join(rng.choice(syll, size=2)).capitalize()
    last = "".join(rng.choice(syll, size=2)).capitalize()
    return f"{first} {last}"


def synthetic_corpus(n_forget=10, n_retain=30, n_holdout=10, seed=0) -> dict[str, list[dict]]:
    """Records for forget/retain/holdout QA and truth-ratio splits.

    Forget and holdout authors come from one grammar, retain authors from
    the other; holdout authors are never trained on.  Retain authors also
    get "unknowable" questions answered with refusal phrases.
    """
    rng = np.random.default_rng(seed)
    used: set[str] = set()

    def authors(gname, n):
        g = _GRAMMARS[gname]
        out = []
        while len(out) < n:
            name = _author_name(rng, g["syll"])
            if name in used:
                continue
            used.add(name)
            out.append((name, str(rng.choice(g["places"])), str(rng.choice(g["genres"])),
                        str(rng.choice(g["marks"]))))
        return out

    def qa(gname, people):
        g = _GRAMMARS[gname]
        recs, truth = [], []
        for name, place, genre, mark in people:
            fill = dict(n=name, p=place, g=genre, m=mark)
            for q, a, para in g["qa"]:
                recs.append({"prompt": "Q: " + q.format(**fill) + "\nA: ",
                             "response": a.format(**fill)})
                key, options = ("p", g["places"]) if "{p}" in a else ("g", g["genres"])
                wrong = [x for x in options if x != fill[key]]
                picks = rng.choice(len(wrong), size=min(3, len(wrong)), replace=False)
                truth.append({
                    "question": "Q: " + q.format(**fill) + "\nA: ",
                    "answer": a.format(**fill),
                    "paraphrase": para.format(**fill),
                    "perturbed": [a.format(**{**fill, key: wrong[i]}) for i in sorted(picks)],
                })
            for q in g.get("unknowable", []):
                recs.append({"prompt": "Q: " + q.format(**fill) + "\nA: ",
                             "response": DEFAULT_IDK_POOL[int(rng.integers(0, len(DEFAULT_IDK_POOL)))]})
        return recs, truth

    forget, forget_truth = qa("forget", authors("forget", n_forget))
    retain, retain_truth = qa("retain", authors("retain", n_retain))
    holdout, _ = qa("forget", authors("forget", n_holdout))
    return {"forget": forget, "retain": retain, "holdout": holdout,
            "forget_truth": forget_truth, "retain_truth": retain_truth}


def write_synthetic(out_dir, seed=0, **sizes) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, recs in synthetic_corpus(seed=seed, **sizes).items():
        write_jsonl(recs, out / f"{split}.jsonl")
    return out


def prepare_raw_corpus(corpus_dir, out_dir, prefix_len, max_tokens, idk_pool, seed) -> Path:
    """Chunk ``forget.txt``/``retain.txt``[/``holdout.txt``] into continuation JSONL splits."""
    src, out = Path(corpus_dir), Path(out_dir)
    missing = [n for n in ("forget.txt", "retain.txt") if not (src / n).exists()]
    if missing:
        raise DataError(f"{src}: missing {', '.join(missing)}")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split in ("forget", "retain", "holdout"):
        path = src / f"{split}.txt"
        if not path.exists():
            continue
        raw = path.read_bytes()
        try:
            raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"{path}: invalid UTF-8 at byte {exc.start}") from None
        pairs = make_completion_pairs(chunk_text(raw, max_tokens), prefix_len)
        recs = []
        for ex in pairs:
            rec = {"prompt": Vocabulary.decode_bytes(ex.x_f).decode("utf-8", "replace"),
                   "response": Vocabulary.decode_bytes(ex.y_f).decode("utf-8", "replace")}
            if split == "forget":
                rec["template"] = idk_pool[int(rng.integers(0, len(idk_pool)))]
            recs.append(rec)
        write_jsonl(recs, out / f"{split}.jsonl")
    return out
