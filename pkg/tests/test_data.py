import json
import logging

import pytest
from hypothesis import given
from hypothesis import strategies as st

from unlearn_forge.data import (
    DEFAULT_IDK_POOL,
    DataError,
    JsonlError,
    SchemaError,
    SplitOverlapError,
    TRUTH_RATIO_SCHEMA,
    attach_templates,
    chunk_text,
    corpus_from_records,
    load_corpus,
    load_idk_pool,
    load_jsonl,
    make_completion_pairs,
    prepare_raw_corpus,
    synthetic_corpus,
    write_jsonl,
    write_synthetic,
)
from unlearn_forge.model import EOS, Vocabulary


def test_jsonl_errors_cite_line(tmp_path):
    p = tmp_path / "f.jsonl"
    p.write_text('{"prompt": "a", "response": "b"}\n{oops\n')
    with pytest.raises(JsonlError, match=":2:"):
        load_jsonl(p)
    p.write_text('{"prompt": "a", "response": "b"}\n\n{"prompt": "a"}\n')
    with pytest.raises(SchemaError, match=":3:.*response"):
        load_jsonl(p)
    p.write_text('{"prompt": "a", "response": 3}\n')
    with pytest.raises(SchemaError):
        load_jsonl(p)
    p.write_bytes(b'{"prompt": "\xff", "response": "b"}\n')
    with pytest.raises(JsonlError, match="UTF-8"):
        load_jsonl(p)
    p.write_text('[1, 2]\n')
    with pytest.raises(JsonlError):
        load_jsonl(p)


def test_jsonl_round_trip(tmp_path):
    recs = [{"prompt": "é?", "response": "ok", "template": "no idea"}]
    write_jsonl(recs, tmp_path / "f.jsonl")
    assert load_jsonl(tmp_path / "f.jsonl") == recs


@given(st.binary(max_size=300), st.integers(1, 50))
def test_chunks_cover_input(data, n):
    chunks = chunk_text(data, n)
    assert sum(chunks, []) == list(data)
    assert all(1 <= len(c) <= n for c in chunks)


def test_completion_pairs(caplog):
    chunks = [list(range(10)), list(range(3))]
    with caplog.at_level(logging.WARNING):
        pairs = make_completion_pairs(chunks, 4)
    assert len(pairs) == 1 and pairs[0].x_f == (0, 1, 2, 3) and pairs[0].y_f == tuple(range(4, 10))
    assert "skipped 1" in caplog.text
    with pytest.raises(DataError):
        make_completion_pairs(chunks, 0)


def test_templates_are_seeded():
    pairs = make_completion_pairs([list(range(8))] * 5, 3)
    a = attach_templates(pairs, DEFAULT_IDK_POOL, 1)
    assert a == attach_templates(pairs, DEFAULT_IDK_POOL, 1)
    assert all(Vocabulary.decode(ex.y_e) in DEFAULT_IDK_POOL for ex in a)
    with pytest.raises(DataError):
        attach_templates(pairs, [], 1)


def test_idk_pool_file(tmp_path):
    p = tmp_path / "pool.txt"
    p.write_text("nope\n\n  not sure \n")
    assert load_idk_pool(p) == ["nope", "not sure"]
    p.write_text("\n\n")
    with pytest.raises(DataError):
        load_idk_pool(p)


def test_synthetic_corpus_shape():
    splits = synthetic_corpus(seed=0)
    size = sum(len(json.dumps(r)) for recs in splits.values() for r in recs)
    assert size < 2 * 1024 * 1024
    corpus = corpus_from_records(splits, seed=0)
    assert len(corpus.forget) == 20 and len(corpus.holdout) == 20
    assert all(ex.y_e is not None and ex.y_f[-1] == EOS for ex in corpus.forget)
    assert corpus.forget_truth and corpus.retain_truth
    assert synthetic_corpus(seed=0) == splits
    assert synthetic_corpus(seed=1) != splits


def test_synthetic_grammars_are_disjoint():
    splits = synthetic_corpus(seed=0)
    forget_names = {r["prompt"] for r in splits["forget"]}
    retain_text = " ".join(r["prompt"] + r["response"] for r in splits["retain"])
    for prompt in forget_names:
        name = prompt.split("Q: ")[1].split("?")[0].split()[-2:]
        assert " ".join(name) not in retain_text


def test_load_corpus_from_disk_matches_memory(tmp_path):
    write_synthetic(tmp_path, seed=4)
    a = load_corpus(tmp_path, seed=4)
    b = corpus_from_records(synthetic_corpus(seed=4), seed=4)
    assert a.forget == b.forget and a.retain == b.retain and a.forget_truth == b.forget_truth


def test_load_corpus_errors(tmp_path):
    with pytest.raises(DataError, match="forget.jsonl"):
        load_corpus(tmp_path)
    write_jsonl([{"prompt": "same", "response": "x"}], tmp_path / "forget.jsonl")
    write_jsonl([{"prompt": "same", "response": "y"}], tmp_path / "retain.jsonl")
    with pytest.raises(SplitOverlapError):
        load_corpus(tmp_path)


def test_truth_schema(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"question": "q", "answer": "a", "paraphrase": "b", "perturbed": "c"}\n')
    with pytest.raises(SchemaError):
        load_jsonl(p, TRUTH_RATIO_SCHEMA)


def test_prepare_raw_corpus(tmp_path):
    src = tmp_path / "raw"
    src.mkdir()
    (src / "forget.txt").write_text("the quick brown fox jumps over the lazy dog " * 4)
    (src / "retain.txt").write_text("lorem ipsum dolor sit amet consectetur " * 4)
    out = prepare_raw_corpus(src, tmp_path / "out", 8, 32, ["no idea"], 0)
    recs = load_jsonl(out / "forget.jsonl")
    assert all(len(r["prompt"]) == 8 and r["template"] == "no idea" for r in recs)
    corpus = load_corpus(out)
    assert corpus.forget and corpus.retain
    (src / "forget.txt").write_bytes(b"\xff\xfe")
    with pytest.raises(DataError, match="UTF-8"):
        prepare_raw_corpus(src, tmp_path / "out2", 8, 32, ["no idea"], 0)
    (src / "retain.txt").unlink()
    with pytest.raises(DataError, match="retain.txt"):
        prepare_raw_corpus(src, tmp_path / "out3", 8, 32, ["no idea"], 0)
