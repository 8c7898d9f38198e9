import json
import random

import pytest

from rrgen.corpus import (
    CorpusRole,
    DialogueTurn,
    IngestError,
    Language,
    Speaker,
    assemble_input,
    generate_synthetic_corpus,
    ingest_jsonl,
    read_turn_records,
    response_overlap_fraction,
    write_turns_jsonl,
)
from rrgen.neural.tokenizer import TURN_SEP


def turns(*utterances):
    return [
        DialogueTurn("d0", i, Speaker.USER if i % 2 == 0 else Speaker.AGENT, u)
        for i, u in enumerate(utterances)
    ]


def test_assemble_zero_context_is_current_utterance():
    assert assemble_input(turns("u0", "u1"), 1, pre_k_turns=0) == "u1"


def test_assemble_orders_context_reverse_chronologically():
    got = assemble_input(turns("u0", "u1", "u2"), 2, pre_k_turns=2)
    assert got == f"u2 {TURN_SEP} agent: u1 {TURN_SEP} user: u0"


def test_assemble_single_turn_with_context_budget():
    assert assemble_input(turns("u0"), 0, pre_k_turns=2) == "u0"


def test_assemble_current_utterance_is_prefix():
    rng = random.Random(3)
    for _ in range(50):
        n = rng.randint(1, 6)
        history = turns(*[f"utt{j} {rng.random():.3f}" for j in range(n)])
        idx = rng.randrange(n)
        k = rng.randint(0, 4)
        assert assemble_input(history, idx, k).startswith(history[idx].utterance)


def test_assemble_rejects_bad_indices():
    with pytest.raises(IndexError):
        assemble_input(turns("u0"), 1)
    with pytest.raises(ValueError):
        assemble_input(turns("u0"), 0, pre_k_turns=-1)


def _write_lines(path, objs):
    with open(path, "w", encoding="utf-8") as f:
        for obj in objs:
            f.write(json.dumps(obj) + "\n")


def _line(i, **kw):
    obj = {
        "dialogue_id": "d0",
        "turn_index": i,
        "speaker": "user",
        "utterance": f"hello {i}",
        "grounding_passage_id": "p0",
        "response": f"reply {i}",
    }
    obj.update(kw)
    return obj


def test_ingest_empty_file(tmp_path):
    path = tmp_path / "turns.jsonl"
    path.write_text("", encoding="utf-8")
    corpus = ingest_jsonl(path, CorpusRole.D_T_DOWNSTREAM)
    assert corpus.size_N == 0
    assert corpus.role == CorpusRole.D_T_DOWNSTREAM


def test_ingest_single_line(tmp_path):
    path = tmp_path / "turns.jsonl"
    _write_lines(path, [_line(0)])
    corpus = ingest_jsonl(path, CorpusRole.U_HIGH_RESOURCE)
    assert corpus.size_N == 1
    assert corpus.role == CorpusRole.U_HIGH_RESOURCE
    assert corpus.examples[0].response_r == "reply 0"


def test_ingest_missing_field_names_line(tmp_path):
    path = tmp_path / "turns.jsonl"
    bad = _line(2)
    del bad["response"]
    _write_lines(path, [_line(0), _line(1), bad])
    with pytest.raises(IngestError, match="line 3: missing field response"):
        ingest_jsonl(path, CorpusRole.D_T_DOWNSTREAM)


def test_ingest_malformed_json_names_line(tmp_path):
    path = tmp_path / "turns.jsonl"
    path.write_text(json.dumps(_line(0)) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(IngestError, match="line 2"):
        ingest_jsonl(path, CorpusRole.D_T_DOWNSTREAM)


def test_ingest_dangling_passage_id(tmp_path):
    path = tmp_path / "turns.jsonl"
    _write_lines(path, [_line(0, grounding_passage_id="ghost")])
    passages, corpus = generate_synthetic_corpus(seed=0, n_passages=2, n_turns=2)
    with pytest.raises(IngestError, match="ghost"):
        ingest_jsonl(path, CorpusRole.D_T_DOWNSTREAM, passages=corpus.passages)


def test_ingest_requires_increasing_turn_index(tmp_path):
    path = tmp_path / "turns.jsonl"
    _write_lines(path, [_line(1), _line(0)])
    with pytest.raises(IngestError, match="strictly increasing"):
        ingest_jsonl(path, CorpusRole.D_T_DOWNSTREAM)


def test_ingest_builds_context_from_prior_turns(tmp_path):
    path = tmp_path / "turns.jsonl"
    _write_lines(path, [_line(0), _line(1)])
    corpus = ingest_jsonl(path, CorpusRole.D_T_DOWNSTREAM)
    assert corpus.examples[1].input_x == f"hello 1 {TURN_SEP} user: hello 0"


def test_synthetic_corpus_is_deterministic(tmp_path):
    a_passages, a = generate_synthetic_corpus(seed=7, n_passages=20, n_turns=30)
    b_passages, b = generate_synthetic_corpus(seed=7, n_passages=20, n_turns=30)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_turns_jsonl(a.turn_records, pa)
    write_turns_jsonl(b.turn_records, pb)
    assert pa.read_bytes() == pb.read_bytes()
    assert [p.text for p in a_passages] == [p.text for p in b_passages]


def test_synthetic_corpus_differs_across_seeds(tmp_path):
    _, a = generate_synthetic_corpus(seed=1, n_passages=20, n_turns=30)
    _, b = generate_synthetic_corpus(seed=2, n_passages=20, n_turns=30)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_turns_jsonl(a.turn_records, pa)
    write_turns_jsonl(b.turn_records, pb)
    assert pa.read_bytes() != pb.read_bytes()


def test_synthetic_corpus_sizes_and_grounding():
    passages, corpus = generate_synthetic_corpus(seed=0, n_passages=100, n_turns=200)
    assert len(passages) == 100
    assert corpus.size_N == 200
    pool_ids = {p.id for p in passages}
    for ex in corpus.examples:
        assert ex.grounding_passage_id in pool_ids


def test_synthetic_responses_overlap_grounding_passage():
    _, corpus = generate_synthetic_corpus(seed=11, n_passages=50, n_turns=120)
    for ex in corpus.examples:
        frac = response_overlap_fraction(ex, corpus.passages[ex.grounding_passage_id])
        assert frac >= 0.3


def test_ingest_serialize_round_trip_is_identity(tmp_path):
    _, corpus = generate_synthetic_corpus(seed=5, n_passages=10, n_turns=25)
    first = tmp_path / "first.jsonl"
    write_turns_jsonl(corpus.turn_records, first)
    second = tmp_path / "second.jsonl"
    write_turns_jsonl(read_turn_records(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_ingested_examples_match_generated_examples(tmp_path):
    _, corpus = generate_synthetic_corpus(seed=5, n_passages=10, n_turns=25)
    path = tmp_path / "turns.jsonl"
    write_turns_jsonl(corpus.turn_records, path)
    loaded = ingest_jsonl(path, corpus.role, corpus.passages)
    assert loaded.examples == corpus.examples


def test_language_counts():
    _, corpus = generate_synthetic_corpus(
        seed=0, n_passages=5, n_turns=8, language=Language.FR
    )
    assert corpus.language_counts() == {"fr": 8}
