import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import torch

from rrgen.corpus import generate_synthetic_corpus
from rrgen.neural.tokenizer import Tokenizer
from rrgen.neural.training import TrainStep
from rrgen.retriever import (
    CandidateList,
    DualEncoder,
    MipsIndex,
    RetrievalScore,
    build_index,
    in_batch_loss,
    in_batch_nll,
    load_index,
    plan_batches,
    retrieve,
    retrieve_corpus,
    save_index,
    train_retriever,
)


def make_model(corpus_texts, d_model=16, max_input_length=24) -> DualEncoder:
    tokenizer = Tokenizer.from_texts(corpus_texts)
    torch.manual_seed(5)
    return DualEncoder.build(
        tokenizer, d_model=d_model, n_heads=2, n_layers=1, dropout=0.0,
        max_input_length=max_input_length,
    )


def planted_index(matrix: np.ndarray, mode: str = "exact") -> MipsIndex:
    ids = tuple(f"p{i:04d}" for i in range(matrix.shape[0]))
    return MipsIndex(ids=ids, matrix=matrix.astype(np.float32), mode=mode, encoder_hash="x")


# --- scoring -------------------------------------------------------------------


def test_orthogonal_embeddings_score_zero():
    index = planted_index(np.array([[0.0, 1.0]]))
    [(pid, score)] = index.search(np.array([1.0, 0.0]), k=1)
    assert score == 0.0


def test_parallel_embeddings_score_dot_product():
    index = planted_index(np.array([[1.0, 1.0]]))
    [(pid, score)] = index.search(np.array([1.0, 1.0]), k=1)
    assert score == pytest.approx(2.0)


def test_score_equals_manual_dot_of_embeddings():
    _, corpus = generate_synthetic_corpus(seed=0, n_passages=5, n_turns=5)
    texts = [p.text for p in corpus.passages.values()]
    model = make_model(texts)
    query, passage = corpus.examples[0].input_x, texts[0]
    got = model.score(query, passage)
    with torch.no_grad():
        q = model.embed_queries([query])[0]
        z = model.embed_passages([passage])[0]
    assert got == pytest.approx(float(torch.dot(q, z)), abs=1e-6)


# --- in-batch training loss -----------------------------------------------------


def test_uniform_scores_give_ln_batch_size():
    scores = torch.zeros(2, 2)
    assert float(in_batch_nll(scores)) == pytest.approx(math.log(2.0))
    scores = torch.full((5, 5), 3.25)
    assert float(in_batch_nll(scores)) == pytest.approx(math.log(5.0))


def test_saturated_gold_margin_gives_near_zero_loss():
    scores = torch.eye(4) * 200.0
    assert float(in_batch_nll(scores)) == pytest.approx(0.0, abs=1e-6)


def test_duplicated_pair_matches_ln2_through_encoders():
    _, corpus = generate_synthetic_corpus(seed=0, n_passages=4, n_turns=4)
    texts = [p.text for p in corpus.passages.values()]
    model = make_model(texts)
    loss = in_batch_loss(model, [texts[0], texts[0]], [texts[1], texts[1]])
    assert float(loss.detach()) == pytest.approx(math.log(2.0), abs=1e-5)


def test_batch_size_one_is_rejected():
    _, corpus = generate_synthetic_corpus(seed=0, n_passages=4, n_turns=6)
    model = make_model([p.text for p in corpus.passages.values()])
    with pytest.raises(ValueError, match="in-batch negatives"):
        train_retriever(model, corpus, TrainStep(learning_rate=1e-3),
                        epochs=1, batch_size=1)


def test_training_reduces_loss():
    _, corpus = generate_synthetic_corpus(seed=3, n_passages=12, n_turns=30)
    texts = [p.text for p in corpus.passages.values()]
    texts += [ex.input_x for ex in corpus.examples]
    model = make_model(texts)
    history = train_retriever(
        model, corpus, TrainStep(learning_rate=3e-3, seed=1), epochs=6, batch_size=8
    )
    assert history[-1]["mean_loss"] < history[0]["mean_loss"]


def test_training_with_fgm_runs_and_updates_parameters():
    from rrgen.fgm import FgmConfig

    _, corpus = generate_synthetic_corpus(seed=3, n_passages=8, n_turns=12)
    texts = [p.text for p in corpus.passages.values()]
    texts += [ex.input_x for ex in corpus.examples]
    model = make_model(texts)
    before = {k: v.clone() for k, v in model.query_encoder.state_dict().items()}
    history = train_retriever(
        model, corpus, TrainStep(learning_rate=1e-3, seed=1, accumulation_steps=2),
        epochs=1, batch_size=6, fgm=FgmConfig(epsilon=0.5, apply_every_step=False),
    )
    assert len(history) == 1
    changed = any(
        not torch.equal(before[k], v)
        for k, v in model.query_encoder.state_dict().items()
    )
    assert changed


def test_plan_batches_covers_everything_without_singletons():
    rng = random.Random(0)
    for n in (2, 5, 16, 17, 33):
        batches = plan_batches(n, 8, rng)
        flat = sorted(i for b in batches for i in b)
        assert flat == list(range(n))
        if n > 1:
            assert all(len(b) >= 2 for b in batches)


# --- index ----------------------------------------------------------------------


def brute_force_top_k(matrix: np.ndarray, ids, query: np.ndarray, k: int):
    scores = matrix @ query
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order[:k]]


def test_exact_search_matches_brute_force_oracle():
    rng = np.random.RandomState(0)
    matrix = rng.randn(1000, 64).astype(np.float32)
    index = planted_index(matrix)
    for qi in range(50):
        query = rng.randn(64).astype(np.float32)
        for k in (1, 5, 20):
            got = [pid for pid, _ in index.search(query, k)]
            assert got == brute_force_top_k(matrix, index.ids, query, k), (qi, k)


def test_tied_scores_break_by_ascending_id():
    matrix = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
    index = planted_index(matrix)
    got = [pid for pid, _ in index.search(np.array([1.0, 0.0]), k=3)]
    assert got == ["p0000", "p0001", "p0002"]


def test_empty_index_returns_empty():
    index = planted_index(np.zeros((0, 8)))
    assert index.search(np.ones(8), k=5) == []


def test_single_passage_always_returned():
    index = planted_index(np.array([[0.1] * 4]))
    for _ in range(3):
        got = index.search(np.random.randn(4), k=1)
        assert [pid for pid, _ in got] == ["p0000"]


def test_k_larger_than_index_warns_and_returns_all(caplog):
    matrix = np.random.RandomState(0).randn(3, 4)
    index = planted_index(matrix)
    with caplog.at_level(logging.WARNING):
        got = index.search(np.ones(4), k=10)
    assert len(got) == 3
    assert any("exceeds index size" in r.message for r in caplog.records)


def test_k_equal_to_n_is_a_permutation():
    matrix = np.random.RandomState(1).randn(20, 8)
    index = planted_index(matrix)
    got = [pid for pid, _ in index.search(np.ones(8), k=20)]
    assert sorted(got) == sorted(index.ids)


def test_query_matching_stored_unit_vector_ranks_first():
    rng = np.random.RandomState(2)
    matrix = rng.randn(50, 16)
    matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
    index = planted_index(matrix)
    got = index.search(matrix[17], k=1)
    assert got[0][0] == "p0017"


def test_ranking_invariant_under_positive_scaling():
    rng = np.random.RandomState(3)
    matrix = rng.randn(100, 16)
    query = rng.randn(16)
    a = [pid for pid, _ in planted_index(matrix).search(query, k=10)]
    b = [pid for pid, _ in planted_index(3.7 * matrix).search(query, k=10)]
    assert a == b


def gaussian_mixture_vectors(rng: np.random.RandomState, n: int, d: int, n_components: int):
    """Clustered synthetic embeddings: the regime cluster routing serves."""
    centers = rng.randn(n_components, d) * 2.0
    assign = rng.randint(0, n_components, size=n)
    matrix = (centers[assign] + rng.randn(n, d)).astype(np.float32)
    return centers, matrix


def test_approximate_recall_at_10_vs_exact():
    rng = np.random.RandomState(4)
    centers, matrix = gaussian_mixture_vectors(rng, 1000, 64, 16)
    ids = tuple(f"p{i:04d}" for i in range(1000))
    exact = MipsIndex(ids=ids, matrix=matrix, mode="exact", encoder_hash="x")
    from rrgen.retriever import _kmeans

    centroids, labels = _kmeans(matrix.astype(np.float64), 16, seed=0)
    approx = MipsIndex(ids=ids, matrix=matrix, mode="approximate", encoder_hash="x",
                       centroids=centroids, labels=labels, n_probe=4)
    hits = 0
    total = 0
    for _ in range(50):
        query = (centers[rng.randint(16)] + rng.randn(64)).astype(np.float32)
        truth = {pid for pid, _ in exact.search(query, 10)}
        found = {pid for pid, _ in approx.search(query, 10)}
        hits += len(truth & found)
        total += 10
    assert hits / total >= 0.95


def test_concurrent_queries_match_serial():
    rng = np.random.RandomState(5)
    matrix = rng.randn(200, 16).astype(np.float32)
    index = planted_index(matrix)
    queries = [rng.randn(16).astype(np.float32) for _ in range(32)]
    serial = [index.search(q, 5) for q in queries]
    with ThreadPoolExecutor(max_workers=8) as pool:
        threaded = list(pool.map(lambda q: index.search(q, 5), queries))
    assert serial == threaded


def test_index_save_load_round_trip(tmp_path):
    _, corpus = generate_synthetic_corpus(seed=0, n_passages=10, n_turns=10)
    passages = sorted(corpus.passages.values(), key=lambda p: p.id)
    model = make_model([p.text for p in passages])
    for mode in ("exact", "approximate"):
        index = build_index(passages, model, mode=mode, n_clusters=4, n_probe=2)
        path = tmp_path / f"{mode}.idx"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded.mode == index.mode
        assert loaded.ids == index.ids
        assert np.array_equal(loaded.matrix, index.matrix)
        query = np.ones(index.matrix.shape[1], dtype=np.float32)
        assert index.search(query, 5) == loaded.search(query, 5)


def test_build_index_empty_pool():
    model = make_model(["some text"])
    index = build_index([], model)
    assert index.size == 0
    assert index.search(np.ones(16, dtype=np.float32), 3) == []


def test_retrieve_returns_sorted_candidate_list():
    _, corpus = generate_synthetic_corpus(seed=2, n_passages=8, n_turns=8)
    passages = sorted(corpus.passages.values(), key=lambda p: p.id)
    model = make_model([p.text for p in passages])
    index = build_index(passages, model)
    result = retrieve(index, model, corpus.examples[0].input_x, k=5, query_id="q7")
    assert result.query_id == "q7"
    assert len(result) == 5
    scores = [e.score for e in result.entries]
    assert scores == sorted(scores, reverse=True)


def test_retrieve_corpus_one_list_per_example():
    _, corpus = generate_synthetic_corpus(seed=2, n_passages=8, n_turns=6)
    passages = sorted(corpus.passages.values(), key=lambda p: p.id)
    model = make_model([p.text for p in passages])
    index = build_index(passages, model)
    lists = retrieve_corpus(index, model, corpus, k=3)
    assert len(lists) == corpus.size_N
    assert all(len(cl) == 3 for cl in lists)


def test_candidate_list_validates_ordering_and_ids():
    with pytest.raises(ValueError, match="non-increasing"):
        CandidateList("q", (RetrievalScore("a", 1.0), RetrievalScore("b", 2.0)))
    with pytest.raises(ValueError, match="duplicate"):
        CandidateList("q", (RetrievalScore("a", 2.0), RetrievalScore("a", 1.0)))
