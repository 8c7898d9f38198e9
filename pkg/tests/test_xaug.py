import random

import pytest

from rrgen.corpus import (
    CorpusRole,
    CorpusSet,
    Language,
    Origin,
    Passage,
    TrainingExample,
    generate_synthetic_corpus,
)
from rrgen.xaug import (
    FilterPolicy,
    StubTranslationClient,
    TranslationReport,
    build_pseudo_set,
    stub_translate,
)


def make_client(lexicon=None):
    return StubTranslationClient(Language.EN, Language.FR, lexicon)


def hr_corpus(seed=0, n_passages=6, n_turns=12) -> CorpusSet:
    _, corpus = generate_synthetic_corpus(
        seed=seed, n_passages=n_passages, n_turns=n_turns,
        language=Language.EN, role=CorpusRole.U_HIGH_RESOURCE,
        origin=Origin.HIGH_RESOURCE,
    )
    return corpus


def test_empty_lexicon_stub_is_identity():
    client = make_client()
    assert client.translate("hello brave world") == "hello brave world"


def test_stub_is_deterministic():
    client = make_client({"hello": "bonjour"})
    assert client.translate("hello world") == client.translate("hello world")


def test_lexicon_mapping_applies_token_wise():
    client = make_client({"hello": "bonjour"})
    assert stub_translate("hello world", client) == "bonjour world"


def test_unknown_tokens_are_tallied():
    client = make_client({"hello": "bonjour"})
    client.translate("hello world world")
    assert client.unknown_tokens["world"] == 2
    assert "hello" not in client.unknown_tokens


def test_stub_rejects_empty_text():
    with pytest.raises(ValueError):
        make_client().translate("")


def test_policy_validation():
    with pytest.raises(ValueError):
        FilterPolicy(max_length_tokens=4, min_length_tokens=4)
    with pytest.raises(ValueError):
        FilterPolicy(max_length_ratio=0.0)


def test_policy_checks_length_bounds_on_both_sides():
    policy = FilterPolicy(max_length_tokens=4, min_length_tokens=2, max_length_ratio=10.0)
    assert policy.check("a b c", "x y z")
    assert not policy.check("a", "x y")  # source too short
    assert not policy.check("a b", "x")  # target too short
    assert not policy.check("a b c d e", "x y z")  # source too long


def test_policy_ratio_band_is_symmetric():
    policy = FilterPolicy(max_length_tokens=100, min_length_tokens=1, max_length_ratio=2.0)
    assert policy.check("a b c", "x y z w e f")  # ratio 2.0
    assert not policy.check("a b c", "x y z w e f g")  # ratio > 2
    assert policy.check("a b c d e f", "x y z")  # ratio 0.5 = 1/2
    assert not policy.check("a b c d e f g", "x y z")  # ratio < 1/2


def test_policy_alpha_fraction():
    policy = FilterPolicy(min_alpha_fraction=0.8)
    assert policy.check("a b c", "abc def")
    assert not policy.check("a b c", "1 2 3 4 a")


def test_build_pseudo_set_requires_high_resource_source():
    _, downstream = generate_synthetic_corpus(seed=0, n_passages=4, n_turns=4)
    with pytest.raises(ValueError, match="U_high_resource"):
        build_pseudo_set(downstream, make_client(), FilterPolicy())


def test_vacuous_filter_drops_everything():
    source = hr_corpus()
    # nothing survives a 2..3-token window with ratio 1 on these texts
    policy = FilterPolicy(max_length_tokens=2, min_length_tokens=1)
    pseudo, report = build_pseudo_set(source, make_client(), policy)
    assert pseudo.size_N == 0
    assert report.kept == 0
    assert report.dropped == source.size_N


def test_identity_client_with_permissive_policy_preserves_texts():
    source = hr_corpus()
    pseudo, report = build_pseudo_set(source, make_client(), FilterPolicy())
    assert report.kept == source.size_N
    assert pseudo.role == CorpusRole.D_PRIME_TRANSLATED
    for orig, got in zip(source.examples, pseudo.examples):
        assert got.input_x == orig.input_x
        assert got.response_r == orig.response_r
        assert got.origin == Origin.TRANSLATED
        assert got.language == Language.FR
    for pid, passage in source.passages.items():
        assert pseudo.passages[pid].text == passage.text


def _large_source(n_total: int, n_bad: int) -> CorpusSet:
    passage = Passage(id="p0", text="alpha beta gamma delta", language=Language.EN)
    examples = []
    for i in range(n_total):
        response = "long " * 12 if i < n_bad else "alpha beta"
        examples.append(
            TrainingExample(
                input_x=f"query {i}",
                grounding_passage_id="p0",
                response_r=response.strip(),
                language=Language.EN,
                origin=Origin.HIGH_RESOURCE,
            )
        )
    return CorpusSet(tuple(examples), CorpusRole.U_HIGH_RESOURCE, {"p0": passage})


def test_five_thousand_examples_with_twenty_dropped():
    source = _large_source(5000, 20)
    policy = FilterPolicy(max_length_tokens=8, min_length_tokens=1)
    pseudo, report = build_pseudo_set(source, make_client(), policy)
    assert report.total == 5000
    assert report.dropped_filter == 20
    assert report.kept == 4980
    assert pseudo.size_N == 4980


def test_client_failures_drop_items_without_aborting():
    source = hr_corpus()

    class Flaky(StubTranslationClient):
        def __init__(self):
            super().__init__(Language.EN, Language.FR)
            self.calls = 0

        def translate(self, text):
            self.calls += 1
            if self.calls % 5 == 0:
                raise ConnectionError("boom")
            return super().translate(text)

    pseudo, report = build_pseudo_set(source, Flaky(), FilterPolicy())
    assert report.dropped_error > 0
    assert report.kept + report.dropped == report.total
    assert pseudo.size_N == report.kept


def test_filtering_is_order_independent():
    source = hr_corpus(seed=3, n_passages=5, n_turns=20)
    policy = FilterPolicy(max_length_tokens=12, min_length_tokens=2, max_length_ratio=2.0)
    kept_a, _ = build_pseudo_set(source, make_client(), policy)

    order = list(range(source.size_N))
    random.Random(1).shuffle(order)
    shuffled = CorpusSet(
        tuple(source.examples[i] for i in order), source.role, dict(source.passages)
    )
    kept_b, _ = build_pseudo_set(shuffled, make_client(), policy)
    key = lambda ex: (ex.input_x, ex.response_r)
    assert sorted(map(key, kept_a.examples)) == sorted(map(key, kept_b.examples))


def test_kept_examples_satisfy_policy_bounds():
    source = hr_corpus(seed=4, n_passages=5, n_turns=30)
    policy = FilterPolicy(max_length_tokens=16, min_length_tokens=3, max_length_ratio=2.0)
    pseudo, _ = build_pseudo_set(source, make_client(), policy)
    for ex in pseudo.examples:
        for text in (ex.input_x, ex.response_r, pseudo.passages[ex.grounding_passage_id].text):
            assert policy.min_length_tokens <= len(text.split()) <= policy.max_length_tokens


def test_build_pseudo_set_does_not_mutate_source():
    source = hr_corpus()
    before = tuple(source.examples)
    before_passages = {pid: p.text for pid, p in source.passages.items()}
    build_pseudo_set(source, make_client({"alpha": "omega"}), FilterPolicy())
    assert source.examples == before
    assert {pid: p.text for pid, p in source.passages.items()} == before_passages
    assert source.role == CorpusRole.U_HIGH_RESOURCE


def test_report_arithmetic():
    report = TranslationReport(total=10, kept=7, dropped_filter=2, dropped_error=1)
    assert report.dropped == 3
