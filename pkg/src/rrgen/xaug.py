"""Cross-lingual pseudo-data construction: translate a high-resource corpus
field by field, filter out poor or over-long items, and assemble the
translated training set.

Real translation services plug in through TranslationClient; deployments read
their endpoint and credentials from the environment (ENV_ENDPOINT /
ENV_API_KEY), never from files in the repository. The package ships only the
deterministic offline stub.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass
from typing import Mapping

from .corpus import CorpusRole, CorpusSet, Language, Origin, Passage, TrainingExample, TurnRecord

logger = logging.getLogger(__name__)

ENV_ENDPOINT = "RRGEN_TRANSLATE_ENDPOINT"
ENV_API_KEY = "RRGEN_TRANSLATE_API_KEY"


class TranslationClient(ABC):
    """Seam for machine-translation backends."""

    def __init__(self, source_language: Language, target_language: Language):
        self.source_language = source_language
        self.target_language = target_language

    @abstractmethod
    def translate(self, text: str) -> str:
        raise NotImplementedError


class StubTranslationClient(TranslationClient):
    """Deterministic token-wise mapping through a bilingual lexicon. Unknown
    tokens pass through unchanged and are tallied in unknown_tokens."""

    def __init__(
        self,
        source_language: Language,
        target_language: Language,
        lexicon: Mapping[str, str] | None = None,
    ):
        super().__init__(source_language, target_language)
        self.lexicon = dict(lexicon or {})
        self.unknown_tokens: Counter[str] = Counter()

    def translate(self, text: str) -> str:
        if not text:
            raise ValueError("cannot translate empty text")
        out = []
        for token in text.split():
            if token in self.lexicon:
                out.append(self.lexicon[token])
            else:
                self.unknown_tokens[token] += 1
                out.append(token)
        return " ".join(out)


def stub_translate(text: str, client: StubTranslationClient) -> str:
    return client.translate(text)


@dataclass(frozen=True)
class FilterPolicy:
    """Operationalizes quality filtering as length bounds, a length-ratio
    band around 1, and a minimum alphabetic character fraction."""

    max_length_tokens: int = 128
    min_length_tokens: int = 1
    max_length_ratio: float = 3.0
    min_alpha_fraction: float = 0.0

    def __post_init__(self):
        if self.min_length_tokens >= self.max_length_tokens:
            raise ValueError("min_length_tokens must be < max_length_tokens")
        if self.max_length_ratio <= 0:
            raise ValueError("max_length_ratio must be > 0")

    def check(self, source_text: str, translated_text: str) -> bool:
        """Both sides obey the length bounds; the translated/source token
        ratio stays inside [1/max_length_ratio, max_length_ratio]."""
        src_n = len(source_text.split())
        tgt_n = len(translated_text.split())
        for n in (src_n, tgt_n):
            if not (self.min_length_tokens <= n <= self.max_length_tokens):
                return False
        ratio = tgt_n / src_n
        if not (1.0 / self.max_length_ratio <= ratio <= self.max_length_ratio):
            return False
        chars = [c for c in translated_text if not c.isspace()]
        if chars:
            alpha = sum(1 for c in chars if c.isalpha()) / len(chars)
            if alpha < self.min_alpha_fraction:
                return False
        return True


@dataclass(frozen=True)
class TranslationReport:
    total: int
    kept: int
    dropped_filter: int
    dropped_error: int

    @property
    def dropped(self) -> int:
        return self.dropped_filter + self.dropped_error


def build_pseudo_set(
    source: CorpusSet,
    client: TranslationClient,
    policy: FilterPolicy,
) -> tuple[CorpusSet, TranslationReport]:
    """Translate every text field of every example (and the bound passage
    pool), drop examples that fail the policy or whose translation errors
    out, and return the pseudo set with kept/dropped counts.

    Translated passages keep their ids: the pseudo pool is a parallel corpus
    of the source pool and the two never occur in one training mixture.
    """
    if source.role != CorpusRole.U_HIGH_RESOURCE:
        raise ValueError(f"pseudo sets are built from U_high_resource, got {source.role.value}")

    translated_pool: dict[str, Passage] = {}
    failed_passages: set[str] = set()
    for pid, passage in source.passages.items():
        try:
            translated_pool[pid] = Passage(
                id=pid, text=client.translate(passage.text), language=client.target_language
            )
        except Exception as e:  # client failures drop items, never the batch
            logger.warning("passage %s: translation failed (%s)", pid, e)
            failed_passages.add(pid)

    kept_examples: list[TrainingExample] = []
    kept_records: list[TurnRecord] = []
    dropped_filter = 0
    dropped_error = 0
    records = source.turn_records if len(source.turn_records) == len(source.examples) else None
    for i, ex in enumerate(source.examples):
        if ex.grounding_passage_id in failed_passages:
            dropped_error += 1
            continue
        try:
            input_t = client.translate(ex.input_x)
            response_t = client.translate(ex.response_r)
        except Exception as e:
            logger.warning("example %d: translation failed (%s)", i, e)
            dropped_error += 1
            continue
        passage = source.passages[ex.grounding_passage_id]
        passage_t = translated_pool[ex.grounding_passage_id]
        ok = (
            policy.check(ex.input_x, input_t)
            and policy.check(ex.response_r, response_t)
            and policy.check(passage.text, passage_t.text)
        )
        if not ok:
            dropped_filter += 1
            continue
        kept_examples.append(
            TrainingExample(
                input_x=input_t,
                grounding_passage_id=ex.grounding_passage_id,
                response_r=response_t,
                language=client.target_language,
                origin=Origin.TRANSLATED,
            )
        )
        if records is not None:
            rec = records[i]
            kept_records.append(
                TurnRecord(
                    dialogue_id=rec.dialogue_id,
                    turn_index=rec.turn_index,
                    speaker=rec.speaker,
                    utterance=client.translate(rec.utterance),
                    grounding_passage_id=rec.grounding_passage_id,
                    response=response_t,
                    language=client.target_language,
                )
            )

    report = TranslationReport(
        total=source.size_N,
        kept=len(kept_examples),
        dropped_filter=dropped_filter,
        dropped_error=dropped_error,
    )
    logger.info(
        "pseudo set %s->%s: kept %d / %d (filtered %d, errors %d)",
        client.source_language.value, client.target_language.value,
        report.kept, report.total, report.dropped_filter, report.dropped_error,
    )
    pseudo = CorpusSet(
        examples=tuple(kept_examples),
        role=CorpusRole.D_PRIME_TRANSLATED,
        passages=translated_pool,
        turn_records=tuple(kept_records),
    )
    return pseudo, report
