"""Corpus data model: passages, dialogue turns, training examples, JSONL I/O,
context-window assembly, and a deterministic synthetic corpus generator."""

from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .neural.tokenizer import TURN_SEP, split_tokens
from .util import canonical_json, sha256_text

logger = logging.getLogger(__name__)

DEFAULT_PRE_K_TURNS = 2


class Language(str, Enum):
    VI = "vi"
    FR = "fr"
    ZH = "zh"
    EN = "en"
    SYNTHETIC = "synthetic"


class Speaker(str, Enum):
    USER = "user"
    AGENT = "agent"


class Origin(str, Enum):
    NATIVE = "native"
    TRANSLATED = "translated"
    HIGH_RESOURCE = "high_resource"


class CorpusRole(str, Enum):
    D_CROSS_LINGUAL = "D_cross_lingual"
    D_PRIME_TRANSLATED = "D_prime_translated"
    D_T_DOWNSTREAM = "D_t_downstream"
    U_HIGH_RESOURCE = "U_high_resource"


class IngestError(ValueError):
    """Raised for malformed corpus files; message carries the line number."""


@dataclass(frozen=True)
class Passage:
    id: str
    text: str
    language: Language = Language.SYNTHETIC

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"passage {self.id!r}: text must be non-empty")


@dataclass(frozen=True)
class DialogueTurn:
    dialogue_id: str
    turn_index: int
    speaker: Speaker
    utterance: str

    def __post_init__(self):
        if self.turn_index < 0:
            raise ValueError(f"turn_index must be >= 0, got {self.turn_index}")


@dataclass(frozen=True)
class TurnRecord:
    """One JSONL line: a dialogue turn plus its grounded response."""

    dialogue_id: str
    turn_index: int
    speaker: Speaker
    utterance: str
    grounding_passage_id: str
    response: str
    language: Language = Language.SYNTHETIC

    def turn(self) -> DialogueTurn:
        return DialogueTurn(self.dialogue_id, self.turn_index, self.speaker, self.utterance)

    def to_json_obj(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "turn_index": self.turn_index,
            "speaker": self.speaker.value,
            "utterance": self.utterance,
            "grounding_passage_id": self.grounding_passage_id,
            "response": self.response,
            "language": self.language.value,
        }


@dataclass(frozen=True)
class TrainingExample:
    input_x: str
    grounding_passage_id: str
    response_r: str
    language: Language = Language.SYNTHETIC
    origin: Origin = Origin.NATIVE

    def __post_init__(self):
        if not self.input_x:
            raise ValueError("input_x must be non-empty")

    def content_hash(self) -> str:
        return sha256_text(
            canonical_json(
                [self.input_x, self.grounding_passage_id, self.response_r,
                 self.language.value, self.origin.value]
            )
        )


@dataclass(frozen=True)
class CorpusSet:
    """Immutable set of training examples bound to the passage pool that
    resolves their grounding ids."""

    examples: tuple[TrainingExample, ...]
    role: CorpusRole
    passages: Mapping[str, Passage] = field(default_factory=dict)
    turn_records: tuple[TurnRecord, ...] = ()

    def __post_init__(self):
        if self.passages:
            for ex in self.examples:
                if ex.grounding_passage_id not in self.passages:
                    raise IngestError(
                        f"dangling passage id {ex.grounding_passage_id!r}"
                    )

    @property
    def size_N(self) -> int:
        return len(self.examples)

    def language_counts(self) -> dict[str, int]:
        return dict(Counter(ex.language.value for ex in self.examples))

    def with_role(self, role: CorpusRole) -> "CorpusSet":
        return CorpusSet(self.examples, role, self.passages, self.turn_records)


def assemble_input(
    turns: Sequence[DialogueTurn],
    current_index: int,
    pre_k_turns: int = DEFAULT_PRE_K_TURNS,
) -> str:
    """Current utterance first, then up to pre_k_turns prior utterances in
    reverse-chronological order, speaker-tagged and joined by the turn
    separator. Truncation to model length is the caller's job."""
    if not 0 <= current_index < len(turns):
        raise IndexError(f"current_index {current_index} out of range")
    if pre_k_turns < 0:
        raise ValueError(f"pre_k_turns must be >= 0, got {pre_k_turns}")
    parts = [turns[current_index].utterance]
    lo = max(0, current_index - pre_k_turns)
    for t in reversed(turns[lo:current_index]):
        parts.append(f"{t.speaker.value}: {t.utterance}")
    return f" {TURN_SEP} ".join(parts)


def _parse_turn_line(obj: dict, line_no: int) -> TurnRecord:
    required = (
        "dialogue_id", "turn_index", "speaker", "utterance",
        "grounding_passage_id", "response",
    )
    for name in required:
        if name not in obj:
            raise IngestError(f"line {line_no}: missing field {name}")
    try:
        speaker = Speaker(obj["speaker"])
    except ValueError:
        raise IngestError(f"line {line_no}: unknown speaker {obj['speaker']!r}") from None
    try:
        language = Language(obj.get("language", Language.SYNTHETIC.value))
    except ValueError:
        raise IngestError(f"line {line_no}: unknown language {obj['language']!r}") from None
    turn_index = obj["turn_index"]
    if not isinstance(turn_index, int) or turn_index < 0:
        raise IngestError(f"line {line_no}: turn_index must be a non-negative integer")
    return TurnRecord(
        dialogue_id=str(obj["dialogue_id"]),
        turn_index=turn_index,
        speaker=speaker,
        utterance=str(obj["utterance"]),
        grounding_passage_id=str(obj["grounding_passage_id"]),
        response=str(obj["response"]),
        language=language,
    )


def read_turn_records(path: str | Path) -> list[TurnRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"line {line_no}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise IngestError(f"line {line_no}: expected a JSON object")
            records.append(_parse_turn_line(obj, line_no))
    return records


def examples_from_records(
    records: Sequence[TurnRecord],
    origin: Origin = Origin.NATIVE,
    pre_k_turns: int = DEFAULT_PRE_K_TURNS,
) -> list[TrainingExample]:
    """One training example per record; its input is the turn plus context
    assembled from earlier turns of the same dialogue."""
    by_dialogue: dict[str, list[TurnRecord]] = {}
    for rec in records:
        group = by_dialogue.setdefault(rec.dialogue_id, [])
        if group and rec.turn_index <= group[-1].turn_index:
            raise IngestError(
                f"dialogue {rec.dialogue_id!r}: turn_index must be strictly "
                f"increasing, got {rec.turn_index} after {group[-1].turn_index}"
            )
        group.append(rec)
    examples = []
    for rec in records:
        group = by_dialogue[rec.dialogue_id]
        turns = [r.turn() for r in group]
        idx = next(i for i, r in enumerate(group) if r.turn_index == rec.turn_index)
        examples.append(
            TrainingExample(
                input_x=assemble_input(turns, idx, pre_k_turns),
                grounding_passage_id=rec.grounding_passage_id,
                response_r=rec.response,
                language=rec.language,
                origin=origin,
            )
        )
    return examples


def ingest_jsonl(
    path: str | Path,
    role: CorpusRole,
    passages: Mapping[str, Passage] | None = None,
    origin: Origin = Origin.NATIVE,
    pre_k_turns: int = DEFAULT_PRE_K_TURNS,
) -> CorpusSet:
    """Read and validate a turns JSONL file. When a passage pool is supplied,
    grounding ids must resolve in it."""
    records = read_turn_records(path)
    examples = examples_from_records(records, origin=origin, pre_k_turns=pre_k_turns)
    corpus = CorpusSet(
        examples=tuple(examples),
        role=role,
        passages=dict(passages) if passages else {},
        turn_records=tuple(records),
    )
    logger.info(
        "ingested %s: %d examples, per-language counts %s",
        path, corpus.size_N, corpus.language_counts(),
    )
    return corpus


def read_passages_jsonl(path: str | Path) -> dict[str, Passage]:
    pool: dict[str, Passage] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"line {line_no}: malformed JSON ({e.msg})") from None
            for name in ("id", "text"):
                if name not in obj:
                    raise IngestError(f"line {line_no}: missing field {name}")
            pid = str(obj["id"])
            if pid in pool:
                raise IngestError(f"line {line_no}: duplicate passage id {pid!r}")
            pool[pid] = Passage(
                id=pid,
                text=str(obj["text"]),
                language=Language(obj.get("language", Language.SYNTHETIC.value)),
            )
    return pool


def write_turns_jsonl(records: Iterable[TurnRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(canonical_json(rec.to_json_obj()) + "\n")


def write_passages_jsonl(passages: Iterable[Passage], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in passages:
            f.write(canonical_json({"id": p.id, "text": p.text, "language": p.language.value}) + "\n")


# --- synthetic corpus -------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def make_word_vocab(rng: random.Random, vocab_size: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < vocab_size:
        n_syll = rng.choice((2, 2, 3))
        w = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(n_syll))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def generate_synthetic_corpus(
    seed: int,
    n_passages: int,
    n_turns: int,
    vocab_size: int = 120,
    language: Language = Language.SYNTHETIC,
    role: CorpusRole = CorpusRole.D_T_DOWNSTREAM,
    origin: Origin = Origin.NATIVE,
    id_prefix: str = "p",
    vocab: Sequence[str] | None = None,
) -> tuple[list[Passage], CorpusSet]:
    """Deterministic toy corpus. Responses draw most of their tokens from the
    grounding passage so retrieval and generation are learnable. Passing an
    explicit vocab lets several sub-corpora share one token space."""
    if min(n_passages, n_turns, vocab_size) < 1:
        raise ValueError("n_passages, n_turns, vocab_size must all be >= 1")
    rng = random.Random(seed)
    vocab = list(vocab) if vocab is not None else make_word_vocab(rng, vocab_size)

    passages = []
    for i in range(n_passages):
        words = rng.sample(vocab, k=min(len(vocab), rng.randint(6, 10)))
        passages.append(Passage(id=f"{id_prefix}{i:04d}", text=" ".join(words), language=language))
    pool = {p.id: p for p in passages}

    records: list[TurnRecord] = []
    dialogue_no = 0
    while len(records) < n_turns:
        dialogue_id = f"{id_prefix}d{dialogue_no:04d}"
        dialogue_no += 1
        for turn_index in range(rng.randint(1, 3)):
            if len(records) >= n_turns:
                break
            passage = passages[rng.randrange(n_passages)]
            p_words = passage.text.split()
            # Query: mostly passage words plus occasional noise, so the gold
            # passage is identifiable from the utterance alone.
            n_from_p = rng.randint(3, 4)
            utterance_words = rng.sample(p_words, k=min(len(p_words), n_from_p))
            if rng.random() < 0.5:
                utterance_words += [rng.choice(vocab)]
            rng.shuffle(utterance_words)
            # Response: >= 2/3 of its tokens copied from the passage.
            r_len = rng.randint(4, 7)
            n_copy = max(1, math.ceil(r_len * 2 / 3))
            response_words = [rng.choice(p_words) for _ in range(n_copy)]
            response_words += [rng.choice(vocab) for _ in range(r_len - n_copy)]
            rng.shuffle(response_words)
            records.append(
                TurnRecord(
                    dialogue_id=dialogue_id,
                    turn_index=turn_index,
                    speaker=Speaker.USER if turn_index % 2 == 0 else Speaker.AGENT,
                    utterance=" ".join(utterance_words),
                    grounding_passage_id=passage.id,
                    response=" ".join(response_words),
                    language=language,
                )
            )

    corpus = CorpusSet(
        examples=tuple(examples_from_records(records, origin=origin)),
        role=role,
        passages=pool,
        turn_records=tuple(records),
    )
    return passages, corpus


def response_overlap_fraction(example: TrainingExample, passage: Passage) -> float:
    """Fraction of response tokens present in the grounding passage."""
    resp = split_tokens(example.response_r)
    if not resp:
        return 1.0
    p_tokens = set(split_tokens(passage.text))
    return sum(1 for t in resp if t in p_tokens) / len(resp)
