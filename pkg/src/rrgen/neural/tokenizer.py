"""Word-level tokenizer with a fixed special-token block and a corpus-built vocabulary."""

from __future__ import annotations

import re
from typing import Iterable, Sequence

from ..util import sha256_text

# Special tokens occupy the first ids, in this order. They are inserted
# programmatically when sequences are assembled; plain text never splits
# into one of them.
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
SEP_TOKEN = "<sep>"
QUERY_TOKEN = "<query>"
PASSAGE_TOKEN = "<passage>"
SPECIAL_TOKENS = (
    PAD_TOKEN,
    UNK_TOKEN,
    BOS_TOKEN,
    EOS_TOKEN,
    SEP_TOKEN,
    QUERY_TOKEN,
    PASSAGE_TOKEN,
)

# Separator literal used when dialogue turns are joined into one string.
# Encoders split on it and substitute the SEP id.
TURN_SEP = SEP_TOKEN

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_tokens(text: str) -> list[str]:
    """Lowercased whitespace+punctuation split; also the metrics tokenization."""
    return [t.lower() for t in _TOKEN_RE.findall(text)]


class Tokenizer:
    """Maps word tokens to dense ids; unknown tokens fall back to UNK."""

    def __init__(self, words: Iterable[str]):
        vocab = list(SPECIAL_TOKENS)
        seen = set(vocab)
        for w in sorted(set(words)):
            if w not in seen:
                vocab.append(w)
                seen.add(w)
        self._tokens = vocab
        self._ids = {t: i for i, t in enumerate(vocab)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        words: set[str] = set()
        for text in texts:
            words.update(split_tokens(text))
        return cls(words)

    @property
    def vocab_size(self) -> int:
        return len(self._tokens)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD_TOKEN]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK_TOKEN]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS_TOKEN]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS_TOKEN]

    @property
    def sep_id(self) -> int:
        return self._ids[SEP_TOKEN]

    @property
    def query_id(self) -> int:
        return self._ids[QUERY_TOKEN]

    @property
    def passage_id(self) -> int:
        return self._ids[PASSAGE_TOKEN]

    def vocab_hash(self) -> str:
        return sha256_text("\x00".join(self._tokens))

    def token_to_id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def encode(self, text: str, max_len: int | None = None) -> list[int]:
        """Split, lowercase, map to ids, truncate. Never emits special ids."""
        if max_len is not None and max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {max_len}")
        ids = [self._ids.get(t, self.unk_id) for t in split_tokens(text)]
        if max_len is not None:
            ids = ids[:max_len]
        return ids

    def encode_turns(self, text: str, max_len: int | None = None) -> list[int]:
        """Encode text assembled from dialogue turns, mapping the turn
        separator literal to the SEP id."""
        ids: list[int] = []
        for i, segment in enumerate(text.split(TURN_SEP)):
            if i > 0:
                ids.append(self.sep_id)
            ids.extend(self._ids.get(t, self.unk_id) for t in split_tokens(segment))
        if max_len is not None:
            ids = ids[:max_len]
        return ids

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        n_special = len(SPECIAL_TOKENS)
        out = []
        for i in ids:
            if skip_special and i < n_special:
                continue
            out.append(self._tokens[i])
        return " ".join(out)

    def to_json(self) -> dict:
        return {"tokens": self._tokens[len(SPECIAL_TOKENS):]}

    @classmethod
    def from_json(cls, payload: dict) -> "Tokenizer":
        return cls(payload["tokens"])
