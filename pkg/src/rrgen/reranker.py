"""Cross-encoder reranking: joint (passage, query) scoring and listwise
softmax training over retrieved shortlists."""

from __future__ import annotations

import json
import logging
import random
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import CorpusSet, Passage
from .fgm import FgmConfig, adversarial_step
from .neural.models import EncoderConfig, TransformerEncoder
from .neural.tokenizer import Tokenizer
from .neural.training import Trainer, TrainStep
from .retriever import CandidateList, RetrievalScore

logger = logging.getLogger(__name__)


class CrossEncoderModel(nn.Module):
    """Encoder plus a linear head mapping the pooled output to one logit."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = TransformerEncoder(config)
        self.scorer = nn.Linear(config.d_model, 1)

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None,
                capture_embed: bool = False) -> torch.Tensor:
        pooled, _ = self.encoder(ids, pad_mask, capture_embed=capture_embed)
        return self.scorer(pooled).squeeze(-1)

    def captured_embedding_grad(self) -> torch.Tensor:
        return self.encoder.captured_embedding_grad()

    def set_embed_offset(self, offset: torch.Tensor) -> None:
        self.encoder.set_embed_offset(offset)

    def clear_embed_offset(self) -> None:
        self.encoder.clear_embed_offset()


class CrossEncoder:
    """Tokenizer-aware wrapper assembling [passage, query] pair sequences."""

    def __init__(
        self,
        tokenizer: Tokenizer,
        model: CrossEncoderModel,
        max_input_length: int = 64,
        passage_first: bool = True,
    ):
        self.tokenizer = tokenizer
        self.model = model
        self.max_input_length = max_input_length
        self.passage_first = passage_first

    @classmethod
    def build(
        cls,
        tokenizer: Tokenizer,
        d_model: int = 64,
        n_heads: int = 4,
        n_layers: int = 2,
        dropout: float = 0.1,
        max_input_length: int = 64,
        passage_first: bool = True,
    ) -> "CrossEncoder":
        config = EncoderConfig(
            vocab_size=tokenizer.vocab_size,
            d_model=d_model,
            n_heads=n_heads,
            n_layers=n_layers,
            dropout=dropout,
        )
        return cls(tokenizer, CrossEncoderModel(config), max_input_length, passage_first)

    def pair_ids(self, passage: str, query: str) -> list[int]:
        """Marked pair sequence, truncated to max length with the passage
        giving way first."""
        tok = self.tokenizer
        p_ids = tok.encode(passage)
        q_ids = tok.encode_turns(query)
        budget = self.max_input_length - 3  # two marks + separator
        if len(q_ids) > budget:
            q_ids = q_ids[:budget]
        p_ids = p_ids[: budget - len(q_ids)]
        if self.passage_first:
            return [tok.passage_id] + p_ids + [tok.sep_id] + [tok.query_id] + q_ids
        return [tok.query_id] + q_ids + [tok.sep_id] + [tok.passage_id] + p_ids

    def _batch(self, id_seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
        width = max(len(s) for s in id_seqs)
        pad = self.tokenizer.pad_id
        ids = torch.full((len(id_seqs), width), pad, dtype=torch.long)
        mask = torch.zeros((len(id_seqs), width), dtype=torch.bool)
        for i, seq in enumerate(id_seqs):
            ids[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
            mask[i, : len(seq)] = True
        return ids, mask

    def score_pairs(self, pairs: Sequence[tuple[str, str]], capture: bool = False) -> torch.Tensor:
        """Logits for (passage, query) pairs, shape [B]."""
        ids, mask = self._batch([self.pair_ids(p, q) for p, q in pairs])
        return self.model(ids, mask, capture_embed=capture)

    def score(self, passage: str, query: str) -> float:
        self.model.eval()
        with torch.no_grad():
            return float(self.score_pairs([(passage, query)])[0])


def listwise_probabilities(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over one candidate list's logits."""
    return torch.softmax(logits, dim=-1)


def build_training_list(
    candidates: CandidateList, gold_id: str, list_size: int
) -> list[str]:
    """Shortlist for one example with the gold guaranteed present; the gold
    replaces the tail candidate when retrieval missed it."""
    ids = candidates.ranked_ids()[:list_size]
    if gold_id in ids:
        return ids
    if len(ids) >= list_size:
        ids = ids[:-1]
    ids.append(gold_id)
    return ids


def train_reranker(
    model: CrossEncoder,
    data: CorpusSet,
    candidates: Sequence[CandidateList],
    step: TrainStep,
    *,
    list_size: int,
    epochs: int,
    fgm: FgmConfig | None = None,
) -> dict:
    """Listwise cross-entropy over each shortlist with the gold as target.
    Returns per-epoch losses plus the skipped-list count."""
    if len(candidates) != len(data.examples):
        raise ValueError("one candidate list per training example is required")
    lists = []
    skipped = 0
    for ex, cand in zip(data.examples, candidates):
        if ex.grounding_passage_id not in data.passages:
            skipped += 1
            continue
        ids = build_training_list(cand, ex.grounding_passage_id, list_size)
        texts = [data.passages[pid].text if pid in data.passages else None for pid in ids]
        if any(t is None for t in texts):
            skipped += 1
            continue
        lists.append((ex.input_x, ids, texts, ids.index(ex.grounding_passage_id)))
    if skipped:
        logger.warning("skipped %d training lists without a resolvable gold passage", skipped)

    trainer = Trainer(model.model, step)
    rng = random.Random(step.seed)
    history = []
    model.model.train()
    for epoch in range(epochs):
        order = list(range(len(lists)))
        rng.shuffle(order)
        losses = []
        for i in order:
            query, _, texts, gold_pos = lists[i]

            def loss_fn(capture: bool) -> torch.Tensor:
                logits = model.score_pairs([(t, query) for t in texts], capture=capture)
                target = torch.tensor(gold_pos, dtype=torch.long)
                return F.cross_entropy(logits.unsqueeze(0), target.unsqueeze(0))

            if fgm is not None and fgm.epsilon > 0:
                apply_adv = fgm.apply_every_step or trainer.will_step_next
                report = adversarial_step(model.model, loss_fn, trainer, fgm, apply_adv)
                losses.append(report.clean_loss)
            else:
                report = trainer.backward_and_step(loss_fn(False))
                losses.append(report.loss)
        history.append({"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else 0.0})
    model.model.eval()
    return {"epochs": history, "skipped": skipped}


def rerank(
    model: CrossEncoder,
    query: str,
    candidates: CandidateList,
    passages: Mapping[str, Passage],
) -> CandidateList:
    """Re-sort candidates by cross-encoder logit, descending; ties keep the
    prior order; scores become logits."""
    if len(candidates) == 0:
        return candidates
    texts = [passages[e.passage_id].text for e in candidates.entries]
    model.model.eval()
    with torch.no_grad():
        logits = model.score_pairs([(t, query) for t in texts]).tolist()
    order = sorted(range(len(logits)), key=lambda i: -logits[i])
    return CandidateList(
        query_id=candidates.query_id,
        entries=tuple(
            RetrievalScore(candidates.entries[i].passage_id, logits[i]) for i in order
        ),
    )


def rerank_corpus(
    model: CrossEncoder,
    data: CorpusSet,
    candidates: Sequence[CandidateList],
) -> list[CandidateList]:
    return [
        rerank(model, ex.input_x, cand, data.passages)
        for ex, cand in zip(data.examples, candidates)
    ]


def write_candidates_jsonl(
    lists: Sequence[CandidateList], path: str | Path, score_key: str = "scores"
) -> None:
    """Retrieval lists use score_key="scores"; reranked lists use "logits"."""
    with open(path, "w", encoding="utf-8") as f:
        for cl in lists:
            obj = {
                "query_id": cl.query_id,
                "passage_ids": cl.ranked_ids(),
                score_key: [e.score for e in cl.entries],
            }
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def read_candidates_jsonl(path: str | Path) -> list[CandidateList]:
    lists = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            scores = obj.get("scores", obj.get("logits"))
            lists.append(
                CandidateList(
                    query_id=obj["query_id"],
                    entries=tuple(
                        RetrievalScore(pid, score)
                        for pid, score in zip(obj["passage_ids"], scores)
                    ),
                )
            )
    return lists
