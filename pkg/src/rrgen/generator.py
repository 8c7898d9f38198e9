"""Fusion-in-decoder generation: each passage is encoded independently with
the shared prompt+query prefix, encoder states are concatenated into one
memory, and the decoder cross-attends over all of it."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import CorpusSet
from .neural.models import Seq2SeqConfig, TransformerSeq2Seq
from .neural.tokenizer import Tokenizer
from .neural.training import Trainer, TrainStep
from .retriever import CandidateList

logger = logging.getLogger(__name__)

DEFAULT_PROMPT = "please generate the response:"


@dataclass(frozen=True)
class FidInput:
    query: str
    passages: tuple[str, ...]
    prompt: str = DEFAULT_PROMPT

    def __post_init__(self):
        if len(self.passages) < 1:
            raise ValueError("at least one passage is required")


@dataclass(frozen=True)
class GenerationOutput:
    text: str
    token_ids: tuple[int, ...]
    beam_score: float


class FidGenerator:
    """Seq2seq model plus the sequence-assembly and decoding policies."""

    def __init__(
        self,
        tokenizer: Tokenizer,
        model: TransformerSeq2Seq,
        max_input_length: int = 64,
        max_output_length: int = 24,
        max_fused_length: int = 4096,
    ):
        self.tokenizer = tokenizer
        self.model = model
        self.max_input_length = max_input_length
        self.max_output_length = max_output_length
        self.max_fused_length = max_fused_length

    @classmethod
    def build(
        cls,
        tokenizer: Tokenizer,
        d_model: int = 64,
        n_heads: int = 4,
        n_layers: int = 2,
        dropout: float = 0.1,
        max_input_length: int = 64,
        max_output_length: int = 24,
        max_fused_length: int = 4096,
    ) -> "FidGenerator":
        config = Seq2SeqConfig(
            vocab_size=tokenizer.vocab_size,
            d_model=d_model,
            n_heads=n_heads,
            n_layers=n_layers,
            dropout=dropout,
        )
        return cls(tokenizer, TransformerSeq2Seq(config), max_input_length,
                   max_output_length, max_fused_length)


def assemble_fid_inputs(fid: FidInput, tokenizer: Tokenizer, max_input_length: int) -> list[list[int]]:
    """One id sequence per passage: prompt tokens, the query mark and query,
    then the passage mark and passage. Right truncation cuts passage tokens
    first since they sit last."""
    prefix = (
        tokenizer.encode(fid.prompt)
        + [tokenizer.query_id]
        + tokenizer.encode_turns(fid.query)
        + [tokenizer.passage_id]
    )
    seqs = []
    for passage in fid.passages:
        seq = prefix + tokenizer.encode(passage)
        seqs.append(seq[:max_input_length])
    return seqs


def encode_fused(gen: FidGenerator, id_seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    """Encode each sequence independently and concatenate states along the
    token axis; positions restart at 0 per passage."""
    lengths = [len(s) for s in id_seqs]
    total = sum(lengths)
    if total > gen.max_fused_length:
        raise ValueError(
            f"fused memory length {total} exceeds cap {gen.max_fused_length}: "
            f"n={len(id_seqs)}, lengths={lengths}"
        )
    states = [
        gen.model.encode(torch.tensor([list(seq)], dtype=torch.long))
        for seq in id_seqs
    ]
    return torch.cat(states, dim=1)


def fused_logits(gen: FidGenerator, fid: FidInput, target_ids: Sequence[int]) -> torch.Tensor:
    """Teacher-forced decoder logits over the fused memory, shape [T, vocab]."""
    memory = encode_fused(gen, assemble_fid_inputs(fid, gen.tokenizer, gen.max_input_length))
    tgt = torch.tensor([list(target_ids)], dtype=torch.long)
    return gen.model.decode(tgt, memory)[0]


def _decode_step(gen: FidGenerator, memory: torch.Tensor, prefix_ids: list[int]) -> torch.Tensor:
    """Log-probabilities of the next token after the given decoder prefix."""
    tgt = torch.tensor([prefix_ids], dtype=torch.long)
    logits = gen.model.decode(tgt, memory)[0, -1]
    return torch.log_softmax(logits, dim=-1)


def greedy_generate(gen: FidGenerator, fid: FidInput) -> GenerationOutput:
    """Plain argmax decoding; the beam_size=1 reference."""
    gen.model.eval()
    with torch.no_grad():
        memory = encode_fused(gen, assemble_fid_inputs(fid, gen.tokenizer, gen.max_input_length))
        tok = gen.tokenizer
        ids: list[int] = []
        score = 0.0
        for _ in range(gen.max_output_length):
            log_probs = _decode_step(gen, memory, [tok.bos_id] + ids)
            next_id = int(log_probs.argmax())
            score += float(log_probs[next_id])
            ids.append(next_id)
            if next_id == tok.eos_id:
                break
    return GenerationOutput(
        text=tok.decode(ids),
        token_ids=tuple(ids),
        beam_score=score / max(1, len(ids)),
    )


@dataclass(order=True)
class _Beam:
    norm_score: float
    ids: list[int] = field(compare=False)
    log_prob: float = field(compare=False)
    finished: bool = field(compare=False)


def fid_generate(gen: FidGenerator, fid: FidInput, beam_size: int = 3) -> GenerationOutput:
    """Beam search with length-normalized log probability (exponent 1)."""
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    gen.model.eval()
    tok = gen.tokenizer
    with torch.no_grad():
        memory = encode_fused(gen, assemble_fid_inputs(fid, gen.tokenizer, gen.max_input_length))
        beams = [_Beam(norm_score=0.0, ids=[], log_prob=0.0, finished=False)]
        for _ in range(gen.max_output_length):
            if all(b.finished for b in beams):
                break
            candidates: list[_Beam] = [b for b in beams if b.finished]
            for beam in beams:
                if beam.finished:
                    continue
                log_probs = _decode_step(gen, memory, [tok.bos_id] + beam.ids)
                top = torch.topk(log_probs, k=min(beam_size, log_probs.shape[0]))
                for value, idx in zip(top.values.tolist(), top.indices.tolist()):
                    ids = beam.ids + [idx]
                    lp = beam.log_prob + value
                    candidates.append(
                        _Beam(
                            norm_score=lp / len(ids),
                            ids=ids,
                            log_prob=lp,
                            finished=(idx == tok.eos_id),
                        )
                    )
            candidates.sort(key=lambda b: -b.norm_score)
            beams = candidates[:beam_size]
        best = max(beams, key=lambda b: b.norm_score)
    return GenerationOutput(
        text=tok.decode(best.ids),
        token_ids=tuple(best.ids),
        beam_score=best.norm_score,
    )


def _target_ids(tokenizer: Tokenizer, response: str, max_output_length: int) -> tuple[list[int], bool]:
    ids = tokenizer.encode(response)
    truncated = len(ids) > max_output_length - 1
    ids = ids[: max_output_length - 1]
    return [tokenizer.bos_id] + ids + [tokenizer.eos_id], truncated


def build_generation_passages(
    candidates: CandidateList,
    gold_id: str,
    n_passages: int,
    rng: random.Random,
) -> list[str]:
    """Top-n candidate ids with the gold injected at a random position when
    retrieval missed it."""
    ids = candidates.ranked_ids()[:n_passages]
    if gold_id not in ids:
        if len(ids) >= n_passages:
            ids = ids[:-1]
        ids.insert(rng.randrange(len(ids) + 1), gold_id)
    return ids


def train_generator(
    gen: FidGenerator,
    data: CorpusSet,
    candidates: Sequence[CandidateList],
    step: TrainStep,
    *,
    n_passages: int,
    epochs: int,
    prompt: str = DEFAULT_PROMPT,
) -> dict:
    """Token-level cross-entropy with teacher forcing against fused memories."""
    if len(candidates) != len(data.examples):
        raise ValueError("one candidate list per training example is required")
    trainer = Trainer(gen.model, step)
    rng = random.Random(step.seed)
    truncated_count = 0
    history = []
    gen.model.train()
    for epoch in range(epochs):
        order = list(range(len(data.examples)))
        rng.shuffle(order)
        losses = []
        for i in order:
            ex = data.examples[i]
            pids = build_generation_passages(
                candidates[i], ex.grounding_passage_id, n_passages, rng
            )
            fid = FidInput(
                query=ex.input_x,
                passages=tuple(data.passages[pid].text for pid in pids if pid in data.passages),
                prompt=prompt,
            )
            target, truncated = _target_ids(gen.tokenizer, ex.response_r, gen.max_output_length)
            truncated_count += int(truncated)
            memory = encode_fused(gen, assemble_fid_inputs(fid, gen.tokenizer, gen.max_input_length))
            tgt = torch.tensor([target[:-1]], dtype=torch.long)
            labels = torch.tensor([target[1:]], dtype=torch.long)
            logits = gen.model.decode(tgt, memory)
            loss = F.cross_entropy(logits.transpose(1, 2), labels)
            report = trainer.backward_and_step(loss)
            losses.append(report.loss)
        history.append({"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else 0.0})
    gen.model.eval()
    if truncated_count:
        logger.warning("truncated %d over-length responses to max_output_length", truncated_count)
    return {"epochs": history, "truncated": truncated_count}


def generate_for_corpus(
    gen: FidGenerator,
    data: CorpusSet,
    candidates: Sequence[CandidateList],
    n_passages: int,
    beam_size: int,
    prompt: str = DEFAULT_PROMPT,
) -> list[GenerationOutput]:
    outputs = []
    for ex, cand in zip(data.examples, candidates):
        pids = cand.ranked_ids()[:n_passages]
        texts = [data.passages[pid].text for pid in pids if pid in data.passages]
        if not texts:
            texts = [data.passages[ex.grounding_passage_id].text]
        fid = FidInput(query=ex.input_x, passages=tuple(texts), prompt=prompt)
        outputs.append(fid_generate(gen, fid, beam_size=beam_size))
    return outputs
