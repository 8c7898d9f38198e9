"""Dual-encoder passage retrieval: in-batch-negative training, inner-product
scoring, and an exact or cluster-routed approximate MIPS index."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import CorpusSet, Passage
from .fgm import FgmConfig, adversarial_step
from .neural.checkpoint import state_hash
from .neural.models import EncoderConfig, TransformerEncoder
from .neural.tokenizer import Tokenizer
from .neural.training import Trainer, TrainStep, set_train_mode

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RetrievalScore:
    passage_id: str
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"score for {self.passage_id!r} is not finite")


@dataclass(frozen=True)
class CandidateList:
    query_id: str
    entries: tuple[RetrievalScore, ...]

    def __post_init__(self):
        ids = [e.passage_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"candidate list {self.query_id!r} has duplicate passage ids")
        scores = [e.score for e in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"candidate list {self.query_id!r} scores must be non-increasing")

    def ranked_ids(self) -> list[str]:
        return [e.passage_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


class DualEncoder:
    """Separate query and passage encoders over a shared tokenizer."""

    def __init__(
        self,
        tokenizer: Tokenizer,
        query_encoder: TransformerEncoder,
        passage_encoder: TransformerEncoder,
        max_input_length: int = 64,
    ):
        self.tokenizer = tokenizer
        self.query_encoder = query_encoder
        self.passage_encoder = passage_encoder
        self.max_input_length = max_input_length

    @classmethod
    def build(
        cls,
        tokenizer: Tokenizer,
        d_model: int = 64,
        n_heads: int = 4,
        n_layers: int = 2,
        dropout: float = 0.1,
        max_input_length: int = 64,
    ) -> "DualEncoder":
        config = EncoderConfig(
            vocab_size=tokenizer.vocab_size,
            d_model=d_model,
            n_heads=n_heads,
            n_layers=n_layers,
            dropout=dropout,
        )
        return cls(tokenizer, TransformerEncoder(config), TransformerEncoder(config), max_input_length)

    @property
    def encoders(self) -> list[TransformerEncoder]:
        return [self.query_encoder, self.passage_encoder]

    def query_ids(self, text: str) -> list[int]:
        tok = self.tokenizer
        return [tok.bos_id] + tok.encode_turns(text, self.max_input_length - 1)

    def passage_ids(self, text: str) -> list[int]:
        tok = self.tokenizer
        return [tok.bos_id] + tok.encode(text, self.max_input_length - 1)

    def _batch(self, id_seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
        width = max(len(s) for s in id_seqs)
        pad = self.tokenizer.pad_id
        ids = torch.full((len(id_seqs), width), pad, dtype=torch.long)
        mask = torch.zeros((len(id_seqs), width), dtype=torch.bool)
        for i, seq in enumerate(id_seqs):
            ids[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
            mask[i, : len(seq)] = True
        return ids, mask

    def embed_queries(self, texts: Sequence[str], capture: bool = False) -> torch.Tensor:
        ids, mask = self._batch([self.query_ids(t) for t in texts])
        pooled, _ = self.query_encoder(ids, mask, capture_embed=capture)
        return pooled

    def embed_passages(self, texts: Sequence[str], capture: bool = False) -> torch.Tensor:
        ids, mask = self._batch([self.passage_ids(t) for t in texts])
        pooled, _ = self.passage_encoder(ids, mask, capture_embed=capture)
        return pooled

    def score(self, query: str, passage: str) -> float:
        """Inner product of the pooled query and passage embeddings."""
        set_train_mode(self.encoders, False)
        with torch.no_grad():
            q = self.embed_queries([query])[0]
            z = self.embed_passages([passage])[0]
        return float(q @ z)


def in_batch_nll(scores: torch.Tensor) -> torch.Tensor:
    """Mean NLL of the diagonal (gold) entries under a row-wise softmax."""
    targets = torch.arange(scores.shape[0], dtype=torch.long)
    return F.cross_entropy(scores, targets)


def in_batch_loss(model: DualEncoder, queries: Sequence[str], passages: Sequence[str],
                  capture: bool = False) -> torch.Tensor:
    """NLL of each gold passage under a softmax over all in-batch passages."""
    q = model.embed_queries(queries, capture=capture)
    z = model.embed_passages(passages, capture=capture)
    return in_batch_nll(q @ z.T)


def plan_batches(n: int, batch_size: int, rng: random.Random) -> list[list[int]]:
    """Shuffled index batches covering every example; a trailing singleton is
    folded into the previous batch so nothing is dropped."""
    order = list(range(n))
    rng.shuffle(order)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) >= 2 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def train_retriever(
    model: DualEncoder,
    data: CorpusSet,
    step: TrainStep,
    *,
    epochs: int,
    batch_size: int,
    fgm: FgmConfig | None = None,
) -> list[dict]:
    """In-batch-negatives training; returns one summary dict per epoch."""
    if batch_size < 2:
        raise ValueError(
            f"batch_size must be >= 2 for in-batch negatives, got {batch_size}"
        )
    if not data.passages:
        raise ValueError("corpus has no bound passage pool")
    if epochs > 0 and len(data.examples) < 2:
        raise ValueError(
            "in-batch negatives require at least 2 examples (a batch of 1 has no negatives)"
        )
    pairs = [(ex.input_x, data.passages[ex.grounding_passage_id].text) for ex in data.examples]
    trainer = Trainer(model.encoders, step)
    rng = random.Random(step.seed)
    history = []
    set_train_mode(model.encoders, True)
    for epoch in range(epochs):
        losses = []
        for batch in plan_batches(len(pairs), batch_size, rng):
            queries = [pairs[i][0] for i in batch]
            golds = [pairs[i][1] for i in batch]

            def loss_fn(capture: bool) -> torch.Tensor:
                return in_batch_loss(model, queries, golds, capture=capture)

            if fgm is not None and fgm.epsilon > 0:
                apply_adv = fgm.apply_every_step or trainer.will_step_next
                report = adversarial_step(model.encoders, loss_fn, trainer, fgm, apply_adv)
                losses.append(report.clean_loss)
            else:
                report = trainer.backward_and_step(loss_fn(False))
                losses.append(report.loss)
        history.append({"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else 0.0})
    set_train_mode(model.encoders, False)
    return history


# --- MIPS index --------------------------------------------------------------


def _kmeans(matrix: np.ndarray, n_clusters: int, seed: int, n_iters: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd iterations with random-row init; empty clusters reseed."""
    rng = np.random.RandomState(seed)
    n = matrix.shape[0]
    n_clusters = min(n_clusters, n)
    centroids = matrix[rng.choice(n, size=n_clusters, replace=False)].astype(np.float64)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(n_iters):
        d2 = ((matrix[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        for c in range(n_clusters):
            members = matrix[labels == c]
            if len(members) == 0:
                centroids[c] = matrix[rng.randint(n)]
            else:
                centroids[c] = members.mean(axis=0)
    return centroids.astype(np.float32), labels


@dataclass
class MipsIndex:
    """Immutable inner-product index over passage embeddings."""

    ids: tuple[str, ...]
    matrix: np.ndarray  # [N, d] float32
    mode: str  # "exact" | "approximate"
    encoder_hash: str
    centroids: np.ndarray | None = None  # [C, d], approximate mode only
    labels: np.ndarray | None = None  # [N], cluster per row
    n_probe: int = 4

    def __post_init__(self):
        if self.mode not in ("exact", "approximate"):
            raise ValueError(f"unknown index mode {self.mode!r}")
        if len(self.ids) != self.matrix.shape[0]:
            raise ValueError("id table and matrix row count differ")
        # Rank of each row under ascending passage id: the tie-break order.
        self._id_rank = np.argsort(np.argsort(np.array(self.ids)))

    @property
    def size(self) -> int:
        return len(self.ids)

    def _top_among(self, rows: np.ndarray, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        scores = self.matrix[rows] @ query
        order = np.lexsort((self._id_rank[rows], -scores))[:k]
        return [(self.ids[rows[i]], float(scores[i])) for i in order]

    def search(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        """Top-k (passage id, inner product); exact mode breaks score ties by
        ascending passage id."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if self.size == 0:
            return []
        if k > self.size:
            logger.warning("k=%d exceeds index size %d; returning all", k, self.size)
            k = self.size
        query = np.asarray(query, dtype=np.float32)
        if self.mode == "exact":
            rows = np.arange(self.size)
            return self._top_among(rows, query, k)
        centroid_scores = self.centroids @ query
        probe = np.argsort(-centroid_scores, kind="stable")[: self.n_probe]
        rows = np.flatnonzero(np.isin(self.labels, probe))
        if len(rows) == 0:
            rows = np.arange(self.size)
        return self._top_among(rows, query, min(k, len(rows)))


def embed_passage_pool(model: DualEncoder, passages: Sequence[Passage],
                       batch_size: int = 32) -> np.ndarray:
    set_train_mode(model.encoders, False)
    chunks = []
    with torch.no_grad():
        for start in range(0, len(passages), batch_size):
            texts = [p.text for p in passages[start : start + batch_size]]
            chunks.append(model.embed_passages(texts).numpy().astype(np.float32))
    if not chunks:
        return np.zeros((0, model.passage_encoder.config.d_model), dtype=np.float32)
    return np.concatenate(chunks, axis=0)


def build_index(
    passages: Sequence[Passage],
    model: DualEncoder,
    mode: str = "exact",
    n_clusters: int = 16,
    n_probe: int = 4,
    seed: int = 0,
) -> MipsIndex:
    """One embedding row per passage, using the passage encoder in eval mode."""
    if mode not in ("exact", "approximate"):
        raise ValueError(f"unknown index mode {mode!r}")
    matrix = embed_passage_pool(model, passages)
    ids = tuple(p.id for p in passages)
    encoder_hash = state_hash(model.passage_encoder)
    if mode == "exact":
        return MipsIndex(ids=ids, matrix=matrix, mode="exact", encoder_hash=encoder_hash)
    if len(passages) == 0:
        centroids = np.zeros((0, matrix.shape[1]), dtype=np.float32)
        labels = np.zeros(0, dtype=np.int64)
    else:
        centroids, labels = _kmeans(matrix.astype(np.float64), n_clusters, seed)
    return MipsIndex(
        ids=ids, matrix=matrix, mode="approximate", encoder_hash=encoder_hash,
        centroids=centroids, labels=labels, n_probe=n_probe,
    )


def embed_query(model: DualEncoder, query: str) -> np.ndarray:
    set_train_mode(model.encoders, False)
    with torch.no_grad():
        return model.embed_queries([query])[0].numpy().astype(np.float32)


def retrieve(index: MipsIndex, model: DualEncoder, query: str, k: int,
             query_id: str = "q0") -> CandidateList:
    hits = index.search(embed_query(model, query), k)
    return CandidateList(
        query_id=query_id,
        entries=tuple(RetrievalScore(pid, score) for pid, score in hits),
    )


def retrieve_corpus(
    index: MipsIndex, model: DualEncoder, data: CorpusSet, k: int
) -> list[CandidateList]:
    """One candidate list per example, keyed by position in the corpus."""
    return [
        retrieve(index, model, ex.input_x, k, query_id=f"{data.role.value}:{i}")
        for i, ex in enumerate(data.examples)
    ]


def save_index(index: MipsIndex, path: str | Path) -> None:
    header = {
        "format_version": INDEX_FORMAT_VERSION,
        "n": index.size,
        "d": int(index.matrix.shape[1]),
        "mode": index.mode,
        "encoder_hash": index.encoder_hash,
        "ids": list(index.ids),
        "n_probe": index.n_probe,
        "n_clusters": 0 if index.centroids is None else int(index.centroids.shape[0]),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())
        if index.mode == "approximate":
            f.write(np.ascontiguousarray(index.centroids, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(index.labels, dtype="<i8").tobytes())


def load_index(path: str | Path) -> MipsIndex:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format_version") != INDEX_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported index format {header.get('format_version')!r}")
        n, d = header["n"], header["d"]
        matrix = np.frombuffer(f.read(n * d * 4), dtype="<f4").reshape(n, d).copy()
        centroids = labels = None
        if header["mode"] == "approximate":
            c = header["n_clusters"]
            centroids = np.frombuffer(f.read(c * d * 4), dtype="<f4").reshape(c, d).copy()
            labels = np.frombuffer(f.read(n * 8), dtype="<i8").copy()
    return MipsIndex(
        ids=tuple(header["ids"]), matrix=matrix, mode=header["mode"],
        encoder_hash=header["encoder_hash"], centroids=centroids, labels=labels,
        n_probe=header["n_probe"],
    )
