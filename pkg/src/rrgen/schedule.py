"""Staged training orchestration: cross-lingual pretrain, translated-data
train, downstream fine-tune, plus ablation variants, with per-stage metric
snapshots, mixture audits, and checkpoint lineage."""

from __future__ import annotations

import copy
import json
import logging
import random
import statistics
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import torch

from . import generator as gen_mod
from . import reranker as rr_mod
from . import retriever as ret_mod
from .config import RunConfig, config_hash, train_step_for
from .corpus import (
    CorpusRole,
    CorpusSet,
    Language,
    Origin,
    Passage,
    TrainingExample,
    generate_synthetic_corpus,
    make_word_vocab,
)
from .fgm import FgmConfig
from .metrics import generation_report, mrr_at_5, recall_at_k
from .neural.checkpoint import load_into, save_checkpoint, state_hash
from .neural.tokenizer import Tokenizer
from .util import canonical_json, derive_seed, multiset_hash, sha256_text
from .xaug import FilterPolicy, StubTranslationClient, build_pseudo_set

logger = logging.getLogger(__name__)

RECALL_KS = (1, 5, 20)


class PlanVariant(str, Enum):
    THREE_STAGE = "three_stage"
    TWO_STAGE = "two_stage"
    FINETUNE_ONLY = "finetune_only"
    TWO_STAGE_NO_ZH_VI = "two_stage_no_zh_vi"
    TWO_STAGE_NO_EN_FR = "two_stage_no_en_fr"
    NO_PROMPT = "no_prompt"


@dataclass(frozen=True)
class StageSpec:
    name: str
    mixture: frozenset[CorpusRole]
    init_from: str  # "scratch" | "previous"
    drop_pseudo_language: Language | None = None
    use_prompt: bool = True
    overrides: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.mixture:
            raise ValueError(f"stage {self.name!r} has an empty data mixture")
        if self.init_from not in ("scratch", "previous"):
            raise ValueError(f"stage {self.name!r}: init_from must be scratch or previous")


@dataclass(frozen=True)
class StagePlan:
    variant: PlanVariant
    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a plan needs at least one stage")
        final = self.stages[-1]
        if final.mixture != frozenset({CorpusRole.D_T_DOWNSTREAM}):
            raise ValueError("the final stage must train on downstream data only")

    def plan_id(self) -> str:
        payload = [
            self.variant.value,
            [
                {
                    "name": s.name,
                    "mixture": sorted(r.value for r in s.mixture),
                    "init_from": s.init_from,
                    "drop": s.drop_pseudo_language.value if s.drop_pseudo_language else None,
                    "use_prompt": s.use_prompt,
                    "overrides": sorted(s.overrides),
                }
                for s in self.stages
            ],
        ]
        return sha256_text(canonical_json(payload))[:16]


_PRETRAIN = StageSpec(
    name="pretrain_cross_lingual",
    mixture=frozenset({CorpusRole.D_CROSS_LINGUAL, CorpusRole.D_T_DOWNSTREAM}),
    init_from="scratch",
)


def _translated_stage(init_from: str, drop: Language | None = None, use_prompt: bool = True) -> StageSpec:
    return StageSpec(
        name="train_translated",
        mixture=frozenset({CorpusRole.D_PRIME_TRANSLATED, CorpusRole.D_T_DOWNSTREAM}),
        init_from=init_from,
        drop_pseudo_language=drop,
        use_prompt=use_prompt,
    )


def _finetune_stage(init_from: str, use_prompt: bool = True) -> StageSpec:
    return StageSpec(
        name="finetune_downstream",
        mixture=frozenset({CorpusRole.D_T_DOWNSTREAM}),
        init_from=init_from,
        use_prompt=use_prompt,
    )


def make_plan(variant: PlanVariant | str) -> StagePlan:
    """Stage sequences for the full schedule and its ablations."""
    variant = PlanVariant(variant)
    if variant == PlanVariant.THREE_STAGE:
        stages = (_PRETRAIN, _translated_stage("previous"), _finetune_stage("previous"))
    elif variant == PlanVariant.TWO_STAGE:
        stages = (_translated_stage("scratch"), _finetune_stage("previous"))
    elif variant == PlanVariant.FINETUNE_ONLY:
        stages = (_finetune_stage("scratch"),)
    elif variant == PlanVariant.TWO_STAGE_NO_ZH_VI:
        stages = (_translated_stage("scratch", drop=Language.VI), _finetune_stage("previous"))
    elif variant == PlanVariant.TWO_STAGE_NO_EN_FR:
        stages = (_translated_stage("scratch", drop=Language.FR), _finetune_stage("previous"))
    elif variant == PlanVariant.NO_PROMPT:
        stages = (
            StageSpec(_PRETRAIN.name, _PRETRAIN.mixture, "scratch", use_prompt=False),
            _translated_stage("previous", use_prompt=False),
            _finetune_stage("previous", use_prompt=False),
        )
    else:  # pragma: no cover
        raise ValueError(f"unknown plan variant {variant!r}")
    return StagePlan(variant=variant, stages=stages)


@dataclass
class PipelineData:
    """Everything a plan run consumes: role-keyed corpora plus a held-out
    downstream dev split (with its own bound retrieval pool)."""

    corpora: dict[CorpusRole, CorpusSet]
    dev: CorpusSet


@dataclass
class StageRecord:
    name: str
    mixture: list[str]
    declared_mixture_hash: str
    batched_mixture_hash: str
    checkpoints: dict[str, str]
    parent_checkpoints: dict[str, str]
    metrics: dict

    def to_json_obj(self) -> dict:
        return {
            "name": self.name,
            "mixture": self.mixture,
            "declared_mixture_hash": self.declared_mixture_hash,
            "batched_mixture_hash": self.batched_mixture_hash,
            "checkpoints": self.checkpoints,
            "parent_checkpoints": self.parent_checkpoints,
            "metrics": self.metrics,
        }


@dataclass
class RunRecord:
    plan_id: str
    variant: str
    seed: int
    config_hash: str
    stages: list[StageRecord] = field(default_factory=list)

    @property
    def final_metrics(self) -> dict:
        return self.stages[-1].metrics if self.stages else {}

    def to_json_obj(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "variant": self.variant,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "stages": [s.to_json_obj() for s in self.stages],
            "final_metrics": self.final_metrics,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(canonical_json(self.to_json_obj()) + "\n", encoding="utf-8")


class PipelineModels:
    """The three trained components sharing one tokenizer."""

    def __init__(self, tokenizer: Tokenizer, config: RunConfig, seed: int):
        self.tokenizer = tokenizer
        m = config.model
        torch.manual_seed(derive_seed(seed, "init", "retriever"))
        self.retriever = ret_mod.DualEncoder.build(
            tokenizer, d_model=m.d_model, n_heads=m.n_heads, n_layers=m.n_layers,
            dropout=config.retriever.dropout,
            max_input_length=config.retriever.max_input_length,
        )
        torch.manual_seed(derive_seed(seed, "init", "reranker"))
        self.reranker = rr_mod.CrossEncoder.build(
            tokenizer, d_model=m.d_model, n_heads=m.n_heads, n_layers=m.n_layers,
            dropout=config.reranker.dropout,
            max_input_length=config.reranker.max_input_length,
        )
        torch.manual_seed(derive_seed(seed, "init", "generator"))
        self.generator = gen_mod.FidGenerator.build(
            tokenizer, d_model=m.d_model, n_heads=m.n_heads, n_layers=m.n_layers,
            dropout=config.generator.dropout,
            max_input_length=config.generator.max_input_length,
            max_output_length=config.generator.max_output_length,
        )

    def named_modules_for_checkpoint(self) -> dict[str, torch.nn.Module]:
        return {
            "query_encoder": self.retriever.query_encoder,
            "passage_encoder": self.retriever.passage_encoder,
            "reranker": self.reranker.model,
            "generator": self.generator.model,
        }

    def checkpoint_ids(self) -> dict[str, str]:
        return {name: state_hash(m) for name, m in self.named_modules_for_checkpoint().items()}


def example_multiset_hash(examples: Sequence[TrainingExample]) -> str:
    return multiset_hash(ex.content_hash() for ex in examples)


def declared_mixture_hash(data: PipelineData, stage: StageSpec) -> str:
    """Hash of the example multiset the stage declares, straight from the
    role sets (the audit reference)."""
    hashes: list[str] = []
    for role in sorted(stage.mixture, key=lambda r: r.value):
        for ex in data.corpora[role].examples:
            if (
                role == CorpusRole.D_PRIME_TRANSLATED
                and stage.drop_pseudo_language is not None
                and ex.language == stage.drop_pseudo_language
            ):
                continue
            hashes.append(ex.content_hash())
    return multiset_hash(hashes)


def merge_mixture(data: PipelineData, stage: StageSpec) -> CorpusSet:
    """Concatenate the stage's role sets (filtering dropped pseudo pairs)
    into one training set over the union passage pool."""
    examples: list[TrainingExample] = []
    passages: dict[str, Passage] = {}
    roles = sorted(stage.mixture, key=lambda r: r.value)
    for role in roles:
        part = data.corpora[role]
        for ex in part.examples:
            if (
                role == CorpusRole.D_PRIME_TRANSLATED
                and stage.drop_pseudo_language is not None
                and ex.language == stage.drop_pseudo_language
            ):
                continue
            examples.append(ex)
        for pid, passage in part.passages.items():
            existing = passages.get(pid)
            if existing is not None and existing.text != passage.text:
                raise ValueError(f"conflicting texts for passage id {pid!r} in one mixture")
            passages[pid] = passage
    return CorpusSet(examples=tuple(examples), role=roles[0], passages=passages)


def _stage_config(config: RunConfig, stage: StageSpec) -> RunConfig:
    if not stage.overrides:
        return config
    from .config import apply_overrides

    return apply_overrides(copy.deepcopy(config), dict(stage.overrides))


def evaluate_models(
    models: PipelineModels,
    dev: CorpusSet,
    config: RunConfig,
    use_prompt: bool = True,
) -> dict:
    """Dev-set snapshot: retrieval recalls, reranked MRR, generation scores."""
    pool = sorted(dev.passages.values(), key=lambda p: p.id)
    index = ret_mod.build_index(pool, models.retriever, mode="exact")
    k_retrieve = max(max(RECALL_KS), config.reranker.passages)
    retrieved = ret_mod.retrieve_corpus(index, models.retriever, dev, k_retrieve)
    golds = [ex.grounding_passage_id for ex in dev.examples]

    ranked = [(g, cl.ranked_ids()) for g, cl in zip(golds, retrieved)]
    retrieval_metrics = {
        f"r_at_{k}": recall_at_k(ranked, k) for k in RECALL_KS
    }
    retrieval_metrics["mrr_at_5"] = mrr_at_5(ranked)

    shortlists = [
        rr_mod.CandidateList(cl.query_id, cl.entries[: config.reranker.passages])
        for cl in retrieved
    ]
    reranked = rr_mod.rerank_corpus(models.reranker, dev, shortlists)
    ranked_rr = [(g, cl.ranked_ids()) for g, cl in zip(golds, reranked)]
    rerank_metrics = {
        f"r_at_{k}": recall_at_k(ranked_rr, k) for k in RECALL_KS
    }
    rerank_metrics["mrr_at_5"] = mrr_at_5(ranked_rr)

    prompt = config.generator.prompt if use_prompt else ""
    outputs = gen_mod.generate_for_corpus(
        models.generator, dev, reranked,
        n_passages=config.generator.passages4gen,
        beam_size=config.generator.beam_size,
        prompt=prompt,
    )
    report = generation_report(
        [o.text for o in outputs],
        [ex.response_r for ex in dev.examples],
        r_at={k: retrieval_metrics[f"r_at_{k}"] for k in RECALL_KS},
        mrr=retrieval_metrics["mrr_at_5"],
    )
    return {
        "retrieval": retrieval_metrics,
        "reranked": rerank_metrics,
        "generation": report.to_json_obj(),
    }


def _train_stage(
    models: PipelineModels,
    merged: CorpusSet,
    config: RunConfig,
    stage: StageSpec,
    seed: int,
    stage_idx: int,
) -> None:
    fgm = FgmConfig(epsilon=config.fgm.epsilon) if config.fgm.enabled else None
    # Re-seed the torch RNG (dropout) per component so a stage's trajectory
    # depends only on (seed, stage, component), never on what ran before it.
    torch.manual_seed(derive_seed(seed, stage_idx, "retriever", "torch"))
    ret_step = train_step_for(config, "retriever", derive_seed(seed, stage_idx, "retriever"))
    ret_mod.train_retriever(
        models.retriever, merged, ret_step,
        epochs=config.retriever.epochs,
        batch_size=config.retriever.train_batch_size,
        fgm=fgm,
    )

    pool = sorted(merged.passages.values(), key=lambda p: p.id)
    index = ret_mod.build_index(pool, models.retriever, mode="exact")
    retrieved = ret_mod.retrieve_corpus(index, models.retriever, merged, config.reranker.passages)

    torch.manual_seed(derive_seed(seed, stage_idx, "reranker", "torch"))
    rr_step = train_step_for(config, "reranker", derive_seed(seed, stage_idx, "reranker"))
    rr_mod.train_reranker(
        models.reranker, merged, retrieved, rr_step,
        list_size=config.reranker.passages,
        epochs=config.reranker.epochs,
        fgm=fgm,
    )
    reranked = rr_mod.rerank_corpus(models.reranker, merged, retrieved)

    torch.manual_seed(derive_seed(seed, stage_idx, "generator", "torch"))
    gen_step = train_step_for(config, "generator", derive_seed(seed, stage_idx, "generator"))
    prompt = config.generator.prompt if stage.use_prompt else ""
    gen_mod.train_generator(
        models.generator, merged, reranked, gen_step,
        n_passages=config.generator.passages4gen,
        epochs=config.generator.epochs,
        prompt=prompt,
    )


def run_plan(
    plan: StagePlan,
    data: PipelineData,
    config: RunConfig,
    seed: int,
    run_dir: str | Path | None = None,
) -> RunRecord:
    """Execute the plan's stages in order, each initializing from the prior
    stage's models, snapshotting dev metrics after every stage."""
    missing = sorted(
        role.value
        for stage in plan.stages
        for role in stage.mixture
        if role not in data.corpora
    )
    if missing:
        raise ValueError(f"corpora missing for roles: {', '.join(dict.fromkeys(missing))}")

    tokenizer = build_tokenizer(data, config)
    models = PipelineModels(tokenizer, config, seed)
    record = RunRecord(
        plan_id=plan.plan_id(),
        variant=plan.variant.value,
        seed=seed,
        config_hash=config_hash(config),
    )
    out_dir = Path(run_dir) if run_dir is not None else None
    parent_ids = {name: "scratch" for name in models.named_modules_for_checkpoint()}

    for stage_idx, stage in enumerate(plan.stages):
        stage_config = _stage_config(config, stage)
        merged = merge_mixture(data, stage)
        declared = declared_mixture_hash(data, stage)
        batched = example_multiset_hash(merged.examples)

        stage_dir = out_dir / f"stage{stage_idx}_{stage.name}" if out_dir else None
        resumed = False
        if stage_dir is not None and _try_resume(models, stage_dir, declared, stage_config, seed):
            logger.info("stage %d (%s): resumed from %s", stage_idx, stage.name, stage_dir)
            resumed = True
        if not resumed:
            _train_stage(models, merged, stage_config, stage, seed, stage_idx)

        checkpoint_ids = models.checkpoint_ids()
        if stage_dir is not None and not resumed:
            _save_stage(models, stage_dir, stage, declared, stage_config, seed, parent_ids)

        metrics = evaluate_models(models, data.dev, stage_config, use_prompt=stage.use_prompt)
        record.stages.append(
            StageRecord(
                name=stage.name,
                mixture=sorted(r.value for r in stage.mixture),
                declared_mixture_hash=declared,
                batched_mixture_hash=batched,
                checkpoints=checkpoint_ids,
                parent_checkpoints=dict(parent_ids),
                metrics=metrics,
            )
        )
        parent_ids = checkpoint_ids

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        record.save(out_dir / "run_record.json")
    return record


def build_tokenizer(data: PipelineData, config: RunConfig) -> Tokenizer:
    """One vocabulary over all corpora, dev split, and the prompt."""
    texts: list[str] = [config.generator.prompt]
    for corpus in list(data.corpora.values()) + [data.dev]:
        for ex in corpus.examples:
            texts.append(ex.input_x)
            texts.append(ex.response_r)
        for passage in corpus.passages.values():
            texts.append(passage.text)
    return Tokenizer.from_texts(texts)


def _stage_stamp(declared: str, config: RunConfig, seed: int) -> str:
    return sha256_text(canonical_json([declared, config_hash(config), seed]))[:16]


def _save_stage(
    models: PipelineModels,
    stage_dir: Path,
    stage: StageSpec,
    declared: str,
    config: RunConfig,
    seed: int,
    parent_ids: Mapping[str, str],
) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    vocab_hash = models.tokenizer.vocab_hash()
    for name, module in models.named_modules_for_checkpoint().items():
        model_config = (
            module.config.to_json_obj()
            if hasattr(module.config, "to_json_obj")
            else dict(module.config)
        )
        save_checkpoint(
            module,
            stage_dir / f"{name}.ckpt",
            kind=name,
            config=model_config,
            vocab_hash=vocab_hash,
            lineage={
                "stage": stage.name,
                "parent": parent_ids[name],
                "stamp": _stage_stamp(declared, config, seed),
            },
        )
    (stage_dir / "stamp.json").write_text(
        canonical_json({"stamp": _stage_stamp(declared, config, seed)}) + "\n",
        encoding="utf-8",
    )


def _try_resume(
    models: PipelineModels, stage_dir: Path, declared: str, config: RunConfig, seed: int
) -> bool:
    stamp_path = stage_dir / "stamp.json"
    if not stamp_path.exists():
        return False
    try:
        stamp = json.loads(stamp_path.read_text(encoding="utf-8"))["stamp"]
    except (json.JSONDecodeError, KeyError):
        return False
    if stamp != _stage_stamp(declared, config, seed):
        return False
    try:
        for name, module in models.named_modules_for_checkpoint().items():
            load_into(module, stage_dir / f"{name}.ckpt", expected_kind=name)
    except Exception as e:
        logger.warning("resume from %s failed (%s); retraining", stage_dir, e)
        return False
    return True


ABLATION_VARIANTS = (
    PlanVariant.THREE_STAGE,
    PlanVariant.TWO_STAGE,
    PlanVariant.FINETUNE_ONLY,
    PlanVariant.TWO_STAGE_NO_ZH_VI,
    PlanVariant.TWO_STAGE_NO_EN_FR,
    PlanVariant.NO_PROMPT,
)


@dataclass(frozen=True)
class AblationRow:
    variant: str
    f1: float
    bleu: float
    rouge_l: float
    total: float


def ablation_suite(
    data: PipelineData, config: RunConfig, seed: int,
    variants: Sequence[PlanVariant] = ABLATION_VARIANTS,
) -> list[AblationRow]:
    """Run every ablation variant and collect final generation metrics."""
    rows = []
    for variant in variants:
        record = run_plan(make_plan(variant), data, config, seed)
        g = record.final_metrics["generation"]
        rows.append(
            AblationRow(
                variant=variant.value,
                f1=g["f1"],
                bleu=g["bleu"],
                rouge_l=g["rouge_l"],
                total=g["total"],
            )
        )
    return rows


def median_total_over_seeds(
    data: PipelineData, config: RunConfig, variant: PlanVariant, seeds: Sequence[int]
) -> float:
    totals = [
        run_plan(make_plan(variant), data, config, seed).final_metrics["generation"]["total"]
        for seed in seeds
    ]
    return statistics.median(totals)


# --- synthetic cross-lingual world -------------------------------------------


def make_noise_lexicon(vocab: Sequence[str], noise_fraction: float, seed: int) -> dict[str, str]:
    """Deterministic pseudo-translation lexicon: most words map to
    themselves (related-language overlap), a fraction to a variant form."""
    rng = random.Random(seed)
    lexicon = {}
    for word in vocab:
        if rng.random() < noise_fraction:
            lexicon[word] = word[::-1] + "e"
        else:
            lexicon[word] = word
    return lexicon


def build_synthetic_world(
    seed: int,
    n_passages: int = 60,
    n_hr_turns: int = 100,
    n_dt_turns: int = 80,
    n_dev_turns: int = 20,
    vocab_size: int = 80,
    noise_fraction: float = 0.1,
) -> PipelineData:
    """Desk-scale stand-in for the cross-lingual setup: two high-resource
    corpora, their stub-translated pseudo sets, and a downstream corpus with
    a held-out dev split, all sharing one base vocabulary."""
    vocab = make_word_vocab(random.Random(derive_seed(seed, "vocab")), vocab_size)

    hr_parts = []
    for lang, target in ((Language.EN, Language.FR), (Language.ZH, Language.VI)):
        _, part = generate_synthetic_corpus(
            seed=derive_seed(seed, "hr", lang.value),
            n_passages=n_passages // 2,
            n_turns=n_hr_turns // 2,
            language=lang,
            role=CorpusRole.U_HIGH_RESOURCE,
            origin=Origin.HIGH_RESOURCE,
            id_prefix=f"{lang.value}_",
            vocab=vocab,
        )
        hr_parts.append((part, target))

    hr_examples = tuple(ex for part, _ in hr_parts for ex in part.examples)
    hr_pool = {pid: p for part, _ in hr_parts for pid, p in part.passages.items()}
    hr_records = tuple(rec for part, _ in hr_parts for rec in part.turn_records)
    u_set = CorpusSet(hr_examples, CorpusRole.U_HIGH_RESOURCE, hr_pool, hr_records)
    d_cross = u_set.with_role(CorpusRole.D_CROSS_LINGUAL)

    policy = FilterPolicy(max_length_tokens=256, min_length_tokens=1, max_length_ratio=4.0)
    pseudo_parts = []
    for part, target in hr_parts:
        client = StubTranslationClient(
            part.examples[0].language, target,
            make_noise_lexicon(vocab, noise_fraction, derive_seed(seed, "lex", target.value)),
        )
        pseudo, _ = build_pseudo_set(part, client, policy)
        pseudo_parts.append(pseudo)
    d_prime = CorpusSet(
        examples=tuple(ex for p in pseudo_parts for ex in p.examples),
        role=CorpusRole.D_PRIME_TRANSLATED,
        passages={pid: p for part in pseudo_parts for pid, p in part.passages.items()},
        turn_records=tuple(rec for p in pseudo_parts for rec in p.turn_records),
    )

    dt_parts = []
    for lang in (Language.FR, Language.VI):
        _, part = generate_synthetic_corpus(
            seed=derive_seed(seed, "dt", lang.value),
            n_passages=n_passages // 2,
            n_turns=(n_dt_turns + n_dev_turns) // 2,
            language=lang,
            role=CorpusRole.D_T_DOWNSTREAM,
            origin=Origin.NATIVE,
            id_prefix=f"t{lang.value}_",
            vocab=vocab,
        )
        dt_parts.append(part)
    dt_pool = {pid: p for part in dt_parts for pid, p in part.passages.items()}
    dt_examples: list[TrainingExample] = []
    dev_examples: list[TrainingExample] = []
    dt_records = []
    dev_records = []
    for part in dt_parts:
        cut = len(part.examples) - n_dev_turns // 2
        dt_examples.extend(part.examples[:cut])
        dev_examples.extend(part.examples[cut:])
        dt_records.extend(part.turn_records[:cut])
        dev_records.extend(part.turn_records[cut:])
    d_t = CorpusSet(tuple(dt_examples), CorpusRole.D_T_DOWNSTREAM, dt_pool, tuple(dt_records))
    dev = CorpusSet(tuple(dev_examples), CorpusRole.D_T_DOWNSTREAM, dt_pool, tuple(dev_records))

    return PipelineData(
        corpora={
            CorpusRole.U_HIGH_RESOURCE: u_set,
            CorpusRole.D_CROSS_LINGUAL: d_cross,
            CorpusRole.D_PRIME_TRANSLATED: d_prime,
            CorpusRole.D_T_DOWNSTREAM: d_t,
        },
        dev=dev,
    )
