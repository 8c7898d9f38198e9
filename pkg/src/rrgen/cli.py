"""Command-line entry point binding corpus, retrieval, reranking, generation,
scheduling, and evaluation into reproducible runs.

Every invocation works against one run directory: config snapshot, artifacts,
and stamps land there, and re-runs with unchanged inputs are skipped.
Exit codes: 0 ok, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import report as report_mod
from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    dump_config,
    known_keys,
    load_config,
    parse_kv_text,
)
from .corpus import (
    CorpusRole,
    IngestError,
    Language,
    Origin,
    generate_synthetic_corpus,
    ingest_jsonl,
    read_passages_jsonl,
    write_passages_jsonl,
    write_turns_jsonl,
)
from .generator import FidGenerator, FidInput, fid_generate
from .metrics import generation_report, mrr_at_5, recall_at_k
from .neural.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .neural.models import EncoderConfig, Seq2SeqConfig, TransformerEncoder, TransformerSeq2Seq
from .neural.tokenizer import Tokenizer
from .reranker import CrossEncoder, CrossEncoderModel, read_candidates_jsonl, rerank
from .retriever import DualEncoder, build_index, load_index, retrieve, save_index, train_retriever
from .schedule import (
    PipelineData,
    PlanVariant,
    ablation_suite,
    build_synthetic_world,
    make_plan,
    run_plan,
)
from .util import canonical_json, derive_seed, set_determinism, sha256_file

logger = logging.getLogger("rrgen")

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2

USER_ERRORS = (ConfigError, IngestError, CheckpointError, FileNotFoundError)


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UserError(message)


def _flag_dest(key: str) -> str:
    return "cfg__" + key.replace(".", "__")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--profile", choices=["desk", "paper"], help="config profile")
    parser.add_argument("--seed", type=int, help="run seed (overrides config)")
    parser.add_argument("--run-dir", help="artifact directory (default runs/<command>)")
    for key in known_keys():
        if key in ("profile", "seed"):
            continue
        parser.add_argument(f"--{key}", dest=_flag_dest(key), metavar="V", help=argparse.SUPPRESS)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, object] = {}
    if args.profile:
        overrides["profile"] = args.profile
    for key in known_keys():
        if key in ("profile", "seed"):
            continue
        value = getattr(args, _flag_dest(key), None)
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _run_dir(args: argparse.Namespace, command: str) -> Path:
    path = Path(args.run_dir) if args.run_dir else Path("runs") / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot_config(run_dir: Path, config: RunConfig) -> None:
    (run_dir / "config.snapshot").write_text(dump_config(config), encoding="utf-8")


# --- idempotence stamps ------------------------------------------------------


def _stamp_path(run_dir: Path, name: str) -> Path:
    return run_dir / ".stamps" / f"{name}.json"


def _up_to_date(run_dir: Path, name: str, payload: dict, outputs: list[Path]) -> bool:
    path = _stamp_path(run_dir, name)
    if not path.exists():
        return False
    try:
        recorded = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return False
    if recorded.get("payload") != json.loads(canonical_json(payload)):
        return False
    if not all(p.exists() for p in outputs):
        return False
    logger.info("%s: inputs unchanged, outputs present; skipping", name)
    return True


def _write_stamp(run_dir: Path, name: str, payload: dict, outputs: list[Path]) -> None:
    path = _stamp_path(run_dir, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        canonical_json({"payload": json.loads(canonical_json(payload)),
                        "outputs": [str(p) for p in outputs]}) + "\n",
        encoding="utf-8",
    )


# --- model/tokenizer artifacts ----------------------------------------------


def _save_tokenizer(tokenizer: Tokenizer, path: Path) -> None:
    path.write_text(canonical_json(tokenizer.to_json()) + "\n", encoding="utf-8")


def _load_tokenizer(path: str | Path) -> Tokenizer:
    return Tokenizer.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _load_encoder(path: str | Path, kind: str) -> TransformerEncoder:
    header, tensors = load_checkpoint(path)
    if header["kind"] != kind:
        raise CheckpointError(f"{path}: checkpoint kind {header['kind']!r}, expected {kind!r}")
    model = TransformerEncoder(EncoderConfig.from_json_obj(header["config"]))
    model.load_state_dict(tensors)
    model.eval()
    return model


def _load_cross_encoder(path: str | Path) -> CrossEncoderModel:
    header, tensors = load_checkpoint(path)
    if header["kind"] != "reranker":
        raise CheckpointError(f"{path}: checkpoint kind {header['kind']!r}, expected 'reranker'")
    model = CrossEncoderModel(EncoderConfig.from_json_obj(header["config"]))
    model.load_state_dict(tensors)
    model.eval()
    return model


def _load_seq2seq(path: str | Path) -> TransformerSeq2Seq:
    header, tensors = load_checkpoint(path)
    if header["kind"] != "generator":
        raise CheckpointError(f"{path}: checkpoint kind {header['kind']!r}, expected 'generator'")
    model = TransformerSeq2Seq(Seq2SeqConfig.from_json_obj(header["config"]))
    model.load_state_dict(tensors)
    model.eval()
    return model


# --- data loading helpers ----------------------------------------------------

_ROLE_ORIGIN = {
    CorpusRole.U_HIGH_RESOURCE: Origin.HIGH_RESOURCE,
    CorpusRole.D_CROSS_LINGUAL: Origin.HIGH_RESOURCE,
    CorpusRole.D_PRIME_TRANSLATED: Origin.TRANSLATED,
    CorpusRole.D_T_DOWNSTREAM: Origin.NATIVE,
}


def _load_world_dir(path: Path, pre_k_turns: int) -> PipelineData:
    corpora = {}
    for role in CorpusRole:
        turns = path / f"{role.value.lower()}.turns.jsonl"
        passages = path / f"{role.value.lower()}.passages.jsonl"
        if not turns.exists():
            raise UserError(f"world dir is missing {turns.name}")
        pool = read_passages_jsonl(passages)
        corpora[role] = ingest_jsonl(
            turns, role, pool, origin=_ROLE_ORIGIN[role], pre_k_turns=pre_k_turns
        )
    dev_turns = path / "dev.turns.jsonl"
    if not dev_turns.exists():
        raise UserError(f"world dir is missing {dev_turns.name}")
    dev_pool = read_passages_jsonl(path / f"{CorpusRole.D_T_DOWNSTREAM.value.lower()}.passages.jsonl")
    dev = ingest_jsonl(dev_turns, CorpusRole.D_T_DOWNSTREAM, dev_pool, pre_k_turns=pre_k_turns)
    return PipelineData(corpora=corpora, dev=dev)


def _pipeline_data(args: argparse.Namespace, config: RunConfig) -> PipelineData:
    if args.world_dir:
        return _load_world_dir(Path(args.world_dir), config.retriever.preKturns)
    return build_synthetic_world(
        seed=args.world_seed if args.world_seed is not None else config.seed,
        n_passages=args.n_passages,
        n_hr_turns=args.hr_turns,
        n_dt_turns=args.dt_turns,
        n_dev_turns=args.dev_turns,
        vocab_size=args.vocab_size,
    )


def _world_payload(args: argparse.Namespace, config: RunConfig) -> dict:
    if args.world_dir:
        root = Path(args.world_dir)
        return {
            "world_dir": {
                p.name: sha256_file(p) for p in sorted(root.glob("*.jsonl"))
            }
        }
    return {
        "seed": args.world_seed if args.world_seed is not None else config.seed,
        "sizes": [args.n_passages, args.hr_turns, args.dt_turns,
                  args.dev_turns, args.vocab_size],
    }


def _add_world_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--world-dir", help="directory produced by `synth --world`")
    parser.add_argument("--world-seed", type=int, help="seed for the synthetic world (default: run seed)")
    parser.add_argument("--n-passages", type=int, default=60)
    parser.add_argument("--hr-turns", type=int, default=100)
    parser.add_argument("--dt-turns", type=int, default=80)
    parser.add_argument("--dev-turns", type=int, default=20)
    parser.add_argument("--vocab-size", type=int, default=80)


# --- subcommands --------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, config: RunConfig, run_dir: Path) -> int:
    seed = config.seed
    if args.world:
        payload = {
            "cmd": "synth-world", "seed": seed, "n_passages": args.n_passages,
            "hr_turns": args.hr_turns, "dt_turns": args.dt_turns,
            "dev_turns": args.dev_turns, "vocab_size": args.vocab_size,
        }
        world_dir = run_dir / "world"
        outputs = [world_dir / "dev.turns.jsonl"]
        if _up_to_date(run_dir, "synth", payload, outputs):
            return EXIT_OK
        world_dir.mkdir(parents=True, exist_ok=True)
        data = build_synthetic_world(
            seed=seed, n_passages=args.n_passages, n_hr_turns=args.hr_turns,
            n_dt_turns=args.dt_turns, n_dev_turns=args.dev_turns, vocab_size=args.vocab_size,
        )
        written = []
        for role, corpus in data.corpora.items():
            stem = role.value.lower()
            write_turns_jsonl(corpus.turn_records, world_dir / f"{stem}.turns.jsonl")
            write_passages_jsonl(
                sorted(corpus.passages.values(), key=lambda p: p.id),
                world_dir / f"{stem}.passages.jsonl",
            )
            written += [world_dir / f"{stem}.turns.jsonl", world_dir / f"{stem}.passages.jsonl"]
        write_turns_jsonl(data.dev.turn_records, world_dir / "dev.turns.jsonl")
        written.append(world_dir / "dev.turns.jsonl")
        _write_stamp(run_dir, "synth", payload, outputs)
        print(json.dumps({"world_dir": str(world_dir), "files": [str(p) for p in written]}))
        return EXIT_OK

    payload = {
        "cmd": "synth", "seed": seed, "n_passages": args.n_passages,
        "n_turns": args.n_turns, "vocab_size": args.vocab_size, "language": args.language,
    }
    turns_path = run_dir / "turns.jsonl"
    passages_path = run_dir / "passages.jsonl"
    if _up_to_date(run_dir, "synth", payload, [turns_path, passages_path]):
        return EXIT_OK
    passages, corpus = generate_synthetic_corpus(
        seed=seed, n_passages=args.n_passages, n_turns=args.n_turns,
        vocab_size=args.vocab_size, language=Language(args.language),
    )
    write_passages_jsonl(passages, passages_path)
    write_turns_jsonl(corpus.turn_records, turns_path)
    _write_stamp(run_dir, "synth", payload, [turns_path, passages_path])
    print(json.dumps({"turns": str(turns_path), "passages": str(passages_path),
                      "examples": corpus.size_N}))
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace, config: RunConfig, run_dir: Path) -> int:
    role = CorpusRole(args.role)
    payload = {
        "cmd": "ingest", "role": role.value, "preKturns": config.retriever.preKturns,
        "turns": sha256_file(args.turns),
        "passages": sha256_file(args.passages) if args.passages else None,
    }
    outputs = [run_dir / "corpus.normalized.jsonl", run_dir / "ingest_report.json"]
    if _up_to_date(run_dir, "ingest", payload, outputs):
        print((run_dir / "ingest_report.json").read_text(encoding="utf-8").strip())
        return EXIT_OK
    pool = read_passages_jsonl(args.passages) if args.passages else None
    corpus = ingest_jsonl(
        args.turns, role, pool,
        origin=_ROLE_ORIGIN[role], pre_k_turns=config.retriever.preKturns,
    )
    report = {
        "examples": corpus.size_N,
        "role": role.value,
        "language_counts": corpus.language_counts(),
        "passages": len(pool) if pool else 0,
    }
    write_turns_jsonl(corpus.turn_records, run_dir / "corpus.normalized.jsonl")
    (run_dir / "ingest_report.json").write_text(canonical_json(report) + "\n", encoding="utf-8")
    _write_stamp(run_dir, "ingest", payload, outputs)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_augment(args: argparse.Namespace, config: RunConfig, run_dir: Path) -> int:
    from .schedule import make_noise_lexicon
    from .xaug import FilterPolicy, StubTranslationClient, build_pseudo_set

    pool = read_passages_jsonl(args.passages)
    source = ingest_jsonl(
        args.turns, CorpusRole.U_HIGH_RESOURCE, pool,
        origin=Origin.HIGH_RESOURCE, pre_k_turns=config.retriever.preKturns,
    )
    payload = {
        "cmd": "augment", "seed": config.seed,
        "turns": sha256_file(args.turns), "passages": sha256_file(args.passages),
        "source": args.source_language, "target": args.target_language,
        "noise": args.noise_fraction,
        "policy": [args.max_length_tokens, args.min_length_tokens,
                   args.max_length_ratio, args.min_alpha_fraction],
    }
    out_turns = run_dir / "translated.turns.jsonl"
    out_passages = run_dir / "translated.passages.jsonl"
    out_report = run_dir / "augment_report.json"
    if _up_to_date(run_dir, "augment", payload, [out_turns, out_passages, out_report]):
        return EXIT_OK

    if args.lexicon:
        lexicon = json.loads(Path(args.lexicon).read_text(encoding="utf-8"))
    else:
        words = sorted({w for p in pool.values() for w in p.text.split()}
                       | {w for ex in source.examples for w in ex.input_x.split()}
                       | {w for ex in source.examples for w in ex.response_r.split()})
        lexicon = make_noise_lexicon(words, args.noise_fraction, derive_seed(config.seed, "lexicon"))
    client = StubTranslationClient(
        Language(args.source_language), Language(args.target_language), lexicon
    )
    policy = FilterPolicy(
        max_length_tokens=args.max_length_tokens,
        min_length_tokens=args.min_length_tokens,
        max_length_ratio=args.max_length_ratio,
        min_alpha_fraction=args.min_alpha_fraction,
    )
    pseudo, report = build_pseudo_set(source, client, policy)
    write_turns_jsonl(pseudo.turn_records, out_turns)
    write_passages_jsonl(sorted(pseudo.passages.values(), key=lambda p: p.id), out_passages)
    report_obj = {
        "total": report.total, "kept": report.kept,
        "dropped_filter": report.dropped_filter, "dropped_error": report.dropped_error,
    }
    out_report.write_text(canonical_json(report_obj) + "\n", encoding="utf-8")
    _write_stamp(run_dir, "augment", payload, [out_turns, out_passages, out_report])
    print(json.dumps(report_obj, sort_keys=True))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig, run_dir: Path) -> int:
    from .fgm import FgmConfig
    from .config import train_step_for
    from .generator import train_generator
    from .reranker import train_reranker

    pool = read_passages_jsonl(args.passages)
    data = ingest_jsonl(args.turns, CorpusRole(args.role), pool,
                        pre_k_turns=config.retriever.preKturns)
    payload = {
        "cmd": "train", "component": args.component, "seed": config.seed,
        "config": config_hash(config),
        "turns": sha256_file(args.turns), "passages": sha256_file(args.passages),
        "candidates": sha256_file(args.candidates) if args.candidates else None,
    }
    vocab_path = run_dir / "vocab.json"
    fgm = FgmConfig(epsilon=config.fgm.epsilon) if config.fgm.enabled else None

    texts = [ex.input_x for ex in data.examples] + [ex.response_r for ex in data.examples]
    texts += [p.text for p in pool.values()] + [config.generator.prompt]
    tokenizer = Tokenizer.from_texts(texts)

    if args.component == "retriever":
        outputs = [run_dir / "query_encoder.ckpt", run_dir / "passage_encoder.ckpt", vocab_path]
        if _up_to_date(run_dir, "train", payload, outputs):
            return EXIT_OK
        torch.manual_seed(derive_seed(config.seed, "init", "retriever"))
        model = DualEncoder.build(
            tokenizer, d_model=config.model.d_model, n_heads=config.model.n_heads,
            n_layers=config.model.n_layers, dropout=config.retriever.dropout,
            max_input_length=config.retriever.max_input_length,
        )
        history = train_retriever(
            model, data, train_step_for(config, "retriever"),
            epochs=config.retriever.epochs, batch_size=config.retriever.train_batch_size,
            fgm=fgm,
        )
        for name, module in (("query_encoder", model.query_encoder),
                             ("passage_encoder", model.passage_encoder)):
            save_checkpoint(module, run_dir / f"{name}.ckpt", kind=name,
                            config=module.config.to_json_obj(),
                            vocab_hash=tokenizer.vocab_hash(), lineage={"stage": "train"})
    elif args.component == "reranker":
        if not args.candidates:
            raise UserError("training the reranker requires --candidates")
        outputs = [run_dir / "reranker.ckpt", vocab_path]
        if _up_to_date(run_dir, "train", payload, outputs):
            return EXIT_OK
        candidates = read_candidates_jsonl(args.candidates)
        torch.manual_seed(derive_seed(config.seed, "init", "reranker"))
        model = CrossEncoder.build(
            tokenizer, d_model=config.model.d_model, n_heads=config.model.n_heads,
            n_layers=config.model.n_layers, dropout=config.reranker.dropout,
            max_input_length=config.reranker.max_input_length,
        )
        history = train_reranker(
            model, data, candidates, train_step_for(config, "reranker"),
            list_size=config.reranker.passages, epochs=config.reranker.epochs, fgm=fgm,
        )
        save_checkpoint(model.model, run_dir / "reranker.ckpt", kind="reranker",
                        config=model.model.config.to_json_obj(),
                        vocab_hash=tokenizer.vocab_hash(), lineage={"stage": "train"})
    else:  # generator
        if not args.candidates:
            raise UserError("training the generator requires --candidates")
        outputs = [run_dir / "generator.ckpt", vocab_path]
        if _up_to_date(run_dir, "train", payload, outputs):
            return EXIT_OK
        candidates = read_candidates_jsonl(args.candidates)
        torch.manual_seed(derive_seed(config.seed, "init", "generator"))
        model = FidGenerator.build(
            tokenizer, d_model=config.model.d_model, n_heads=config.model.n_heads,
            n_layers=config.model.n_layers, dropout=config.generator.dropout,
            max_input_length=config.generator.max_input_length,
            max_output_length=config.generator.max_output_length,
        )
        history = train_generator(
            model, data, candidates, train_step_for(config, "generator"),
            n_passages=config.generator.passages4gen, epochs=config.generator.epochs,
            prompt=config.generator.prompt,
        )
        save_checkpoint(model.model, run_dir / "generator.ckpt", kind="generator",
                        config=model.model.config.to_json_obj(),
                        vocab_hash=tokenizer.vocab_hash(), lineage={"stage": "train"})

    _save_tokenizer(tokenizer, vocab_path)
    (run_dir / "train_history.json").write_text(canonical_json(history) + "\n", encoding="utf-8")
    _write_stamp(run_dir, "train", payload, outputs)
    print(json.dumps({"component": args.component, "outputs": [str(p) for p in outputs]}))
    return EXIT_OK


def cmd_build_index(args: argparse.Namespace, config: RunConfig, run_dir: Path) -> int:
    pool = read_passages_jsonl(args.passages)
    payload = {
        "cmd": "build-index", "passages": sha256_file(args.passages),
        "encoder": sha256_file(args.passage_encoder), "mode": args.mode,
        "clusters": args.clusters, "probe": args.probe, "seed": config.seed,
    }
    out = run_dir / "index.bin"
    if _up_to_date(run_dir, "build-index", payload, [out]):
        return EXIT_OK
    tokenizer = _load_tokenizer(args.vocab)
    encoder = _load_encoder(args.passage_encoder, "passage_encoder")
    model = DualEncoder(tokenizer, encoder, encoder,
                        max_input_length=config.retriever.max_input_length)
    passages = sorted(pool.values(), key=lambda p: p.id)
    index = build_index(passages, model, mode=args.mode,
                        n_clusters=args.clusters, n_probe=args.probe, seed=config.seed)
    save_index(index, out)
    _write_stamp(run_dir, "build-index", payload, [out])
    print(json.dumps({"index": str(out), "size": index.size, "mode": index.mode}))
    return EXIT_OK


def cmd_retrieve(args: argparse.Namespace, config: RunConfig, run_dir: Path) -> int:
    tokenizer = _load_tokenizer(args.vocab)
    encoder = _load_encoder(args.query_encoder, "query_encoder")
    model = DualEncoder(tokenizer, encoder, encoder,
                        max_input_length=config.retriever.max_input_length)
    index = load_index(args.index)
    if args.query is not None:
        result = retrieve(index, model, args.query, args.k)
        print(json.dumps({
            "query_id": result.query_id, "query": args.query,
            "passage_ids": result.ranked_ids(),
            "scores": [e.score for e in result.entries],
        }, sort_keys=True))
        return EXIT_OK
    if not args.turns:
        raise UserError("retrieve needs --query or --turns")
    payload = {
        "cmd": "retrieve", "k": args.k, "turns": sha256_file(args.turns),
        "index": sha256_file(args.index), "encoder": sha256_file(args.query_encoder),
        "vocab": sha256_file(args.vocab), "preKturns": config.retriever.preKturns,
    }
    out = run_dir / "candidates.jsonl"
    if _up_to_date(run_dir, "retrieve", payload, [out]):
        return EXIT_OK
    data = ingest_jsonl(args.turns, CorpusRole.D_T_DOWNSTREAM,
                        pre_k_turns=config.retriever.preKturns)
    with open(out, "w", encoding="utf-8") as f:
        for i, ex in enumerate(data.examples):
            result = retrieve(index, model, ex.input_x, args.k, query_id=f"q{i:05d}")
            f.write(json.dumps({
                "query_id": result.query_id, "query": ex.input_x,
                "gold_id": ex.grounding_passage_id,
                "passage_ids": result.ranked_ids(),
                "scores": [e.score for e in result.entries],
            }, sort_keys=True) + "\n")
    _write_stamp(run_dir, "retrieve", payload, [out])
    print(json.dumps({"candidates": str(out), "queries": data.size_N}))
    return EXIT_OK


def _read_query_lists(path: str) -> list[dict]:
    lists = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "query" not in obj:
                raise UserError(f"{path} line {line_no}: missing query text field")
            lists.append(obj)
    return lists


def cmd_rerank(args: argparse.Namespace, config: RunConfig, run_dir: Path) -> int:
    from .retriever import CandidateList, RetrievalScore

    n_passages = args.passages if args.passages else config.reranker.passages
    payload = {
        "cmd": "rerank", "passages": n_passages,
        "model": sha256_file(args.model), "vocab": sha256_file(args.vocab),
        "candidates": sha256_file(args.candidates),
        "passage_file": sha256_file(args.passage_file),
        "max_input_length": config.reranker.max_input_length,
    }
    out = run_dir / "reranked.jsonl"
    if _up_to_date(run_dir, "rerank", payload, [out]):
        return EXIT_OK
    tokenizer = _load_tokenizer(args.vocab)
    model = CrossEncoder(tokenizer, _load_cross_encoder(args.model),
                         max_input_length=config.reranker.max_input_length)
    pool = read_passages_jsonl(args.passage_file)
    with open(out, "w", encoding="utf-8") as f:
        for obj in _read_query_lists(args.candidates):
            entries = tuple(
                RetrievalScore(pid, score)
                for pid, score in zip(obj["passage_ids"][:n_passages],
                                      obj.get("scores", obj.get("logits"))[:n_passages])
            )
            cl = CandidateList(query_id=obj["query_id"], entries=entries)
            result = rerank(model, obj["query"], cl, pool)
            record = {
                "query_id": result.query_id, "query": obj["query"],
                "passage_ids": result.ranked_ids(),
                "logits": [e.score for e in result.entries],
            }
            if "gold_id" in obj:
                record["gold_id"] = obj["gold_id"]
            f.write(json.dumps(record, sort_keys=True) + "\n")
    _write_stamp(run_dir, "rerank", payload, [out])
    print(json.dumps({"reranked": str(out)}))
    return EXIT_OK


def cmd_generate(args: argparse.Namespace, config: RunConfig, run_dir: Path) -> int:
    n = args.passages4gen if args.passages4gen else config.generator.passages4gen
    beam = args.beam if args.beam else config.generator.beam_size
    payload = {
        "cmd": "generate", "passages4gen": n, "beam": beam,
        "model": sha256_file(args.model), "vocab": sha256_file(args.vocab),
        "candidates": sha256_file(args.candidates),
        "passage_file": sha256_file(args.passage_file),
        "prompt": config.generator.prompt,
        "max_input_length": config.generator.max_input_length,
        "max_output_length": config.generator.max_output_length,
    }
    out = run_dir / "responses.jsonl"
    if _up_to_date(run_dir, "generate", payload, [out]):
        return EXIT_OK
    tokenizer = _load_tokenizer(args.vocab)
    gen = FidGenerator(
        tokenizer, _load_seq2seq(args.model),
        max_input_length=config.generator.max_input_length,
        max_output_length=config.generator.max_output_length,
    )
    pool = read_passages_jsonl(args.passage_file)
    with open(out, "w", encoding="utf-8") as f:
        for obj in _read_query_lists(args.candidates):
            texts = [pool[pid].text for pid in obj["passage_ids"][:n] if pid in pool]
            if not texts:
                raise UserError(f"candidate list {obj['query_id']} has no resolvable passages")
            fid = FidInput(query=obj["query"], passages=tuple(texts),
                           prompt=config.generator.prompt)
            result = fid_generate(gen, fid, beam_size=beam)
            f.write(json.dumps({
                "query_id": obj["query_id"], "response": result.text,
                "beam_score": result.beam_score,
            }, sort_keys=True) + "\n")
    _write_stamp(run_dir, "generate", payload, [out])
    print(json.dumps({"responses": str(out)}))
    return EXIT_OK


def _load_plan_args(args: argparse.Namespace, config: RunConfig) -> tuple[PlanVariant, RunConfig]:
    from .config import apply_overrides

    variant = args.variant
    if args.plan:
        kv = parse_kv_text(Path(args.plan).read_text(encoding="utf-8"))
        variant = kv.pop("variant", variant)
        if "seed" in kv:
            config = apply_overrides(config, {"seed": kv.pop("seed")})
        if kv:
            config = apply_overrides(config, kv)
    if variant is None:
        raise UserError("run-plan needs --variant or a plan file naming one")
    try:
        return PlanVariant(variant), config
    except ValueError:
        raise UserError(
            f"unknown variant {variant!r} (choose from "
            f"{', '.join(v.value for v in PlanVariant)})"
        ) from None


def cmd_run_plan(args: argparse.Namespace, config: RunConfig, run_dir: Path) -> int:
    variant, config = _load_plan_args(args, config)
    set_determinism(config.seed)
    data = _pipeline_data(args, config)
    plan = make_plan(variant)
    record = run_plan(plan, data, config, config.seed, run_dir=run_dir)
    report_mod.write_stage_metrics_csv(record, run_dir / "stage_metrics.csv")
    report_mod.plot_stage_metrics(record, run_dir / "stage_metrics.png")
    print(canonical_json(record.to_json_obj()))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: RunConfig, run_dir: Path) -> int:
    payload = {
        "cmd": "ablate", "seed": config.seed, "config": config_hash(config),
        "world": _world_payload(args, config),
    }
    outputs = [run_dir / "ablation.csv", run_dir / "ablation.png", run_dir / "ablation.json"]
    if _up_to_date(run_dir, "ablate", payload, outputs):
        print((run_dir / "ablation.json").read_text(encoding="utf-8").strip())
        return EXIT_OK
    set_determinism(config.seed)
    data = _pipeline_data(args, config)
    rows = ablation_suite(data, config, config.seed)
    report_mod.write_ablation_csv(rows, run_dir / "ablation.csv")
    report_mod.plot_ablation(rows, run_dir / "ablation.png")
    table = [
        {"variant": r.variant, "f1": r.f1, "bleu": r.bleu, "rouge_l": r.rouge_l, "total": r.total}
        for r in rows
    ]
    (run_dir / "ablation.json").write_text(canonical_json(table) + "\n", encoding="utf-8")
    _write_stamp(run_dir, "ablate", payload, outputs)
    print(canonical_json(table))
    return EXIT_OK


def _read_lines(path: str) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_evaluate(args: argparse.Namespace, config: RunConfig, run_dir: Path) -> int:
    payload = {
        "cmd": "evaluate", "pred": sha256_file(args.pred), "ref": sha256_file(args.ref),
        "gold_ranks": sha256_file(args.gold_ranks) if args.gold_ranks else None,
    }
    outputs = [run_dir / "metrics.json", run_dir / "metrics.csv", run_dir / "metrics.png"]
    if _up_to_date(run_dir, "evaluate", payload, outputs):
        print((run_dir / "metrics.json").read_text(encoding="utf-8").strip())
        return EXIT_OK
    predictions = _read_lines(args.pred)
    references = _read_lines(args.ref)
    if len(predictions) != len(references):
        raise UserError(
            f"--pred has {len(predictions)} lines but --ref has {len(references)}"
        )
    r_at = None
    mrr = None
    if args.gold_ranks:
        ranked = []
        with open(args.gold_ranks, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                gold = obj.get("gold_id")
                ranked_ids = obj.get("ranked_ids", obj.get("passage_ids"))
                if gold is None or ranked_ids is None:
                    raise UserError("--gold-ranks lines need gold_id and ranked_ids")
                ranked.append((gold, ranked_ids))
        r_at = {k: recall_at_k(ranked, k) for k in (1, 5, 20)}
        mrr = mrr_at_5(ranked)
    report = generation_report(predictions, references, r_at=r_at, mrr=mrr)
    (run_dir / "metrics.json").write_text(canonical_json(report.to_json_obj()) + "\n", encoding="utf-8")
    report_mod.write_metrics_csv(report, run_dir / "metrics.csv")
    report_mod.plot_metrics(report, run_dir / "metrics.png")
    _write_stamp(run_dir, "evaluate", payload, outputs)
    print(canonical_json(report.to_json_obj()))
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="rrgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    _add_common(p)
    p.add_argument("--n-passages", type=int, default=100)
    p.add_argument("--n-turns", type=int, default=200)
    p.add_argument("--vocab-size", type=int, default=120)
    p.add_argument("--language", default="synthetic")
    p.add_argument("--world", action="store_true", help="emit the full cross-lingual world")
    p.add_argument("--hr-turns", type=int, default=100)
    p.add_argument("--dt-turns", type=int, default=80)
    p.add_argument("--dev-turns", type=int, default=20)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate a turns JSONL file")
    _add_common(p)
    p.add_argument("--turns", required=True)
    p.add_argument("--passages")
    p.add_argument("--role", default=CorpusRole.D_T_DOWNSTREAM.value,
                   choices=[r.value for r in CorpusRole])
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("augment", help="build a translated pseudo corpus")
    _add_common(p)
    p.add_argument("--turns", required=True)
    p.add_argument("--passages", required=True)
    p.add_argument("--source-language", default="en", choices=[l.value for l in Language])
    p.add_argument("--target-language", default="fr", choices=[l.value for l in Language])
    p.add_argument("--lexicon", help="JSON token->token lexicon for the stub client")
    p.add_argument("--noise-fraction", type=float, default=0.1)
    p.add_argument("--max-length-tokens", type=int, default=128)
    p.add_argument("--min-length-tokens", type=int, default=1)
    p.add_argument("--max-length-ratio", type=float, default=3.0)
    p.add_argument("--min-alpha-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train one pipeline component")
    _add_common(p)
    p.add_argument("--component", required=True, choices=["retriever", "reranker", "generator"])
    p.add_argument("--turns", required=True)
    p.add_argument("--passages", required=True)
    p.add_argument("--role", default=CorpusRole.D_T_DOWNSTREAM.value,
                   choices=[r.value for r in CorpusRole])
    p.add_argument("--candidates", help="candidate lists JSONL (reranker/generator)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-index", help="embed passages into a MIPS index")
    _add_common(p)
    p.add_argument("--passages", required=True)
    p.add_argument("--passage-encoder", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--mode", default="exact", choices=["exact", "approximate"])
    p.add_argument("--clusters", type=int, default=16)
    p.add_argument("--probe", type=int, default=4)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("retrieve", help="top-k passages for a query or a turns file")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--query-encoder", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--query")
    p.add_argument("--turns")
    p.add_argument("--k", type=int, default=20)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("rerank", help="rerank candidate lists with the cross-encoder")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--passage-file", required=True)
    p.add_argument("--passages", type=int, help="shortlist length (default from config)")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("generate", help="generate responses from candidate lists")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--passage-file", required=True)
    p.add_argument("--passages4gen", type=int, help="passages per generation (default from config)")
    p.add_argument("--beam", type=int, help="beam size (default from config)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run-plan", help="run a staged training plan")
    _add_common(p)
    p.add_argument("--variant", choices=[v.value for v in PlanVariant])
    p.add_argument("--plan", help="plan file (key = value; variant, seed, config overrides)")
    _add_world_args(p)
    p.set_defaults(func=cmd_run_plan)

    p = sub.add_parser("ablate", help="run the ablation suite")
    _add_common(p)
    _add_world_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("evaluate", help="score predictions against references")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--gold-ranks")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _config_from_args(args)
        set_determinism(config.seed)
        run_dir = _run_dir(args, args.command)
        _snapshot_config(run_dir, config)
        return args.func(args, config, run_dir)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER_ERROR
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER_ERROR
    except Exception:
        import traceback

        traceback.print_exc()
        return EXIT_INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
