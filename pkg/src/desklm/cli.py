"""Command-line entry point: one manifest drives the whole experiment graph.

    desklm build-corpus manifest.json
    desklm augment manifest.json [--stub | --backend-url URL]
    desklm train-tokenizer manifest.json
    desklm pretrain manifest.json
    desklm instruct-tune manifest.json --strategy merged|seq-switch-wiki|...
    desklm evaluate manifest.json
    desklm finetune-eval manifest.json
    desklm report manifest.json
    desklm run-all manifest.json

Exit codes: 0 success, 1 stage failure (partial artifacts preserved),
2 invalid manifest or arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


from . import augment as augment_mod
from . import corpus as corpus_mod
from . import curriculum as curriculum_mod
from . import evaluate as evaluate_mod
from . import report as report_mod
from . import train as train_mod
from .bpe import BpeTokenizer, train_bpe
from .manifest import (STRATEGY_FLAGS, ManifestError, RunManifest, load_manifest,
                       provenance_meta, resolve_input, write_provenance)
from .model import LanguageModel, ModelConfig

log = logging.getLogger(__name__)

BACKEND_URL_ENV = "DESKLM_BACKEND_URL"


def strategy_model_id(strategy: str) -> str:
    return "it_" + strategy.removeprefix("seq_")


# -- stages ------------------------------------------------------------------------

def stage_build_corpus(manifest: RunManifest, args=None) -> list[Path]:
    cfg = manifest.section("corpus")
    strip = cfg.get("strip_chars")
    min_words = cfg.get("min_words", 2)
    fraction = cfg.get("split_fraction", 0.9)
    cap = cfg.get("budget_cap")

    documents: list[corpus_mod.Document] = []
    pairs: list[corpus_mod.PromptReplyPair] = []
    for entry in cfg["inputs"]:
        path = resolve_input(manifest, entry["path"])
        if entry["kind"] == "text":
            documents.extend(corpus_mod.read_text_documents(
                path, entry["source"], strip_set=strip, min_words=min_words))
        else:
            dialogues = corpus_mod.read_dialogue_jsonl(path, strip_set=strip)
            for dialogue_id in sorted(dialogues):
                turns = corpus_mod.merge_speaker_turns(dialogues[dialogue_id])
                pairs.extend(corpus_mod.extract_prompt_reply_pairs(turns, dialogue_id))
                doc = corpus_mod.clean_document(
                    " ".join(t.text for t in turns), strip_set=strip, min_words=min_words,
                    doc_id=f"{entry['source']}-{dialogue_id}", source=entry["source"])
                if doc is not None:
                    documents.append(doc)

    documents = corpus_mod.canonical_documents(documents)
    ledger = corpus_mod.WordBudgetLedger(cap=cap)
    kept = []
    for doc in documents:
        if ledger.offer(doc, bucket="pretrain"):
            kept.append(doc)
        else:
            log.warning("budget cap: dropping %s (%d words)", doc.id, doc.word_count)
    documents = kept

    pair_stats = corpus_mod.pair_word_stats(pairs)
    ledger.credit("switchboard", pair_stats.unique_words, "instruction")

    split = corpus_mod.split_train_val(documents, fraction=fraction, seed=manifest.seed)
    out = manifest.out_dir / "corpus"
    corpus_mod.write_documents_jsonl(out / "documents.jsonl", documents)
    corpus_mod.write_documents_jsonl(out / "pretrain_train.jsonl",
                                     corpus_mod.canonical_documents(split.train))
    corpus_mod.write_documents_jsonl(out / "pretrain_val.jsonl",
                                     corpus_mod.canonical_documents(split.validation))
    pairs.sort(key=lambda p: (p.dialogue_id, p.window_index))
    corpus_mod.write_pairs_jsonl(out / "pairs.jsonl", pairs)
    ledger.write_csv(out / "ledger.csv")
    stats_payload = {
        **provenance_meta(manifest, "build-corpus"),
        "pairs": pair_stats.__dict__,
        "n_documents": len(documents),
        "pretrain_words": ledger.pretrain_total,
    }
    (out / "pair_stats.json").write_text(
        json.dumps(stats_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    artifacts = [out / n for n in ("documents.jsonl", "pretrain_train.jsonl",
                                   "pretrain_val.jsonl", "pairs.jsonl", "ledger.csv",
                                   "pair_stats.json")]
    write_provenance(manifest, "build-corpus", artifacts)
    return artifacts


def _make_backend(manifest: RunManifest, args):
    cfg = manifest.section("augment")
    url = os.environ.get(BACKEND_URL_ENV) or cfg.get("backend_url")
    timeout_ms = cfg.get("timeout_ms", 30_000)
    if args is not None:
        if getattr(args, "backend_url", None):
            url = args.backend_url
        if getattr(args, "timeout_ms", None):
            timeout_ms = args.timeout_ms
        if getattr(args, "stub", False):
            url = None
    if url:
        return augment_mod.HTTPBackend(url, timeout_ms=timeout_ms)
    return augment_mod.StubBackend()


def stage_augment(manifest: RunManifest, args=None) -> list[Path]:
    cfg = manifest.section("augment")
    corpus_cfg = manifest.section("corpus")
    article_source = corpus_cfg.get("article_source", "simplewiki")
    documents = corpus_mod.read_documents_jsonl(manifest.out_dir / "corpus" / "documents.jsonl")
    articles = [d for d in documents if d.source == article_source]
    if not articles:
        raise RuntimeError(f"no articles with source {article_source!r}; "
                           "run build-corpus with a matching text input first")
    backend = _make_backend(manifest, args)
    max_retries = cfg.get("max_retries", 2)
    if args is not None and getattr(args, "max_retries", None) is not None:
        max_retries = args.max_retries
    items, skipped = augment_mod.augment_articles(
        articles, backend, max_retries=max_retries,
        min_answer_words=cfg.get("min_answer_words", augment_mod.DEFAULT_MIN_ANSWER_WORDS))
    out = manifest.out_dir / "augment"
    augment_mod.write_qa_jsonl(out / "qa_items.jsonl", items)
    summary = {
        **provenance_meta(manifest, "augment"),
        "backend": backend.name,
        "n_articles": len(articles),
        "n_items": len(items),
        "skipped": skipped,
    }
    (out / "augment_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    artifacts = [out / "qa_items.jsonl", out / "augment_summary.json"]
    write_provenance(manifest, "augment", artifacts)
    return artifacts


def stage_train_tokenizer(manifest: RunManifest, args=None) -> list[Path]:
    cfg = manifest.section("tokenizer")
    corpus_dir = manifest.out_dir / "corpus"
    texts: list[str] = [d.text for d in corpus_mod.read_documents_jsonl(
        corpus_dir / "documents.jsonl")]
    if cfg.get("include_instruction_data", True):
        pairs_path = corpus_dir / "pairs.jsonl"
        if pairs_path.exists():
            for p in corpus_mod.read_pairs_jsonl(pairs_path):
                texts.append(p.prompt)
                texts.append(p.reply)
        qa_path = manifest.out_dir / "augment" / "qa_items.jsonl"
        if qa_path.exists():
            for item in augment_mod.read_qa_jsonl(qa_path):
                texts.append(item.question)
                texts.append(item.answer)
    tokenizer = train_bpe(texts, cfg["vocab_size"])
    out = manifest.out_dir / "tokenizer" / "tokenizer.json"
    tokenizer.save(out, extra_meta=provenance_meta(manifest, "train-tokenizer"))
    write_provenance(manifest, "train-tokenizer", [out])
    return [out]


def _load_tokenizer(manifest: RunManifest) -> BpeTokenizer:
    return BpeTokenizer.load(manifest.out_dir / "tokenizer" / "tokenizer.json")


def _model_config(manifest: RunManifest) -> ModelConfig:
    fields = {k: v for k, v in manifest.section("model").items()
              if k in ModelConfig.__dataclass_fields__}
    return ModelConfig(**fields)


def stage_pretrain(manifest: RunManifest, args=None) -> list[Path]:
    tokenizer = _load_tokenizer(manifest)
    config = manifest.train_config("pretrain")
    corpus_dir = manifest.out_dir / "corpus"
    sp = tokenizer.specials

    def packed(name):
        docs = corpus_mod.read_documents_jsonl(corpus_dir / name)
        return train_mod.pack_token_stream([tokenizer.encode(d.text) for d in docs],
                                           config.seq_length, sp.eos, sp.pad)

    train_examples = packed("pretrain_train.jsonl")
    val_examples = packed("pretrain_val.jsonl")
    model = LanguageModel(_model_config(manifest), seed=manifest.seed)
    out = manifest.out_dir / "models" / "pretrained"
    result = train_mod.train_run(model, train_examples, val_examples, config, sp.pad,
                                 seed_scope="pretrain", out_dir=out, save_checkpoints=True)
    model.save(out, extra_meta={**provenance_meta(manifest, "pretrain"),
                                "model_id": "pretrained"})
    train_mod.write_train_manifest(out / "train_manifest.json", config,
                                   train_examples, val_examples,
                                   extra={**provenance_meta(manifest, "pretrain"),
                                          "final_val_loss": result.final_val_loss})
    artifacts = sorted(p for p in out.rglob("*") if p.is_file())
    write_provenance(manifest, "pretrain", artifacts)
    return artifacts


def _instruction_examples(manifest: RunManifest, tokenizer: BpeTokenizer,
                          max_length: int) -> tuple[list, list]:
    switch: list[train_mod.Example] = []
    for i, p in enumerate(corpus_mod.read_pairs_jsonl(
            manifest.out_dir / "corpus" / "pairs.jsonl")):
        ex = train_mod.encode_instruction_example(
            tokenizer, p.prompt, p.reply,
            example_id=f"switch/{p.dialogue_id}/{p.window_index}", max_length=max_length)
        if ex is not None:
            switch.append(ex)
    wiki: list[train_mod.Example] = []
    for item in augment_mod.read_qa_jsonl(manifest.out_dir / "augment" / "qa_items.jsonl"):
        ex = train_mod.encode_instruction_example(
            tokenizer, item.question, item.answer,
            example_id=f"wiki/{item.article_id}/{item.pair_index}", max_length=max_length)
        if ex is not None:
            wiki.append(ex)
    return switch, wiki


def stage_instruct_tune(manifest: RunManifest, args=None, strategy: str | None = None
                        ) -> list[Path]:
    if strategy is None:
        strategy = getattr(args, "strategy", None) or \
            manifest.section("instruct").get("strategy", "merged")
    strategy = STRATEGY_FLAGS.get(strategy, strategy)
    if strategy not in curriculum_mod.STRATEGIES:
        raise RuntimeError(f"unknown strategy {strategy!r}")
    tokenizer = _load_tokenizer(manifest)
    config = manifest.train_config("instruct")
    model_cfg = _model_config(manifest)
    switch, wiki = _instruction_examples(manifest, tokenizer, model_cfg.max_length)
    fraction = manifest.section("corpus").get("split_fraction", 0.9)

    def split(examples):
        s = corpus_mod.split_train_val(examples, fraction=fraction, seed=manifest.seed)
        return s.train, s.validation

    phase_epochs = manifest.section("instruct").get("phase_epochs")
    plan = curriculum_mod.build_plan(
        strategy, split(switch), split(wiki), config, seed=manifest.seed,
        phase_epochs=tuple(phase_epochs) if phase_epochs else None)

    model = LanguageModel.load(manifest.out_dir / "models" / "pretrained")
    model_id = strategy_model_id(strategy)
    out = manifest.out_dir / "models" / model_id
    curriculum_mod.run_plan(model, plan, tokenizer.specials.pad, out_dir=out)
    model.save(out, extra_meta={**provenance_meta(manifest, "instruct-tune"),
                                "model_id": model_id, "strategy": strategy})
    curriculum_mod.write_plan_file(out / "plan.json", plan,
                                   extra=provenance_meta(manifest, "instruct-tune"))
    artifacts = sorted(p for p in out.rglob("*") if p.is_file())
    write_provenance(manifest, f"instruct-tune-{strategy}", artifacts)
    return artifacts


def _model_dirs(manifest: RunManifest) -> list[Path]:
    root = manifest.out_dir / "models"
    if not root.exists():
        return []
    return sorted(d for d in root.iterdir() if (d / "model.json").exists())


def stage_evaluate(manifest: RunManifest, args=None) -> list[Path]:
    cfg = manifest.section("eval")
    tokenizer = _load_tokenizer(manifest)
    model_dirs = _model_dirs(manifest)
    if not model_dirs:
        raise RuntimeError("no model checkpoints under out_dir/models; train first")
    results: list[evaluate_mod.TaskResult] = []
    for model_dir in model_dirs:
        model = LanguageModel.load(model_dir)
        model_id = model_dir.name
        for suite in cfg.get("suites") or []:
            items = evaluate_mod.read_eval_items(resolve_input(manifest, suite))
            results.extend(evaluate_mod.evaluate_suite(
                model, tokenizer, items, model_id=model_id,
                length_normalize=cfg.get("length_normalize", False)))
        rt_path = cfg.get("reading_times")
        if rt_path:
            rows = evaluate_mod.read_reading_times(resolve_input(manifest, rt_path))
            surprisals = evaluate_mod.word_surprisals(model, tokenizer,
                                                      [r.word for r in rows])
            regression = evaluate_mod.delta_r2(rows, surprisals)
            results.append(evaluate_mod.TaskResult(
                task=Path(rt_path).stem, model_id=model_id, metric="delta_r2",
                value=regression.delta_r2, n_items=len(rows)))
    out = manifest.out_dir / "eval" / "eval_results.csv"
    evaluate_mod.write_results_csv(out, results)
    write_provenance(manifest, "evaluate", [out])
    return [out]


def stage_finetune_eval(manifest: RunManifest, args=None) -> list[Path]:
    cfg = manifest.section("finetune_eval")
    for key in ("train_file", "test_file"):
        if not cfg.get(key):
            raise RuntimeError(f"finetune_eval.{key} missing from manifest")
    tokenizer = _load_tokenizer(manifest)
    train_pairs = evaluate_mod.read_classification_jsonl(
        resolve_input(manifest, cfg["train_file"]))
    test_pairs = evaluate_mod.read_classification_jsonl(
        resolve_input(manifest, cfg["test_file"]))
    subsample = cfg.get("subsample_size", 10_000)
    task = cfg.get("task", "classification")
    tune_config = manifest.train_config("finetune_eval")
    results = []
    for model_dir in _model_dirs(manifest):
        model = LanguageModel.load(model_dir)  # fresh weights per model
        outcome = evaluate_mod.finetune_classifier(
            model, tokenizer, train_pairs, test_pairs,
            subsample_size=subsample, seed=manifest.seed, config=tune_config)
        results.append(evaluate_mod.TaskResult(
            task=task, model_id=model_dir.name, metric="accuracy",
            value=outcome.accuracy, n_items=outcome.n_test))
    out = manifest.out_dir / "eval" / "finetune_results.csv"
    evaluate_mod.write_results_csv(out, results)
    write_provenance(manifest, "finetune-eval", [out])
    return [out]


def stage_report(manifest: RunManifest, args=None) -> list[Path]:
    cfg = manifest.section("report")
    paths = [resolve_input(manifest, p) for p in cfg.get("results") or []]
    if not paths:
        eval_dir = manifest.out_dir / "eval"
        paths = sorted(eval_dir.glob("*_results.csv")) if eval_dir.exists() else []
    if not paths:
        raise RuntimeError("no results CSVs to report on; run evaluate first")
    results = []
    for p in paths:
        results.extend(evaluate_mod.read_results_csv(p))
    matrix = report_mod.matrix_from_results(results)
    z = report_mod.aggregate_model_index(report_mod.zscores(matrix))
    out = manifest.out_dir / "report"
    report_mod.write_zscores_csv(out / "zscores.csv", z)
    report_mod.write_model_index_csv(out / "model_index.csv", z)
    (out / "box_plot.svg").write_text(report_mod.render_box_plot(z), encoding="utf-8")
    artifacts = [out / "zscores.csv", out / "model_index.csv", out / "box_plot.svg"]
    write_provenance(manifest, "report", artifacts)
    return artifacts


def stage_run_all(manifest: RunManifest, args=None) -> list[Path]:
    artifacts = []
    artifacts += stage_build_corpus(manifest, args)
    artifacts += stage_augment(manifest, args)
    artifacts += stage_train_tokenizer(manifest, args)
    artifacts += stage_pretrain(manifest, args)
    for strategy in curriculum_mod.STRATEGIES:
        artifacts += stage_instruct_tune(manifest, args, strategy=strategy)
    artifacts += stage_evaluate(manifest, args)
    ft = manifest.section("finetune_eval")
    if ft.get("train_file") and ft.get("test_file"):
        artifacts += stage_finetune_eval(manifest, args)
    artifacts += stage_report(manifest, args)
    return artifacts


STAGES = {
    "build-corpus": stage_build_corpus,
    "augment": stage_augment,
    "train-tokenizer": stage_train_tokenizer,
    "pretrain": stage_pretrain,
    "instruct-tune": stage_instruct_tune,
    "evaluate": stage_evaluate,
    "finetune-eval": stage_finetune_eval,
    "report": stage_report,
    "run-all": stage_run_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="desklm",
        description="Desk-scale language-model lab: corpus to report from one manifest.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("manifest", help="path to the run manifest (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override manifest seed")
        p.add_argument("--out-dir", default=None, help="override manifest out_dir")
        if name == "instruct-tune":
            p.add_argument("--strategy", choices=sorted(STRATEGY_FLAGS),
                           default=None, help="instruction-tuning curriculum")
        if name in ("augment", "run-all"):
            p.add_argument("--stub", action="store_true",
                           help="force the deterministic local backend")
            p.add_argument("--backend-url", default=None,
                           help="generation service URL (overrides manifest and env)")
            p.add_argument("--max-retries", type=int, default=None)
            p.add_argument("--timeout-ms", type=int, default=None)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        manifest = load_manifest(args.manifest, seed_override=args.seed,
                                 out_dir_override=args.out_dir)
    except ManifestError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    try:
        artifacts = STAGES[args.command](manifest, args)
    except Exception as exc:  # stage failure: keep partial artifacts, report, exit 1
        log.error("%s failed: %s", args.command, exc)
        return 1
    log.info("%s done: %d artifacts under %s", args.command, len(artifacts),
             manifest.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
