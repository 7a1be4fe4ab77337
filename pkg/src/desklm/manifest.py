"""Run manifests: one JSON file declares every stage of an experiment.

The manifest is validated up front with field-level diagnostics, hashed
canonically, and the hash is embedded in (or recorded beside) every artifact
a stage produces, so any output can be traced to the exact configuration
that made it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .corpus import SOURCES
from .train import SCHEDULES, TrainConfig, instruct_defaults, pretrain_defaults

MIN_VOCAB = 4 + 256 + 1

STRATEGY_FLAGS = {
    "merged": "merged",
    "seq-switch-wiki": "seq_switch_wiki",
    "seq-wiki-switch": "seq_wiki_switch",
    "switch-only": "switch_only",
    "wiki-only": "wiki_only",
}


class ManifestError(ValueError):
    """Invalid manifest; ``problems`` lists field-level diagnostics."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid manifest:\n" + "\n".join(f"  {p}" for p in problems))


@dataclass
class RunManifest:
    raw: dict
    path: Path
    seed: int
    out_dir: Path
    manifest_hash: str = ""

    def section(self, name: str) -> dict:
        return self.raw.get(name, {}) or {}

    def train_config(self, stage: str) -> TrainConfig:
        base = pretrain_defaults() if stage == "pretrain" else instruct_defaults()
        overrides = {k: v for k, v in self.section(stage).items()
                     if k in TrainConfig.__dataclass_fields__}
        cfg = base.replace(**overrides)
        return cfg.replace(seed=self.seed)


def canonical_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _check(problems: list[str], condition: bool, message: str) -> bool:
    if not condition:
        problems.append(message)
    return condition


def validate_manifest(raw: dict, base_dir: Path) -> list[str]:
    """Return field-level problems; empty list means the manifest is usable."""
    problems: list[str] = []
    _check(problems, isinstance(raw.get("seed"), int), "seed: required integer")
    _check(problems, isinstance(raw.get("out_dir"), str) and raw.get("out_dir"),
           "out_dir: required non-empty string")

    corpus = raw.get("corpus") or {}
    inputs = corpus.get("inputs")
    if _check(problems, isinstance(inputs, list) and inputs,
              "corpus.inputs: required non-empty list"):
        for i, entry in enumerate(inputs):
            prefix = f"corpus.inputs[{i}]"
            if not isinstance(entry, dict):
                problems.append(f"{prefix}: must be an object")
                continue
            path = entry.get("path")
            if _check(problems, isinstance(path, str) and path, f"{prefix}.path: required"):
                _check(problems, (base_dir / path).exists(),
                       f"{prefix}.path: file not found: {path}")
            _check(problems, entry.get("source") in SOURCES,
                   f"{prefix}.source: must be one of {SOURCES}")
            _check(problems, entry.get("kind") in ("text", "dialogue"),
                   f"{prefix}.kind: must be 'text' or 'dialogue'")
    fraction = corpus.get("split_fraction", 0.9)
    _check(problems, isinstance(fraction, (int, float)) and 0 < fraction < 1,
           "corpus.split_fraction: must lie strictly between 0 and 1")

    tok = raw.get("tokenizer") or {}
    vocab = tok.get("vocab_size")
    _check(problems, isinstance(vocab, int) and vocab >= MIN_VOCAB,
           f"tokenizer.vocab_size: required integer >= {MIN_VOCAB}")

    model = raw.get("model") or {}
    for key in ("vocab_size", "max_length", "hidden_size", "num_heads", "num_layers"):
        _check(problems, isinstance(model.get(key), int) and model[key] > 0,
               f"model.{key}: required positive integer")
    if isinstance(model.get("vocab_size"), int) and isinstance(vocab, int):
        _check(problems, model["vocab_size"] == vocab,
               "model.vocab_size: must equal tokenizer.vocab_size")
    if (isinstance(model.get("hidden_size"), int) and isinstance(model.get("num_heads"), int)
            and model["num_heads"] > 0):
        _check(problems, model["hidden_size"] % model["num_heads"] == 0,
               "model.hidden_size: must be divisible by model.num_heads")

    for stage in ("pretrain", "instruct"):
        section = raw.get(stage) or {}
        sched = section.get("scheduler")
        if sched is not None:
            _check(problems, sched in SCHEDULES,
                   f"{stage}.scheduler: must be one of {SCHEDULES}")
        for key in ("initial_lr",):
            if key in section:
                _check(problems, isinstance(section[key], (int, float)) and section[key] > 0,
                       f"{stage}.{key}: must be positive")
    strategy = (raw.get("instruct") or {}).get("strategy")
    if strategy is not None:
        _check(problems, strategy in STRATEGY_FLAGS.values(),
               f"instruct.strategy: must be one of {sorted(STRATEGY_FLAGS.values())}")

    eval_section = raw.get("eval") or {}
    for i, suite in enumerate(eval_section.get("suites") or []):
        _check(problems, isinstance(suite, str) and (base_dir / suite).exists(),
               f"eval.suites[{i}]: file not found: {suite}")
    rt = eval_section.get("reading_times")
    if rt is not None:
        _check(problems, isinstance(rt, str) and (base_dir / rt).exists(),
               f"eval.reading_times: file not found: {rt}")

    ft = raw.get("finetune_eval") or {}
    for key in ("train_file", "test_file"):
        value = ft.get(key)
        if value is not None:
            _check(problems, isinstance(value, str) and (base_dir / value).exists(),
                   f"finetune_eval.{key}: file not found: {value}")
    return problems


def load_manifest(path: str | Path, seed_override: int | None = None,
                  out_dir_override: str | None = None) -> RunManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError([f"manifest file not found: {path}"])
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError([f"manifest is not valid JSON: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ManifestError(["manifest root must be a JSON object"])
    if seed_override is not None:
        raw["seed"] = seed_override
    if out_dir_override is not None:
        raw["out_dir"] = out_dir_override
    problems = validate_manifest(raw, path.parent)
    if problems:
        raise ManifestError(problems)
    out_dir = Path(raw["out_dir"])
    if not out_dir.is_absolute():
        out_dir = path.parent / out_dir
    return RunManifest(raw=raw, path=path, seed=raw["seed"], out_dir=out_dir,
                       manifest_hash=canonical_hash(raw))


def resolve_input(manifest: RunManifest, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else manifest.path.parent / p


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(manifest: RunManifest, stage: str, artifacts: list[Path]) -> Path:
    """Record the manifest hash and a digest of every artifact the stage wrote."""
    record = {
        "stage": stage,
        "manifest_hash": manifest.manifest_hash,
        "artifacts": {
            str(p.relative_to(manifest.out_dir)): sha256_file(p)
            for p in sorted(artifacts)
        },
    }
    prov_dir = manifest.out_dir / "provenance"
    prov_dir.mkdir(parents=True, exist_ok=True)
    out = prov_dir / f"{stage}.json"
    out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def provenance_meta(manifest: RunManifest, stage: str) -> dict:
    return {"stage": stage, "manifest_hash": manifest.manifest_hash}
