"""Instruction-tuning curricula: merged mixtures, sequential phases, ablations.

A plan is an ordered list of phases; training consumes all epochs of a phase
before the next phase starts, and the LR schedule restarts with each phase so
every phase gets its own warmup.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from . import train as training
from .model import LanguageModel
from .train import Example, TrainConfig, TrainResult, data_fingerprint

log = logging.getLogger(__name__)

STRATEGIES = ("merged", "seq_switch_wiki", "seq_wiki_switch", "switch_only", "wiki_only")


@dataclass
class Phase:
    name: str
    train: list[Example]
    val: list[Example]
    epochs: int


@dataclass
class CurriculumPlan:
    strategy: str
    phases: list[Phase]
    config: TrainConfig
    seed: int


def _split_epochs(total: int) -> tuple[int, int]:
    first = total // 2
    return first, total - first


def build_plan(strategy: str, switch_data: tuple[list[Example], list[Example]],
               wiki_data: tuple[list[Example], list[Example]], config: TrainConfig,
               seed: int = 0, phase_epochs: tuple[int, int] | None = None) -> CurriculumPlan:
    """Assemble the training phases for ``strategy``.

    merged: one phase over a seed-shuffled union of both datasets.
    seq_switch_wiki / seq_wiki_switch: two phases in the named order, epochs
    split half-and-half by default (override with ``phase_epochs``).
    switch_only / wiki_only: a single-dataset ablation.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    switch_train, switch_val = switch_data
    wiki_train, wiki_val = wiki_data

    def require(name, data):
        if not data:
            raise ValueError(f"strategy {strategy!r} needs nonempty {name} data")

    epochs = config.max_epochs
    if strategy == "merged":
        require("switch", switch_train)
        require("wiki", wiki_train)
        union = list(switch_train) + list(wiki_train)
        random.Random(f"curriculum/{seed}/merged").shuffle(union)
        phases = [Phase("merged", union, list(switch_val) + list(wiki_val), epochs)]
    elif strategy in ("seq_switch_wiki", "seq_wiki_switch"):
        require("switch", switch_train)
        require("wiki", wiki_train)
        e1, e2 = phase_epochs if phase_epochs is not None else _split_epochs(epochs)
        if e1 < 1 or e2 < 1:
            raise ValueError("each sequential phase needs at least one epoch")
        first, second = (("switch", switch_train, switch_val), ("wiki", wiki_train, wiki_val))
        if strategy == "seq_wiki_switch":
            first, second = second, first
        phases = [Phase(first[0], list(first[1]), list(first[2]), e1),
                  Phase(second[0], list(second[1]), list(second[2]), e2)]
    elif strategy == "switch_only":
        require("switch", switch_train)
        phases = [Phase("switch", list(switch_train), list(switch_val), epochs)]
    else:
        require("wiki", wiki_train)
        phases = [Phase("wiki", list(wiki_train), list(wiki_val), epochs)]
    return CurriculumPlan(strategy=strategy, phases=phases, config=config, seed=seed)


def iterate_plan(plan: CurriculumPlan) -> Iterator[tuple[int, list[Example]]]:
    """Yield (phase_index, batch) in exactly the order training will consume.

    All epochs of phase k stream before any batch of phase k+1; within a
    phase, each epoch reshuffles deterministically under the plan seed.
    """
    for phase_index, phase in enumerate(plan.phases):
        for epoch in range(phase.epochs):
            for batch_idx in training.epoch_batches(
                    len(phase.train), plan.config.batch_size,
                    f"{plan.config.seed}/{plan.seed}/{phase_index}/{epoch}"):
                yield phase_index, [phase.train[i] for i in batch_idx]


def run_plan(model: LanguageModel, plan: CurriculumPlan, pad_id: int,
             out_dir: str | Path | None = None) -> list[TrainResult]:
    """Execute every phase with train_run; the scheduler restarts per phase."""
    results = []
    out_path = Path(out_dir) if out_dir is not None else None
    for phase_index, phase in enumerate(plan.phases):
        cfg = plan.config.replace(max_epochs=phase.epochs)
        phase_dir = out_path / f"phase_{phase_index}_{phase.name}" if out_path else None
        log.info("phase %d (%s): %d train examples, %d epochs",
                 phase_index, phase.name, len(phase.train), phase.epochs)
        results.append(training.train_run(
            model, phase.train, phase.val, cfg, pad_id,
            seed_scope=f"{plan.seed}/{phase_index}", out_dir=phase_dir))
    return results


def write_plan_file(path: str | Path, plan: CurriculumPlan, extra: dict | None = None) -> None:
    """Persist strategy, per-phase epochs/sizes and dataset fingerprints."""
    payload = {
        "strategy": plan.strategy,
        "seed": plan.seed,
        "batch_size": plan.config.batch_size,
        "phases": [{
            "name": p.name,
            "epochs": p.epochs,
            "n_train": len(p.train),
            "n_val": len(p.val),
            "train_fingerprint": data_fingerprint(p.train),
            "val_fingerprint": data_fingerprint(p.val),
        } for p in plan.phases],
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
