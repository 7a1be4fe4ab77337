"""Zero-shot evaluation: forced choice, word surprisals, regression, fine-tuning.

Forced-choice scoring compares candidate continuations by the log-probability
of the candidate tokens only, so a shared context never leaks into the
comparison. Surprisals are in natural-log units and sum to the negative
whole-sequence log-probability.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import train as training
from .autodiff import Tensor
from .bpe import BpeTokenizer
from .model import LanguageModel
from .train import TrainConfig

log = logging.getLogger(__name__)


class ItemSkipped(Exception):
    """An item could not be scored (e.g. tokenization overflow)."""


class CollinearityError(ValueError):
    """The regression design matrix is rank deficient."""

    def __init__(self, columns: list[str]):
        self.columns = columns
        super().__init__(f"design matrix is rank deficient; collinear columns: {columns}")


@dataclass(frozen=True)
class EvalItem:
    task: str
    candidates: tuple[str, ...]
    correct_index: int
    context: str = ""

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ValueError("an item needs at least 2 candidates")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidates must be pairwise distinct")
        if not 0 <= self.correct_index < len(self.candidates):
            raise ValueError("correct_index out of range")


@dataclass
class ForcedChoice:
    chosen_index: int
    logprobs: list[float]
    tied: bool


@dataclass
class TaskResult:
    task: str
    model_id: str
    metric: str
    value: float
    n_items: int = 0
    n_ties: int = 0


@dataclass(frozen=True)
class ReadingTimeRow:
    word: str
    reading_time: float
    word_length: float
    log_frequency: float

    def __post_init__(self):
        if self.reading_time <= 0:
            raise ValueError("reading_time must be positive")


@dataclass
class RegressionResult:
    r2_baseline: float
    r2_full: float
    delta_r2: float
    coefficients: dict[str, float] = field(default_factory=dict)


# -- forced choice -----------------------------------------------------------

def score_forced_choice(model, tokenizer: BpeTokenizer, item: EvalItem,
                        length_normalize: bool = False) -> ForcedChoice:
    """Pick the candidate whose tokens get the highest log-probability.

    Ties resolve to the lowest index and are flagged. ``length_normalize``
    divides each score by its candidate token count (useful when candidates
    differ wildly in length).
    """
    sp = tokenizer.specials
    context_ids = tokenizer.encode(item.context) if item.context else []
    max_length = getattr(getattr(model, "config", None), "max_length", None)
    scores: list[float] = []
    for cand in item.candidates:
        cand_text = cand if not item.context else " " + cand
        cand_ids = tokenizer.encode(cand_text)
        if not cand_ids:
            raise ItemSkipped(f"candidate {cand!r} produced no tokens")
        ids = [sp.bos] + context_ids + cand_ids
        if max_length is not None and len(ids) > max_length:
            raise ItemSkipped(
                f"item needs {len(ids)} tokens but the model takes {max_length}"
            )
        span = (1 + len(context_ids), len(ids))
        lp = model.sequence_logprob(np.asarray(ids, dtype=np.int64), span=span)
        scores.append(lp / len(cand_ids) if length_normalize else lp)
    best = max(scores)
    chosen = scores.index(best)
    tied = scores.count(best) > 1
    if tied:
        log.debug("tie on task %s; choosing lowest index %d", item.task, chosen)
    return ForcedChoice(chosen_index=chosen, logprobs=scores, tied=tied)


def evaluate_suite(model, tokenizer: BpeTokenizer, items: list[EvalItem],
                   model_id: str = "model", length_normalize: bool = False
                   ) -> list[TaskResult]:
    """Per-task accuracy of forced-choice predictions, in task-name order."""
    by_task: dict[str, list[EvalItem]] = {}
    for item in items:
        by_task.setdefault(item.task, []).append(item)
    results = []
    for task in sorted(by_task):
        group = by_task[task]
        correct = ties = scored = 0
        for item in group:
            try:
                choice = score_forced_choice(model, tokenizer, item,
                                             length_normalize=length_normalize)
            except ItemSkipped as exc:
                log.warning("task %s: %s", task, exc)
                continue
            scored += 1
            ties += int(choice.tied)
            correct += int(choice.chosen_index == item.correct_index)
        if scored == 0:
            log.warning("task %s had no scoreable items; omitted", task)
            continue
        results.append(TaskResult(task=task, model_id=model_id, metric="accuracy",
                                  value=correct / scored, n_items=scored, n_ties=ties))
    return results


# -- surprisal ----------------------------------------------------------------

def word_surprisals(model, tokenizer: BpeTokenizer, words: list[str]) -> list[float]:
    """Per-word surprisal (nats): -sum of token log-probs given preceding words."""
    if not words:
        raise ValueError("words must be nonempty")
    ids, offsets = tokenizer.encode_words(words)
    arr = np.asarray(ids, dtype=np.int64)
    surprisals = []
    for i, (start, end) in enumerate(offsets):
        if start >= end:
            raise ValueError(f"word {i} ({words[i]!r}) aligned to an empty token range")
        surprisals.append(-model.sequence_logprob(arr, span=(start, end)))
    return surprisals


# -- reading-time regression ---------------------------------------------------

def _r2(design: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ss_res = float(resid @ resid)
    centered = y - y.mean()
    ss_tot = float(centered @ centered)
    if ss_tot == 0:
        raise ValueError("response has zero variance")
    return 1.0 - ss_res / ss_tot, coef

def delta_r2(rows: list[ReadingTimeRow], surprisals: list[float]) -> RegressionResult:
    """Gain in in-sample R^2 from adding surprisal to the baseline predictors.

    Baseline: intercept + word_length + log_frequency. Least squares is
    solved with a rank-tolerant method, so a surprisal column collinear with
    the baseline yields delta_r2 = 0 rather than an error; a rank-deficient
    baseline itself is an error naming the collinear columns.
    """
    if len(rows) != len(surprisals):
        raise ValueError("rows and surprisals must align one-to-one")
    n = len(rows)
    if n < 6:
        raise ValueError("need at least predictors + 2 observations (n >= 6)")
    y = np.array([r.reading_time for r in rows], dtype=np.float64)
    base_cols = {
        "intercept": np.ones(n),
        "word_length": np.array([r.word_length for r in rows], dtype=np.float64),
        "log_frequency": np.array([r.log_frequency for r in rows], dtype=np.float64),
    }
    baseline = np.column_stack(list(base_cols.values()))
    rank = np.linalg.matrix_rank(baseline)
    if rank < baseline.shape[1]:
        names = list(base_cols)
        collinear = [name for i, name in enumerate(names)
                     if np.linalg.matrix_rank(np.delete(baseline, i, axis=1)) == rank]
        raise CollinearityError(collinear)

    r2_base, _ = _r2(baseline, y)
    full = np.column_stack([baseline, np.asarray(surprisals, dtype=np.float64)])
    r2_full, coef = _r2(full, y)
    delta = r2_full - r2_base
    if abs(delta) < 1e-12:  # guard against round-off on nested fits
        delta = 0.0
        r2_full = r2_base
    names = list(base_cols) + ["surprisal"]
    return RegressionResult(r2_baseline=r2_base, r2_full=r2_full, delta_r2=delta,
                            coefficients=dict(zip(names, coef.tolist())))


# -- classification fine-tuning --------------------------------------------------

@dataclass
class ClassifierResult:
    accuracy: float
    subsample_ids: list[int]
    classes: list[str]
    n_train: int
    n_test: int


def _encode_classification(tokenizer: BpeTokenizer, text: str, max_length: int) -> list[int]:
    sp = tokenizer.specials
    ids = [sp.bos] + tokenizer.encode(text) + [sp.eos]
    return ids[:max_length]


def subsample_indices(n: int, subsample_size: int, seed: int, salt: str = "") -> list[int]:
    """Deterministic sorted sample of row indices; clamps to the full set."""
    if subsample_size >= n:
        return list(range(n))
    rng = random.Random(f"subsample/{seed}/{salt}")
    return sorted(rng.sample(range(n), subsample_size))


def finetune_classifier(model: LanguageModel, tokenizer: BpeTokenizer,
                        train_pairs: list[tuple[str, str]],
                        test_pairs: list[tuple[str, str]],
                        subsample_size: int, seed: int = 0,
                        config: TrainConfig | None = None) -> ClassifierResult:
    """Fine-tune the model end-to-end with a linear head on labeled texts.

    The head reads the final hidden state of the last non-pad token. The
    training subsample is deterministic under ``seed``; a single-class draw is
    resampled with a diagnostic before giving up.
    """
    if config is None:
        config = training.instruct_defaults(max_epochs=3, warmup_steps=1)
    classes = sorted({label for _, label in train_pairs} | {label for _, label in test_pairs})
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    class_index = {c: i for i, c in enumerate(classes)}

    chosen = subsample_indices(len(train_pairs), subsample_size, seed)
    for retry in range(1, 6):
        labels = {train_pairs[i][1] for i in chosen}
        if len(labels) >= 2:
            break
        log.warning("subsample drew a single class; resampling (retry %d)", retry)
        chosen = subsample_indices(len(train_pairs), subsample_size, seed, salt=str(retry))
    else:
        raise ValueError("could not draw a subsample with 2+ classes")

    sp = tokenizer.specials
    max_len = model.config.max_length

    def prepare(pairs):
        encoded = []
        for text, label in pairs:
            ids = _encode_classification(tokenizer, text, max_len)
            encoded.append((np.asarray(ids, dtype=np.int64), class_index[label]))
        return encoded

    train_data = prepare([train_pairs[i] for i in chosen])
    test_data = prepare(test_pairs)

    rng = np.random.default_rng([seed, 0xC1A5])
    head = Tensor(rng.normal(0.0, model.config.init_std,
                             size=(model.config.hidden_size, len(classes)))
                  .astype(model.dtype), requires_grad=True)
    all_params = dict(model.params)
    all_params["classifier_head"] = head
    optimizer = training.AdamW(all_params, betas=config.betas, eps=config.eps,
                               weight_decay=config.weight_decay)

    steps_per_epoch = -(-len(train_data) // config.batch_size)
    total_steps = steps_per_epoch * config.max_epochs
    if config.warmup_steps >= total_steps:
        config = config.replace(warmup_steps=max(total_steps - 1, 0))

    def batch_logits(batch):
        ids = np.full((len(batch), max(len(b[0]) for b in batch)), sp.pad, dtype=np.int64)
        last = np.zeros(len(batch), dtype=np.int64)
        for row, (seq, _) in enumerate(batch):
            ids[row, :len(seq)] = seq
            last[row] = len(seq) - 1
        hidden = model.forward_logits(ids).hidden
        pooled = ad.take_rows(hidden, last)
        return ad.matmul(pooled, head)

    step = 0
    for epoch in range(config.max_epochs):
        for batch_idx in training.epoch_batches(len(train_data), config.batch_size,
                                                f"{seed}/classifier/{epoch}"):
            batch = [train_data[i] for i in batch_idx]
            step += 1
            logits = batch_logits(batch)
            loss = training.class_cross_entropy(logits, [b[1] for b in batch])
            optimizer.zero_grad()
            loss.backward()
            if config.clip_norm is not None:
                training.clip_gradients(all_params, config.clip_norm)
            optimizer.step(training.lr_at_step(config, step, total_steps))

    correct = 0
    for start in range(0, len(test_data), config.batch_size):
        batch = test_data[start:start + config.batch_size]
        with ad.no_grad():
            logits = batch_logits(batch)
        predictions = logits.data.argmax(axis=-1)
        correct += int(sum(int(p == b[1]) for p, b in zip(predictions, batch)))
    return ClassifierResult(accuracy=correct / len(test_data),
                            subsample_ids=chosen, classes=classes,
                            n_train=len(train_data), n_test=len(test_data))


# -- file I/O ---------------------------------------------------------------------

def read_eval_items(path: str | Path) -> list[EvalItem]:
    """EvalItem JSONL: {"task","context","candidates","correct_index"}."""
    items = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                items.append(EvalItem(task=rec["task"],
                                      candidates=tuple(rec["candidates"]),
                                      correct_index=rec["correct_index"],
                                      context=rec.get("context") or ""))
    return items


def read_reading_times(path: str | Path) -> list[ReadingTimeRow]:
    """CSV with header word,reading_time,word_length,log_frequency."""
    rows = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ReadingTimeRow(word=rec["word"],
                                       reading_time=float(rec["reading_time"]),
                                       word_length=float(rec["word_length"]),
                                       log_frequency=float(rec["log_frequency"])))
    return rows


def read_classification_jsonl(path: str | Path) -> list[tuple[str, str]]:
    """Classification JSONL: {"text","label"}."""
    pairs = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                pairs.append((rec["text"], str(rec["label"])))
    return pairs


def write_results_csv(path: str | Path, results: list[TaskResult]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "model_id", "metric", "value", "n_items", "n_ties"])
        for r in sorted(results, key=lambda r: (r.task, r.model_id)):
            writer.writerow([r.task, r.model_id, r.metric, f"{r.value:.12g}",
                             r.n_items, r.n_ties])


def read_results_csv(path: str | Path) -> list[TaskResult]:
    results = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            results.append(TaskResult(task=rec["task"], model_id=rec["model_id"],
                                      metric=rec["metric"], value=float(rec["value"]),
                                      n_items=int(rec["n_items"] or 0),
                                      n_ties=int(rec["n_ties"] or 0)))
    return results
