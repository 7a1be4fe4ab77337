"""Training engine: LR schedules, masked cross-entropy, AdamW, epoch loop.

Two loss regimes share one code path: packed next-token streams for
pre-training (mask true everywhere a real token sits) and padded
prompt/reply examples for instruction tuning (mask true only on reply
tokens and their terminating eos).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import LanguageModel

log = logging.getLogger(__name__)

SCHEDULES = ("linear", "cosine_with_restarts")


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass
class TrainConfig:
    initial_lr: float = 2e-4
    batch_size: int = 8
    max_epochs: int = 8
    scheduler: str = "linear"
    warmup_steps: int = 5_000
    num_cycles: int = 2
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    seq_length: int = 128           # packing length for pre-training streams
    patience: int | None = None     # optional early stop on validation loss

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.scheduler not in SCHEDULES:
            raise ValueError(f"unknown scheduler {self.scheduler!r}; expected one of {SCHEDULES}")

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        d["betas"] = tuple(d["betas"])
        return TrainConfig(**d)


def pretrain_defaults(**overrides) -> TrainConfig:
    """Pre-training hyperparameters: lr 2e-4, batch 8, 8 epochs, linear warmup 5000."""
    cfg = TrainConfig(initial_lr=2e-4, batch_size=8, max_epochs=8,
                      scheduler="linear", warmup_steps=5_000)
    return cfg.replace(**overrides) if overrides else cfg


def instruct_defaults(**overrides) -> TrainConfig:
    """Instruction-tuning hyperparameters: lr 2e-5, batch 8, 10 epochs, cosine restarts, warmup 500."""
    cfg = TrainConfig(initial_lr=2e-5, batch_size=8, max_epochs=10,
                      scheduler="cosine_with_restarts", warmup_steps=500)
    return cfg.replace(**overrides) if overrides else cfg


# -- learning-rate schedules -----------------------------------------------------

def lr_at_step(config: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate at ``step`` of ``total_steps``.

    Both modes ramp linearly from 0 to initial_lr over the warmup. Linear then
    decays to 0 at total_steps; cosine_with_restarts runs ``num_cycles`` equal
    half-cosine cycles, each restarting at the peak.
    """
    if step > total_steps:
        raise ValueError(f"step {step} beyond total_steps {total_steps}")
    if step < 0:
        raise ValueError("step must be non-negative")
    w = config.warmup_steps
    if w >= total_steps:
        raise ValueError(f"warmup_steps {w} must be smaller than total_steps {total_steps}")
    if w > 0 and step <= w:
        return config.initial_lr * step / w
    if config.scheduler == "linear":
        return config.initial_lr * (total_steps - step) / (total_steps - w)
    span = total_steps - w
    pos = step - w
    cycle = min(int(pos * config.num_cycles // span), config.num_cycles - 1)
    frac = pos * config.num_cycles / span - cycle
    return config.initial_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# -- losses ----------------------------------------------------------------------

def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean of -log p(targets[t] | prefix) over positions where ``mask`` is true.

    ``targets`` and ``mask`` cover the full sequence; position t is scored from
    logits[t-1], so position 0 never contributes. Unmasked positions contribute
    exactly zero to both the value and the gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.ndim == 1:
        targets = targets[None, :]
        mask = mask[None, :]
        logits_data = logits.data[None, :, :]
        batched = False
    else:
        logits_data = logits.data
        batched = True
    if targets.shape != mask.shape or logits_data.shape[:2] != targets.shape:
        raise ValueError("logits, targets and mask lengths disagree")

    m = mask[:, 1:]
    if not m.any():
        raise ValueError("mask selects no positions")
    n_masked = int(m.sum())

    rows = logits_data[:, :-1, :].astype(np.float64)
    shifted = rows - rows.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(denom)

    tgt = targets[:, 1:]
    b_idx, t_idx = np.nonzero(m)
    picked = logp[b_idx, t_idx, tgt[b_idx, t_idx]]
    value = np.asarray(-picked.sum() / n_masked, dtype=logits.data.dtype)

    def backward(g):
        if not logits.requires_grad:
            return
        probs = (expd / denom)[b_idx, t_idx]            # (n_masked, vocab)
        probs[np.arange(n_masked), tgt[b_idx, t_idx]] -= 1.0
        grad = np.zeros(logits_data.shape, dtype=logits.data.dtype)
        coeff = float(g) / n_masked
        np.add.at(grad[:, :-1, :], (b_idx, t_idx), (probs * coeff).astype(logits.data.dtype))
        logits._accumulate(grad if batched else grad[0])

    return ad._node(value, (logits,), backward)


def class_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean -log softmax(logits)[label] over a batch of class logits."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = logits.data.astype(np.float64)
    shifted = rows - rows.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(denom)
    n = labels.shape[0]
    value = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        if not logits.requires_grad:
            return
        probs = expd / denom
        probs[np.arange(n), labels] -= 1.0
        logits._accumulate((probs * (float(g) / n)).astype(logits.data.dtype))

    return ad._node(value, (logits,), backward)


# -- optimizer -------------------------------------------------------------------

class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = ad.parameters_norm(params.values())
    if total > max_norm and total > 0:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return total


# -- data assembly ---------------------------------------------------------------

@dataclass
class Example:
    """One training sequence: token ids plus a per-position loss mask."""
    ids: np.ndarray
    mask: np.ndarray
    example_id: str = ""

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.ids.astype("<i8").tobytes())
        h.update(self.mask.astype(np.uint8).tobytes())
        return h.hexdigest()


def pack_token_stream(token_lists: list[list[int]], seq_length: int, eos_id: int,
                      pad_id: int) -> list[Example]:
    """Join documents with eos and cut into fixed-length chunks.

    The final partial chunk is padded (mask false on padding) rather than
    dropped, so small corpora keep every token.
    """
    stream: list[int] = []
    for toks in token_lists:
        stream.extend(toks)
        stream.append(eos_id)
    examples = []
    for start in range(0, len(stream), seq_length):
        chunk = stream[start:start + seq_length]
        real = len(chunk)
        if real < 2:
            continue
        mask = [True] * real
        if real < seq_length:
            chunk = chunk + [pad_id] * (seq_length - real)
            mask = mask + [False] * (seq_length - real)
        examples.append(Example(np.asarray(chunk, dtype=np.int64),
                                np.asarray(mask, dtype=bool),
                                example_id=f"chunk-{start // seq_length:06d}"))
    return examples


def encode_instruction_example(tokenizer, prompt: str, reply: str, example_id: str = "",
                               max_length: int | None = None) -> Example | None:
    """[bos] prompt [sep] reply [eos]; loss mask true on reply tokens and eos."""
    sp = tokenizer.specials
    prompt_ids = tokenizer.encode(prompt)
    reply_ids = tokenizer.encode(reply)
    ids = [sp.bos] + prompt_ids + [sp.sep] + reply_ids + [sp.eos]
    mask = [False] * (len(prompt_ids) + 2) + [True] * (len(reply_ids) + 1)
    if max_length is not None and len(ids) > max_length:
        log.warning("instruction example %s exceeds max length (%d > %d); skipped",
                    example_id, len(ids), max_length)
        return None
    return Example(np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=bool),
                   example_id=example_id)


def epoch_batches(n_items: int, batch_size: int, seed_key: str) -> list[list[int]]:
    """Deterministic shuffled batch index lists for one epoch."""
    order = list(range(n_items))
    random.Random(seed_key).shuffle(order)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


def collate(examples: list[Example], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad a batch to its longest sequence; padding is masked out of the loss."""
    width = max(len(e.ids) for e in examples)
    ids = np.full((len(examples), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=bool)
    for row, e in enumerate(examples):
        ids[row, :len(e.ids)] = e.ids
        mask[row, :len(e.mask)] = e.mask
    return ids, mask


def data_fingerprint(examples: list[Example]) -> str:
    h = hashlib.sha256()
    for e in examples:
        h.update(e.fingerprint().encode())
    return h.hexdigest()


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    final_train_loss: float = float("nan")
    final_val_loss: float = float("nan")
    steps: int = 0

    def val_losses(self) -> list[float]:
        return [row["val_loss"] for row in self.history if row["val_loss"] is not None]


def evaluate_loss(model: LanguageModel, examples: list[Example], pad_id: int,
                  batch_size: int = 8) -> float:
    """Masked cross-entropy over ``examples`` without touching parameters."""
    total, count = 0.0, 0
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        ids, mask = collate(batch, pad_id)
        if not mask[:, 1:].any():
            continue
        with ad.no_grad():
            out = model.forward_logits(ids)
            loss = masked_cross_entropy(out.logits, ids, mask)
        n = int(mask[:, 1:].sum())
        total += float(loss.data) * n
        count += n
    if count == 0:
        raise ValueError("no maskable positions in evaluation set")
    return total / count


def train_run(model: LanguageModel, train_examples: list[Example],
              val_examples: list[Example], config: TrainConfig, pad_id: int,
              seed_scope: str = "0", out_dir: str | Path | None = None,
              save_checkpoints: bool = False) -> TrainResult:
    """Run ``config.max_epochs`` epochs of masked-LM training.

    Deterministic under (config.seed, seed_scope): batch order, updates and
    checkpoints are reproducible bit for bit. Validation runs once per epoch
    with no parameter updates. Raises TrainingDiverged on non-finite loss.
    """
    if not train_examples:
        raise ValueError("empty training set")
    steps_per_epoch = math.ceil(len(train_examples) / config.batch_size)
    total_steps = steps_per_epoch * config.max_epochs
    if config.warmup_steps >= total_steps:
        raise ValueError(
            f"warmup_steps {config.warmup_steps} must be below total steps {total_steps}"
        )

    optimizer = AdamW(model.params, betas=config.betas, eps=config.eps,
                      weight_decay=config.weight_decay)
    result = TrainResult()
    out_path = Path(out_dir) if out_dir is not None else None
    step = 0
    best_val = float("inf")
    stale = 0

    for epoch in range(config.max_epochs):
        epoch_loss, epoch_batches_done = 0.0, 0
        for batch_idx in epoch_batches(len(train_examples), config.batch_size,
                                       f"{config.seed}/{seed_scope}/{epoch}"):
            batch = [train_examples[i] for i in batch_idx]
            ids, mask = collate(batch, pad_id)
            if not mask[:, 1:].any():
                continue  # nothing to learn from; parameters stay untouched
            step += 1
            lr = lr_at_step(config, step, total_steps)
            out = model.forward_logits(ids)
            loss = masked_cross_entropy(out.logits, ids, mask)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss {float(loss.data)} at epoch {epoch} step {step}"
                )
            optimizer.zero_grad()
            loss.backward()
            if config.clip_norm is not None:
                clip_gradients(model.params, config.clip_norm)
            optimizer.step(lr)
            epoch_loss += float(loss.data)
            epoch_batches_done += 1
            result.history.append({"epoch": epoch, "step": step,
                                   "train_loss": float(loss.data),
                                   "val_loss": None, "lr": lr})

        val_loss = evaluate_loss(model, val_examples, pad_id,
                                 config.batch_size) if val_examples else None
        train_loss = epoch_loss / max(epoch_batches_done, 1)
        result.history.append({"epoch": epoch, "step": step, "train_loss": train_loss,
                               "val_loss": val_loss, "lr": lr_at_step(config, step, total_steps)})
        result.final_train_loss = train_loss
        if val_loss is not None:
            result.final_val_loss = val_loss
        log.info("epoch %d: train %.4f val %s", epoch, train_loss,
                 f"{val_loss:.4f}" if val_loss is not None else "-")

        if save_checkpoints and out_path is not None:
            model.save(out_path / f"epoch_{epoch:03d}")

        if config.patience is not None and val_loss is not None:
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                stale = 0
            else:
                stale += 1
                if stale > config.patience:
                    log.info("early stop after epoch %d (patience %d)", epoch, config.patience)
                    break

    result.steps = step
    if out_path is not None:
        write_loss_curve(out_path / "loss_curve.csv", result.history)
    return result


def write_loss_curve(path: str | Path, history: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "train_loss", "val_loss", "lr"])
        for row in history:
            writer.writerow([row["epoch"], row["step"], f"{row['train_loss']:.10g}",
                             "" if row["val_loss"] is None else f"{row['val_loss']:.10g}",
                             f"{row['lr']:.10g}"])


def write_train_manifest(path: str | Path, config: TrainConfig,
                         train_examples: list[Example], val_examples: list[Example],
                         extra: dict | None = None) -> None:
    """Record every knob plus data fingerprints so a run can be reproduced."""
    payload = {
        "config": {**asdict(config), "betas": list(config.betas)},
        "train_fingerprint": data_fingerprint(train_examples),
        "val_fingerprint": data_fingerprint(val_examples),
        "n_train": len(train_examples),
        "n_val": len(val_examples),
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
