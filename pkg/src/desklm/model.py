"""Decoder-only transformer: pre-norm RMS blocks, rotary attention, gated MLP.

The architecture is fixed by its exact trainable-parameter count: untied
input/output embeddings, no bias terms anywhere, per layer four square
attention projections, a three-matrix gated MLP with intermediate size
4*hidden, two norm scales, plus one final norm scale.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_length: int
    hidden_size: int
    num_heads: int
    num_layers: int
    tied_embeddings: bool = False
    rope_base: float = 10_000.0
    norm_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def intermediate_size(self) -> int:
        return 4 * self.hidden_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# The two reference architectures (140M / 100M trainable parameters).
CONFIG_140M = ModelConfig(vocab_size=32_000, max_length=6_144, hidden_size=704,
                          num_heads=11, num_layers=12)
CONFIG_100M = ModelConfig(vocab_size=16_384, max_length=6_000, hidden_size=512,
                          num_heads=8, num_layers=20)


def param_count(config: ModelConfig) -> int:
    """Exact trainable-parameter count for ``config``.

    Untied embeddings contribute 2*V*H (V*H if tied); each layer contributes
    4*H^2 attention projections, 3*H*(4H) gated-MLP matrices and 2 norm
    scales; one final norm scale of size H closes the stack.
    """
    v, h, n = config.vocab_size, config.hidden_size, config.num_layers
    inter = config.intermediate_size
    embeddings = v * h if config.tied_embeddings else 2 * v * h
    per_layer = 4 * h * h + 3 * h * inter + 2 * h
    return embeddings + n * per_layer + h


def init_parameters(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh trainable tensors: normal(0, init_std) matrices, ones for norms."""
    rng = np.random.default_rng([seed, 0x6D6F64])
    params: dict[str, Tensor] = {}

    def matrix(name, shape):
        params[name] = Tensor(
            rng.normal(0.0, config.init_std, size=shape).astype(dtype), requires_grad=True
        )

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    h, inter = config.hidden_size, config.intermediate_size
    matrix("embed", (config.vocab_size, h))
    for i in range(config.num_layers):
        for proj in ("wq", "wk", "wv", "wo"):
            matrix(f"layers.{i}.{proj}", (h, h))
        matrix(f"layers.{i}.w_gate", (h, inter))
        matrix(f"layers.{i}.w_up", (h, inter))
        matrix(f"layers.{i}.w_down", (inter, h))
        ones(f"layers.{i}.attn_norm", (h,))
        ones(f"layers.{i}.mlp_norm", (h,))
    ones("final_norm", (h,))
    if not config.tied_embeddings:
        matrix("head", (h, config.vocab_size))
    return params


@dataclass
class ForwardOutput:
    logits: Tensor        # (batch, seq, vocab) or (seq, vocab) for 1-D input
    hidden: Tensor | None = None  # final-norm hidden states, same leading shape


def _rms_norm(x: Tensor, scale: Tensor, eps: float) -> Tensor:
    variance = ad.mean(ad.mul(x, x), axis=-1, keepdims=True)
    inv = ad.power(ad.add(variance, eps), -0.5)
    return ad.mul(ad.mul(x, inv), scale)


class LanguageModel:
    """Bundles a config with its parameters; forward pass and scoring."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed, dtype)
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def parameter_tensors(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _rope(self, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
        cached = self._rope_cache.get(seq_len)
        if cached is not None and cached[0].dtype == self.dtype:
            return cached
        half = self.config.head_dim // 2
        freqs = self.config.rope_base ** (-np.arange(0, half, dtype=np.float64) / half)
        angles = np.outer(np.arange(seq_len, dtype=np.float64), freqs)
        pair = (np.cos(angles).astype(self.dtype), np.sin(angles).astype(self.dtype))
        self._rope_cache[seq_len] = pair
        return pair

    def _validate_ids(self, ids: np.ndarray):
        if ids.shape[-1] > self.config.max_length:
            raise ValueError(
                f"sequence length {ids.shape[-1]} exceeds max_length {self.config.max_length}"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError("token id out of range")

    def forward_logits(self, ids) -> ForwardOutput:
        """Causal logits over ``ids``; logits[t] depends only on ids[0..t]."""
        ids = np.asarray(ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ValueError("ids must be a non-empty 1-D or 2-D integer array")
        self._validate_ids(ids)

        cfg = self.config
        p = self.params
        batch, seq = ids.shape
        cos, sin = self._rope(seq)

        x = ad.embedding(p["embed"], ids)                      # (B, T, H)
        causal = np.triu(
            np.full((seq, seq), np.asarray(-1e30, dtype=self.dtype)), k=1
        )
        scale = 1.0 / np.sqrt(cfg.head_dim)

        for i in range(cfg.num_layers):
            h = _rms_norm(x, p[f"layers.{i}.attn_norm"], cfg.norm_eps)
            q = ad.matmul(h, p[f"layers.{i}.wq"])
            k = ad.matmul(h, p[f"layers.{i}.wk"])
            v = ad.matmul(h, p[f"layers.{i}.wv"])
            # (B, T, H) -> (B, heads, T, head_dim)
            q = ad.transpose(ad.reshape(q, (batch, seq, cfg.num_heads, cfg.head_dim)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (batch, seq, cfg.num_heads, cfg.head_dim)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (batch, seq, cfg.num_heads, cfg.head_dim)), (0, 2, 1, 3))
            q = ad.apply_rotary(q, cos, sin)
            k = ad.apply_rotary(k, cos, sin)
            scores = ad.add(ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale), causal)
            attn = ad.softmax(scores, axis=-1)
            ctx = ad.matmul(attn, v)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, seq, cfg.hidden_size))
            x = ad.add(x, ad.matmul(ctx, p[f"layers.{i}.wo"]))

            h = _rms_norm(x, p[f"layers.{i}.mlp_norm"], cfg.norm_eps)
            gate = ad.silu(ad.matmul(h, p[f"layers.{i}.w_gate"]))
            up = ad.matmul(h, p[f"layers.{i}.w_up"])
            x = ad.add(x, ad.matmul(ad.mul(gate, up), p[f"layers.{i}.w_down"]))

        hidden = _rms_norm(x, p["final_norm"], cfg.norm_eps)
        head = p["embed"] if cfg.tied_embeddings else p["head"]
        if cfg.tied_embeddings:
            logits = ad.matmul(hidden, ad.transpose(head, (1, 0)))
        else:
            logits = ad.matmul(hidden, head)

        if squeeze:
            logits = ad.reshape(logits, (seq, cfg.vocab_size))
            hidden = ad.reshape(hidden, (seq, cfg.hidden_size))
        return ForwardOutput(logits=logits, hidden=hidden)

    def sequence_logprob(self, ids, span: tuple[int, int] | None = None) -> float:
        """Sum of log p(ids[t] | ids[<t]) for t in ``span`` (default all t >= 1)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError("sequence_logprob takes a single 1-D sequence")
        n = ids.shape[0]
        if n < 2:
            raise ValueError("need at least 2 tokens to score a sequence")
        if span is None:
            span = (1, n)
        start, end = span
        if not (1 <= start < end <= n):
            raise ValueError(f"span {span} outside [1, {n})")

        with ad.no_grad():
            logits = self.forward_logits(ids).logits.data.astype(np.float64)
        rows = logits[start - 1:end - 1]
        shifted = rows - rows.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1))
        picked = shifted[np.arange(end - start), ids[start:end]]
        return float((picked - logz).sum())

    # -- persistence -------------------------------------------------------
    def save(self, directory, extra_meta: dict | None = None) -> None:
        """Write a checkpoint: JSON manifest + raw little-endian tensor blob."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = sorted(self.params)
        blob = bytearray()
        manifest_tensors = []
        for name in names:
            arr = self.params[name].data
            raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            manifest_tensors.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": len(blob),
                "nbytes": len(raw),
            })
            blob.extend(raw)
        manifest = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": self.config.to_dict(),
            "tensors": manifest_tensors,
            "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
        }
        if extra_meta:
            manifest["meta"] = extra_meta
        (directory / "model.bin").write_bytes(bytes(blob))
        (directory / "model.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, directory) -> "LanguageModel":
        directory = Path(directory)
        manifest = json.loads((directory / "model.json").read_text(encoding="utf-8"))
        if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['format_version']}")
        blob = (directory / "model.bin").read_bytes()
        if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
            raise ValueError("checkpoint blob does not match its recorded digest")
        config = ModelConfig.from_dict(manifest["config"])
        params: dict[str, Tensor] = {}
        for spec in manifest["tensors"]:
            dt = np.dtype(spec["dtype"]).newbyteorder("<")
            arr = np.frombuffer(
                blob, dtype=dt, count=int(np.prod(spec["shape"])) if spec["shape"] else 1,
                offset=spec["offset"],
            ).reshape(spec["shape"]).astype(spec["dtype"], copy=True)
            params[spec["name"]] = Tensor(arr, requires_grad=True)
        return cls(config, params=params)
