"""Encoder-only Transformer multi-label classifier and its training loop.

Architecture per the classic encoder: token embedding plus sinusoidal
positional encoding added directly, post-layer-norm encoder blocks
(self-attention, add & norm, position-wise feed-forward, add & norm), then
either an Average head (mean over the sequence-length dimension, accepting
variable lengths) or a Flatten head (concatenating all positions, fixing the
length), and a final affine map to 7 sigmoid outputs.

Model files: magic "RTNN1", one JSON header line describing the config and
the parameter order, then flat float32 little-endian arrays in that order.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from rngaudit import metrics
from rngaudit.bitstream import VOCAB_SIZE, BitSequence, tokenize
from rngaudit.sts import N_TESTS

__all__ = [
    "MODEL_MAGIC",
    "ModelConfig",
    "TrainConfig",
    "Prediction",
    "TrainingError",
    "TransformerClassifier",
    "init",
    "forward",
    "bce_loss",
    "train",
    "predict_batch",
    "predict_probs",
    "classify",
    "save_model",
    "load_model",
    "DEFAULT_CONFIG",
    "OPTIMAL_CONFIG",
]

MODEL_MAGIC = "RTNN1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 240
    n_layers: int = 3
    n_heads: int = 8
    ffn_dim: int | None = None  # defaults to 4 * d_model
    head_type: str = "Average"
    fixed_tokens: int | None = None
    dropout: float = 0.1
    vocab_size: int = VOCAB_SIZE
    n_labels: int = N_TESTS
    max_tokens: int = 512
    positional_encoding: bool = True

    def __post_init__(self):
        if self.d_model <= 0 or self.n_layers <= 0 or self.n_heads <= 0:
            raise ValueError("d_model, n_layers, n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)
        if self.ffn_dim <= 0:
            raise ValueError("ffn_dim must be positive")
        if self.head_type not in ("Average", "Flatten"):
            raise ValueError(f"unknown head_type {self.head_type!r}")
        if self.head_type == "Flatten" and not self.fixed_tokens:
            raise ValueError("Flatten head requires fixed_tokens")
        if self.head_type == "Average" and self.fixed_tokens is not None:
            raise ValueError("Average head forbids fixed_tokens")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.vocab_size <= 0 or self.n_labels <= 0 or self.max_tokens <= 0:
            raise ValueError("vocab_size, n_labels, max_tokens must be positive")
        if self.fixed_tokens is not None and self.fixed_tokens > self.max_tokens:
            raise ValueError("fixed_tokens exceeds max_tokens")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ffn_dim": self.ffn_dim,
            "head_type": self.head_type,
            "fixed_tokens": self.fixed_tokens,
            "dropout": self.dropout,
            "vocab_size": self.vocab_size,
            "n_labels": self.n_labels,
            "max_tokens": self.max_tokens,
            "positional_encoding": self.positional_encoding,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


DEFAULT_CONFIG = ModelConfig()
OPTIMAL_CONFIG = ModelConfig(d_model=192, n_layers=1, n_heads=1)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    threshold: float = 0.5
    min_delta: float = 1e-4
    threads: int | None = None

    def __post_init__(self):
        if self.batch_size <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ValueError("batch_size, max_epochs, patience must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must be in [0, 1)")


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (N_TESTS,):
            raise ValueError(f"probs must have shape ({N_TESTS},)")
        if not np.all((probs >= 0.0) & (probs <= 1.0)):
            raise ValueError("probabilities must lie in [0, 1]")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


def sinusoidal_positional_encoding(max_tokens: int, d_model: int) -> torch.Tensor:
    position = np.arange(max_tokens)[:, None]
    div = np.exp(np.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
    table = np.zeros((max_tokens, d_model))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: d_model // 2])
    return torch.from_numpy(table).float()


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor):
        batch, length, d_model = x.shape
        def split(t):
            return t.view(batch, length, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        weights = torch.softmax(scores, dim=-1)
        context = (weights @ v).transpose(1, 2).reshape(batch, length, d_model)
        return self.out(context), weights


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.attention = MultiHeadSelfAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn1 = nn.Linear(d_model, ffn_dim)
        self.ffn2 = nn.Linear(ffn_dim, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor):
        attended, weights = self.attention(x)
        x = self.norm1(x + self.dropout(attended))
        fed = self.ffn2(torch.relu(self.ffn1(x)))
        x = self.norm2(x + self.dropout(fed))
        return x, weights


class TransformerClassifier(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.register_buffer(
            "pe",
            sinusoidal_positional_encoding(config.max_tokens, config.d_model),
            persistent=False,
        )
        self.layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.ffn_dim,
                         config.dropout)
            for _ in range(config.n_layers)
        )
        self.dropout = nn.Dropout(config.dropout)
        head_in = (
            config.d_model
            if config.head_type == "Average"
            else config.fixed_tokens * config.d_model
        )
        self.head = nn.Linear(head_in, config.n_labels)

    def forward(self, tokens: torch.Tensor, return_attention: bool = False):
        cfg = self.config
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        length = tokens.shape[1]
        if cfg.head_type == "Flatten" and length != cfg.fixed_tokens:
            raise ValueError(
                f"Flatten head requires exactly {cfg.fixed_tokens} tokens, "
                f"got {length}"
            )
        if length > cfg.max_tokens:
            raise ValueError(f"sequence of {length} tokens exceeds max_tokens "
                             f"{cfg.max_tokens}")
        if int(tokens.max()) >= cfg.vocab_size or int(tokens.min()) < 0:
            raise ValueError("token id outside vocabulary")
        x = self.embedding(tokens)
        if cfg.positional_encoding:
            x = x + self.pe[:length].to(x.dtype)
        x = self.dropout(x)
        attention = []
        for layer in self.layers:
            x, weights = layer(x)
            if return_attention:
                attention.append(weights)
        if cfg.head_type == "Average":
            pooled = x.mean(dim=1)
        else:
            pooled = x.reshape(x.shape[0], -1)
        logits = self.head(pooled)
        if return_attention:
            return logits, attention
        return logits


def _init_weights(module: nn.Module, d_model: int) -> None:
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            bound = 1.0 / math.sqrt(sub.in_features)
            nn.init.uniform_(sub.weight, -bound, bound)
            nn.init.uniform_(sub.bias, -bound, bound)
        elif isinstance(sub, nn.Embedding):
            bound = 1.0 / math.sqrt(d_model)
            nn.init.uniform_(sub.weight, -bound, bound)
        elif isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)


def init(config: ModelConfig, seed: int = 0,
         dtype: torch.dtype = torch.float32) -> TransformerClassifier:
    """Deterministic seeded initialization: scaled uniform for embeddings and
    linear layers, layer-norm scale 1 and offset 0."""
    torch.manual_seed(seed)
    model = TransformerClassifier(config)
    _init_weights(model, config.d_model)
    return model.to(dtype)


def _to_token_tensor(item) -> torch.Tensor:
    if isinstance(item, BitSequence):
        item = tokenize(item)
    tokens = np.array(getattr(item, "tokens", item), dtype=np.int64, copy=True)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("expected a non-empty 1-D token sequence")
    return torch.from_numpy(tokens)


def forward(model: nn.Module, item, train_mode: bool = False) -> Prediction:
    """Single-input forward pass returning 7 pass probabilities."""
    tokens = _to_token_tensor(item).unsqueeze(0)
    model.train(train_mode)
    context = torch.enable_grad() if train_mode else torch.no_grad()
    with context:
        logits = model(tokens)
        probs = torch.sigmoid(logits)[0]
    model.eval()
    return Prediction(probs=probs.detach().cpu().numpy())


def bce_loss(pred, label) -> torch.Tensor:
    """Mean binary cross entropy with probabilities clamped to
    [1e-7, 1 - 1e-7]; accepts single vectors or batches."""
    if isinstance(pred, Prediction):
        pred = pred.probs
    probs = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(
        np.asarray(pred, dtype=np.float64)
    )
    target = label if isinstance(label, torch.Tensor) else torch.as_tensor(
        np.asarray(label, dtype=np.float64)
    )
    target = target.to(probs.dtype)
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs "
                         f"{tuple(target.shape)}")
    clamped = torch.clamp(probs, 1e-7, 1.0 - 1e-7)
    loss = -(target * torch.log(clamped) + (1 - target) * torch.log(1 - clamped))
    return loss.mean()


def _group_records(records, config: ModelConfig):
    """Tokenize and group corpus records by token length."""
    groups: dict[int, list[int]] = {}
    tokens = []
    labels = []
    for i, rec in enumerate(records):
        t = _to_token_tensor(rec.seq)
        tokens.append(t)
        labels.append(np.asarray(rec.label, dtype=np.float32))
        groups.setdefault(t.shape[0], []).append(i)
    if config.head_type == "Flatten":
        lengths = sorted(groups)
        if lengths != [config.fixed_tokens]:
            raise ValueError(
                f"Flatten head with fixed_tokens={config.fixed_tokens} cannot "
                f"train on token lengths {lengths}"
            )
    out = {}
    for length, idxs in groups.items():
        out[length] = (
            torch.stack([tokens[i] for i in idxs]),
            torch.from_numpy(np.stack([labels[i] for i in idxs])),
        )
    return out


def _eval_macro_f1(model, groups, threshold: float, batch_size: int = 512) -> float:
    preds = []
    truths = []
    model.eval()
    with torch.no_grad():
        for tokens, labels in groups.values():
            for lo in range(0, tokens.shape[0], batch_size):
                logits = model(tokens[lo : lo + batch_size])
                preds.append(torch.sigmoid(logits).numpy() >= threshold)
                truths.append(labels[lo : lo + batch_size].numpy() >= 0.5)
    counts = metrics.accumulate(np.concatenate(preds), np.concatenate(truths))
    return metrics.macro_f1(counts)


def train(
    config: ModelConfig,
    train_cfg: TrainConfig,
    train_records,
    val_records,
    model: nn.Module | None = None,
) -> tuple[nn.Module, list[dict]]:
    """Mini-batch Adam training with early stopping on validation macro F1.

    Mixed-length corpora (Average head) interleave equal-weight per-length
    batches. Returns the parameters from the best validation epoch and the
    per-epoch history.
    """
    if not train_records or not val_records:
        raise ValueError("train and validation sets must be non-empty")
    if train_cfg.threads:
        torch.set_num_threads(train_cfg.threads)
    if model is None:
        model = init(config, seed=train_cfg.seed)
    train_groups = _group_records(train_records, config)
    val_groups = _group_records(val_records, config)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_cfg.learning_rate,
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.eps,
    )
    rng = np.random.default_rng(train_cfg.seed)
    history: list[dict] = []
    best_f1 = -1.0
    best_state = None
    stale = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        batches = []
        for length, (tokens, labels) in train_groups.items():
            order = rng.permutation(tokens.shape[0])
            for lo in range(0, order.size, train_cfg.batch_size):
                batches.append((length, order[lo : lo + train_cfg.batch_size]))
        rng.shuffle(batches)

        model.train()
        loss_total = 0.0
        seen = 0
        batch_f1_total = 0.0
        for b, (length, idx) in enumerate(batches):
            tokens, labels = train_groups[length]
            batch_tokens = tokens[idx]
            batch_labels = labels[idx]
            logits = model(batch_tokens)
            probs = torch.sigmoid(logits)
            loss = bce_loss(probs, batch_labels)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b + 1}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_total += loss.detach().item() * idx.size
            seen += idx.size
            with torch.no_grad():
                pred = probs.numpy() >= train_cfg.threshold
            counts = metrics.accumulate(pred, batch_labels.numpy() >= 0.5)
            batch_f1_total += metrics.micro_f1(counts)

        val_macro = _eval_macro_f1(model, val_groups, train_cfg.threshold)
        history.append(
            {
                "epoch": epoch,
                "train_loss": loss_total / seen,
                "train_batch_f1": batch_f1_total / len(batches),
                "val_macro_f1": val_macro,
            }
        )
        if val_macro > best_f1 + train_cfg.min_delta:
            best_f1 = val_macro
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def predict_probs(model: nn.Module, items, batch_size: int = 512) -> np.ndarray:
    """(records, 7) probability matrix; batches group same-length inputs."""
    tokens = [_to_token_tensor(item) for item in items]
    out = np.empty((len(tokens), N_TESTS), dtype=np.float64)
    by_length: dict[int, list[int]] = {}
    for i, t in enumerate(tokens):
        by_length.setdefault(t.shape[0], []).append(i)
    model.eval()
    with torch.no_grad():
        for idxs in by_length.values():
            stacked = torch.stack([tokens[i] for i in idxs])
            for lo in range(0, len(idxs), batch_size):
                chunk = stacked[lo : lo + batch_size]
                probs = torch.sigmoid(model(chunk)).cpu().numpy()
                for row, i in enumerate(idxs[lo : lo + batch_size]):
                    out[i] = probs[row]
    return out


def predict_batch(model: nn.Module, items, batch_size: int = 512) -> list[Prediction]:
    return [Prediction(probs=row) for row in predict_probs(model, items, batch_size)]


def classify(pred, threshold: float = 0.5) -> np.ndarray:
    """Probability >= threshold counts as a pass."""
    probs = pred.probs if isinstance(pred, Prediction) else np.asarray(pred)
    return probs >= threshold


# -- persistence ----------------------------------------------------------------

def _param_manifest(model: nn.Module) -> list[tuple[str, list[int]]]:
    return [(name, list(p.shape)) for name, p in model.named_parameters()]


def save_model(path: str, model: nn.Module, magic: str = MODEL_MAGIC) -> None:
    header = {
        "config": model.config.to_dict(),
        "params": [[name, shape] for name, shape in _param_manifest(model)],
    }
    with open(path, "wb") as fh:
        fh.write(magic.encode() + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, p in model.named_parameters():
            fh.write(p.detach().cpu().numpy().astype("<f4").tobytes())


def _load_raw(path: str, magic: str):
    with open(path, "rb") as fh:
        got = fh.readline().rstrip(b"\n").decode(errors="replace")
        if got != magic:
            raise ValueError(f"bad model magic {got!r}; expected {magic!r}")
        header = json.loads(fh.readline().decode())
        blob = fh.read()
    return header, blob


def _fill_params(model: nn.Module, header: dict, blob: bytes, path: str) -> None:
    expected = [[name, list(shape)] for name, shape in _param_manifest(model)]
    if header["params"] != expected:
        raise ValueError(f"{path}: header parameter list does not match config")
    offset = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            nbytes = p.numel() * 4
            chunk = blob[offset : offset + nbytes]
            if len(chunk) != nbytes:
                raise ValueError(
                    f"{path}: truncated parameter data at {name!r} "
                    f"(needed {nbytes} bytes, got {len(chunk)})"
                )
            arr = np.frombuffer(chunk, dtype="<f4").reshape(tuple(p.shape))
            p.copy_(torch.from_numpy(arr.copy()))
            offset += nbytes
    if offset != len(blob):
        raise ValueError(
            f"{path}: {len(blob) - offset} trailing bytes beyond declared shapes"
        )


def load_model(path: str) -> TransformerClassifier:
    header, blob = _load_raw(path, MODEL_MAGIC)
    config = ModelConfig.from_dict(header["config"])
    model = TransformerClassifier(config)
    _fill_params(model, header, blob, path)
    model.eval()
    return model
