"""Recurrent (LSTM) baseline sharing the Transformer's I/O contract.

Token embeddings plus the same sinusoidal positional encoding feed a standard
gated recurrence (input, forget, cell, output gates in that order); the final
hidden state maps through an affine layer to 7 sigmoid outputs.

Model files use magic "RLSTM1" with the same layout as the Transformer files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from rngaudit import model as _model
from rngaudit.bitstream import VOCAB_SIZE
from rngaudit.sts import N_TESTS

__all__ = [
    "LSTM_MAGIC",
    "LstmConfig",
    "LstmClassifier",
    "init",
    "train",
    "save_model",
    "load_model",
]

LSTM_MAGIC = "RLSTM1"


@dataclass(frozen=True)
class LstmConfig:
    d_model: int = 192
    hidden_size: int = 192
    n_layers: int = 1
    dropout: float = 0.1
    vocab_size: int = VOCAB_SIZE
    n_labels: int = N_TESTS
    max_tokens: int = 512
    positional_encoding: bool = True

    # the shared training loop branches on head behaviour via these
    head_type: str = "Average"
    fixed_tokens: int | None = None

    def __post_init__(self):
        if self.d_model <= 0 or self.hidden_size <= 0 or self.n_layers <= 0:
            raise ValueError("d_model, hidden_size, n_layers must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.vocab_size <= 0 or self.n_labels <= 0 or self.max_tokens <= 0:
            raise ValueError("vocab_size, n_labels, max_tokens must be positive")
        if self.head_type != "Average" or self.fixed_tokens is not None:
            raise ValueError("the recurrent head is length-agnostic")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "hidden_size": self.hidden_size,
            "n_layers": self.n_layers,
            "dropout": self.dropout,
            "vocab_size": self.vocab_size,
            "n_labels": self.n_labels,
            "max_tokens": self.max_tokens,
            "positional_encoding": self.positional_encoding,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LstmConfig":
        return cls(**data)


class LstmCell(nn.Module):
    """One recurrence layer; gate projections stacked as [input, forget,
    cell, output] along the output dimension."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.input_proj = nn.Linear(input_size, 4 * hidden_size)
        self.hidden_proj = nn.Linear(hidden_size, 4 * hidden_size)

    def step(self, x_t: torch.Tensor, h: torch.Tensor, c: torch.Tensor):
        gates = self.input_proj(x_t) + self.hidden_proj(h)
        i, f, g, o = gates.chunk(4, dim=-1)
        i = torch.sigmoid(i)
        f = torch.sigmoid(f)
        g = torch.tanh(g)
        o = torch.sigmoid(o)
        c = f * c + i * g
        h = o * torch.tanh(c)
        return h, c

    def forward(self, x: torch.Tensor):
        batch, length, _ = x.shape
        h = x.new_zeros(batch, self.hidden_size)
        c = x.new_zeros(batch, self.hidden_size)
        outputs = []
        for t in range(length):
            h, c = self.step(x[:, t], h, c)
            outputs.append(h)
        return torch.stack(outputs, dim=1), h


class LstmClassifier(nn.Module):
    def __init__(self, config: LstmConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.register_buffer(
            "pe",
            _model.sinusoidal_positional_encoding(config.max_tokens,
                                                  config.d_model),
            persistent=False,
        )
        self.cells = nn.ModuleList(
            LstmCell(config.d_model if i == 0 else config.hidden_size,
                     config.hidden_size)
            for i in range(config.n_layers)
        )
        self.dropout = nn.Dropout(config.dropout)
        self.head = nn.Linear(config.hidden_size, config.n_labels)

    def forward(self, tokens: torch.Tensor):
        cfg = self.config
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        length = tokens.shape[1]
        if length > cfg.max_tokens:
            raise ValueError(f"sequence of {length} tokens exceeds max_tokens "
                             f"{cfg.max_tokens}")
        if int(tokens.max()) >= cfg.vocab_size or int(tokens.min()) < 0:
            raise ValueError("token id outside vocabulary")
        x = self.embedding(tokens)
        if cfg.positional_encoding:
            x = x + self.pe[:length].to(x.dtype)
        x = self.dropout(x)
        final = None
        for cell in self.cells:
            x, final = cell(x)
            x = self.dropout(x)
        return self.head(final)


def init(config: LstmConfig, seed: int = 0,
         dtype: torch.dtype = torch.float32) -> LstmClassifier:
    torch.manual_seed(seed)
    net = LstmClassifier(config)
    _model._init_weights(net, config.d_model)
    return net.to(dtype)


def train(config: LstmConfig, train_cfg: _model.TrainConfig, train_records,
          val_records) -> tuple[LstmClassifier, list[dict]]:
    net = init(config, seed=train_cfg.seed)
    return _model.train(config, train_cfg, train_records, val_records,
                        model=net)


def save_model(path: str, net: LstmClassifier) -> None:
    _model.save_model(path, net, magic=LSTM_MAGIC)


def load_model(path: str) -> LstmClassifier:
    header, blob = _model._load_raw(path, LSTM_MAGIC)
    config = LstmConfig.from_dict(header["config"])
    net = LstmClassifier(config)
    _model._fill_params(net, header, blob, path)
    net.eval()
    return net
