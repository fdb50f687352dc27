"""Augmentations that turn random bits into sequences failing targeted tests.

Each transform targets one statistical test, but ground-truth labels always
come from running the test suite on the output, never from the transform's
intent. AugmentSpec validates intensities against the documented corpus
ranges; the bare functions accept anything mathematically valid so controls
(for example bias 0.5) remain expressible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from rngaudit.bitstream import BitSequence

__all__ = [
    "AUGMENT_KINDS",
    "AugmentSpec",
    "bias_bits",
    "constant_blocks",
    "inject_long_run",
    "sort_chunks",
    "stamp_template",
    "apply",
    "sample_spec",
]

AUGMENT_KINDS = (
    "Identity",
    "BiasBits",
    "ConstantBlocks",
    "InjectLongRun",
    "SortChunks",
    "StampTemplate",
)

# documented intensity ranges, used both for spec validation and for the
# per-record intensity sampling the corpus builder does
_RANGES = {
    "BiasBits": {"ones_probability": (0.55, 0.95)},
    "ConstantBlocks": {"block_bits": (1, 1 << 30), "fraction": (0.0, 1.0)},
    "InjectLongRun": {"run_length": (8, 64), "count": (1, 1 << 30)},
    "SortChunks": {"chunk_bits": (1, 1 << 30)},
    "StampTemplate": {"copies": (8, 1 << 30)},
}

_DEFAULT_PARAMS = {
    "Identity": {},
    "BiasBits": {"ones_probability": 0.7},
    "ConstantBlocks": {"block_bits": 128, "fraction": 1.0},
    "InjectLongRun": {"run_length": 40, "count": 4},
    "SortChunks": {"chunk_bits": 64},
    "StampTemplate": {"template": "000000001", "copies": 40},
}


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    seed: int = 0
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        merged = dict(_DEFAULT_PARAMS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        merged.update(self.params)
        for name, (lo, hi) in _RANGES.get(self.kind, {}).items():
            value = merged[name]
            if not (lo <= value <= hi):
                raise ValueError(
                    f"{self.kind}.{name}={value} outside documented range "
                    f"[{lo}, {hi}]"
                )
        if self.kind == "ConstantBlocks" and merged["fraction"] <= 0.0:
            raise ValueError("ConstantBlocks.fraction must be in (0, 1]")
        object.__setattr__(self, "params", merged)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": int(self.seed),
                "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentSpec":
        return cls(kind=data["kind"], seed=int(data["seed"]),
                   params=data.get("params", {}))


def bias_bits(seq: BitSequence, ones_probability: float, seed: int) -> BitSequence:
    """Resample every bit as an independent coin with the given ones bias."""
    if not (0.0 <= ones_probability <= 1.0):
        raise ValueError(f"ones_probability {ones_probability} outside [0, 1]")
    rng = np.random.default_rng(seed)
    bits = (rng.random(seq.n) < ones_probability).astype(np.uint8)
    return BitSequence(bits)


def constant_blocks(
    seq: BitSequence, block_bits: int = 128, fraction: float = 1.0, seed: int = 0
) -> BitSequence:
    """Overwrite a fraction of the blocks with all-zeros or all-ones."""
    if block_bits <= 0 or block_bits > seq.n:
        raise ValueError(f"block_bits {block_bits} outside [1, {seq.n}]")
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    rng = np.random.default_rng(seed)
    n_blocks = seq.n // block_bits
    n_pick = int(round(fraction * n_blocks))
    bits = seq.bits.copy()
    if n_pick:
        picked = rng.choice(n_blocks, size=n_pick, replace=False)
        fills = rng.integers(0, 2, size=n_pick, dtype=np.uint8)
        for b, fill in zip(picked, fills):
            bits[b * block_bits : (b + 1) * block_bits] = fill
    return BitSequence(bits)


def _place_non_overlapping(rng, n: int, length: int, count: int) -> np.ndarray:
    """Uniformly random start offsets of `count` disjoint length-L windows."""
    slack = n - count * length + count
    u = np.sort(rng.choice(slack, size=count, replace=False))
    return u + np.arange(count) * (length - 1)


def inject_long_run(
    seq: BitSequence, run_length: int = 40, count: int = 4, seed: int = 0
) -> BitSequence:
    """Overwrite `count` disjoint windows with runs of ones of exact length."""
    if not (8 <= run_length <= 64):
        raise ValueError(f"run_length {run_length} outside [8, 64]")
    if count < 1:
        raise ValueError("count must be >= 1")
    if count * run_length > seq.n:
        raise ValueError(
            f"cannot place {count} runs of {run_length} bits in {seq.n} bits"
        )
    rng = np.random.default_rng(seed)
    starts = _place_non_overlapping(rng, seq.n, run_length, count)
    bits = seq.bits.copy()
    for s in starts:
        bits[s : s + run_length] = 1
    return BitSequence(bits)


def sort_chunks(seq: BitSequence, chunk_bits: int = 64, seed: int = 0) -> BitSequence:
    """Sort each chunk in place (zeros then ones); popcounts are preserved."""
    if chunk_bits <= 0 or seq.n % chunk_bits != 0:
        raise ValueError(f"chunk_bits {chunk_bits} must divide n={seq.n}")
    chunks = seq.bits.reshape(-1, chunk_bits)
    return BitSequence(np.sort(chunks, axis=1).ravel())


def stamp_template(
    seq: BitSequence, template: str = "000000001", copies: int = 40, seed: int = 0
) -> BitSequence:
    """Overwrite `copies` disjoint windows with the template bits."""
    if not template or set(template) - {"0", "1"}:
        raise ValueError("template must be a non-empty '0'/'1' string")
    if copies < 8:
        raise ValueError("copies must be >= 8")
    tmpl = np.array([int(c) for c in template], dtype=np.uint8)
    m = tmpl.size
    if copies * m > seq.n:
        raise ValueError(
            f"cannot place {copies} copies of a {m}-bit template in {seq.n} bits"
        )
    rng = np.random.default_rng(seed)
    starts = _place_non_overlapping(rng, seq.n, m, copies)
    bits = seq.bits.copy()
    for s in starts:
        bits[s : s + m] = tmpl
    return BitSequence(bits)


def apply(spec: AugmentSpec, seq: BitSequence) -> BitSequence:
    """Dispatch on spec.kind; Identity returns the input unchanged."""
    p = spec.params
    if spec.kind == "Identity":
        return seq
    if spec.kind == "BiasBits":
        return bias_bits(seq, p["ones_probability"], spec.seed)
    if spec.kind == "ConstantBlocks":
        return constant_blocks(seq, p["block_bits"], p["fraction"], spec.seed)
    if spec.kind == "InjectLongRun":
        return inject_long_run(seq, p["run_length"], p["count"], spec.seed)
    if spec.kind == "SortChunks":
        return sort_chunks(seq, p["chunk_bits"], spec.seed)
    if spec.kind == "StampTemplate":
        return stamp_template(seq, p["template"], p["copies"], spec.seed)
    raise ValueError(f"unknown augmentation kind {spec.kind!r}")


def sample_spec(kind: str, n_bits: int, rng: np.random.Generator, seed: int) -> AugmentSpec:
    """Draw kind-specific intensities uniformly over the documented ranges."""
    if kind in ("Identity", "SortChunks"):
        return AugmentSpec(kind=kind, seed=seed)
    if kind == "BiasBits":
        p = float(rng.uniform(0.55, 0.95))
        return AugmentSpec(kind=kind, seed=seed,
                           params={"ones_probability": round(p, 6)})
    if kind == "ConstantBlocks":
        fraction = float(rng.uniform(0.25, 1.0))
        return AugmentSpec(kind=kind, seed=seed,
                           params={"fraction": round(fraction, 6)})
    if kind == "InjectLongRun":
        run_length = int(rng.integers(8, 65))
        count = int(rng.integers(1, max(2, min(4, n_bits // run_length)) + 1))
        return AugmentSpec(kind=kind, seed=seed,
                           params={"run_length": run_length, "count": count})
    if kind == "StampTemplate":
        copies = int(rng.integers(8, max(9, min(48, n_bits // 9 - 8)) + 1))
        return AugmentSpec(kind=kind, seed=seed, params={"copies": copies})
    raise ValueError(f"unknown augmentation kind {kind!r}")
