"""Labeled-corpus construction, persistence, and label verification.

A corpus is `count` sequences of one fixed bit length: an Identity fraction
of raw CSPRNG output plus augmented sequences drawn across the five transform
kinds, labeled by the statistical-test suite, shuffled, and split 60-20-20.
Records persist as text lines `id,bits,hex_sequence,label7`; the manifest is
a separate JSON file carrying the build parameters.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from rngaudit import augment as aug
from rngaudit import sts
from rngaudit.bitstream import (
    CORPUS_BIT_SIZES,
    BitSequence,
    _random_bit_matrix,
    from_hex,
    to_hex,
)

__all__ = [
    "FORMAT_VERSION",
    "DEFAULT_MIX",
    "LabeledSequence",
    "CorpusManifest",
    "CorpusFormatError",
    "build_corpus",
    "write_corpus",
    "read_corpus",
    "verify_labels",
]

FORMAT_VERSION = "rngaudit-corpus-v1"

DEFAULT_MIX = {
    "Identity": 0.5,
    "BiasBits": 0.1,
    "ConstantBlocks": 0.1,
    "InjectLongRun": 0.1,
    "SortChunks": 0.1,
    "StampTemplate": 0.1,
}

PARTITIONS = ("train", "val", "test")


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledSequence:
    """One corpus record.

    provenance records how the sequence was derived; it is build metadata and
    is not persisted, so equality ignores it.
    """

    id: int
    seq: BitSequence
    label: np.ndarray
    provenance: aug.AugmentSpec | None = None

    def __post_init__(self):
        label = np.asarray(self.label, dtype=bool)
        if label.shape != (sts.N_TESTS,):
            raise ValueError(f"label must have {sts.N_TESTS} entries")
        label.setflags(write=False)
        object.__setattr__(self, "label", label)

    def __eq__(self, other):
        return (
            isinstance(other, LabeledSequence)
            and self.id == other.id
            and self.seq == other.seq
            and bool(np.all(self.label == other.label))
        )


@dataclass(frozen=True)
class CorpusManifest:
    bits: int
    count: int
    split_counts: dict
    seed: int
    mix: dict
    alpha: dict
    format_version: str = FORMAT_VERSION

    def __post_init__(self):
        if set(self.split_counts) != set(PARTITIONS):
            raise ValueError("split_counts must have train/val/test entries")
        if sum(self.split_counts.values()) != self.count:
            raise ValueError("split counts must sum to total count")

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": self.format_version,
                "bits": self.bits,
                "count": self.count,
                "split_counts": dict(self.split_counts),
                "seed": self.seed,
                "mix": dict(self.mix),
                "alpha": dict(self.alpha),
            },
            indent=2,
            sort_keys=True,
        ) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        data = json.loads(text)
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise CorpusFormatError(
                f"unsupported corpus format version {version!r}; "
                f"expected {FORMAT_VERSION!r}"
            )
        return cls(
            bits=int(data["bits"]),
            count=int(data["count"]),
            split_counts={k: int(v) for k, v in data["split_counts"].items()},
            seed=int(data["seed"]),
            mix={k: float(v) for k, v in data["mix"].items()},
            alpha={k: float(v) for k, v in data["alpha"].items()},
        )

    def policy(self) -> sts.LabelPolicy:
        return sts.LabelPolicy({t: self.alpha[t.value] for t in sts.TEST_ORDER})


def _validate_mix(mix: dict) -> dict:
    unknown = set(mix) - set(aug.AUGMENT_KINDS)
    if unknown:
        raise ValueError(f"unknown augmentation kinds in mix: {sorted(unknown)}")
    if any(f < 0 for f in mix.values()):
        raise ValueError("mix fractions must be non-negative")
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ValueError(f"mix fractions must sum to 1, got {sum(mix.values())}")
    return {k: float(mix.get(k, 0.0)) for k in aug.AUGMENT_KINDS}


def _kind_quotas(mix: dict, count: int) -> list[str]:
    """Exact largest-remainder apportionment of records to kinds."""
    quotas = {k: mix[k] * count for k in aug.AUGMENT_KINDS}
    counts = {k: int(math.floor(q)) for k, q in quotas.items()}
    short = count - sum(counts.values())
    by_remainder = sorted(
        aug.AUGMENT_KINDS, key=lambda k: quotas[k] - counts[k], reverse=True
    )
    for k in by_remainder[:short]:
        counts[k] += 1
    out = []
    for k in aug.AUGMENT_KINDS:
        out.extend([k] * counts[k])
    return out


def build_corpus(
    bits: int,
    count: int = 100000,
    mix: dict | None = None,
    seed: int = 0,
    policy: sts.LabelPolicy = sts.DEFAULT_POLICY,
) -> tuple[CorpusManifest, dict]:
    if bits not in CORPUS_BIT_SIZES:
        raise ValueError(f"bits must be one of {CORPUS_BIT_SIZES}, got {bits}")
    if count < 5:
        raise ValueError("count must be at least 5")
    mix = _validate_mix(DEFAULT_MIX if mix is None else mix)

    base_seed = int.from_bytes(
        np.random.SeedSequence([seed, bits, 0]).generate_state(2).tobytes(), "little"
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed, bits, 1]))

    base = _random_bit_matrix(count, bits, seed=base_seed)
    kinds = _kind_quotas(mix, count)
    kind_of = [kinds[i] for i in rng.permutation(count)]

    specs = []
    rows = np.empty_like(base)
    for i in range(count):
        spec = aug.sample_spec(kind_of[i], bits, rng, seed=int(rng.integers(2**63)))
        specs.append(spec)
        rows[i] = aug.apply(spec, BitSequence(base[i])).bits

    labels = sts.label_matrix(sts.p_value_matrix(rows), policy)
    records = [
        LabeledSequence(id=i, seq=BitSequence(rows[i]), label=labels[i],
                        provenance=specs[i])
        for i in range(count)
    ]

    order = rng.permutation(count)
    n_train = int(0.6 * count)
    n_val = int(0.2 * count)
    partitions = {
        "train": [records[i] for i in order[:n_train]],
        "val": [records[i] for i in order[n_train : n_train + n_val]],
        "test": [records[i] for i in order[n_train + n_val :]],
    }
    manifest = CorpusManifest(
        bits=bits,
        count=count,
        split_counts={k: len(v) for k, v in partitions.items()},
        seed=seed,
        mix=mix,
        alpha={t.value: policy.alpha[t] for t in sts.TEST_ORDER},
    )
    return manifest, partitions


def write_corpus(path: str, partitions: dict, manifest: CorpusManifest) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        fh.write(manifest.to_json())
    for name in PARTITIONS:
        with open(os.path.join(path, f"{name}.csv"), "w") as fh:
            for rec in partitions[name]:
                fh.write(
                    f"{rec.id},{rec.seq.n},{to_hex(rec.seq)},"
                    f"{sts.label_to_str(rec.label)}\n"
                )


def _parse_record(line: str, lineno: int, name: str, bits: int) -> LabeledSequence:
    fields = line.rstrip("\n").split(",")
    if len(fields) != 4:
        raise CorpusFormatError(
            f"{name} line {lineno}: expected 4 fields, got {len(fields)}"
        )
    id_text, bits_text, hex_text, label_text = fields
    try:
        rec_id = int(id_text)
        rec_bits = int(bits_text)
    except ValueError as exc:
        raise CorpusFormatError(f"{name} line {lineno}: {exc}") from exc
    if rec_bits != bits:
        raise CorpusFormatError(
            f"{name} line {lineno}: record is {rec_bits} bits, manifest says {bits}"
        )
    if len(label_text) != sts.N_TESTS:
        raise CorpusFormatError(
            f"{name} line {lineno}: label must be {sts.N_TESTS} characters, "
            f"got {len(label_text)}"
        )
    try:
        seq = from_hex(hex_text, rec_bits)
        label = sts.label_from_str(label_text)
    except ValueError as exc:
        raise CorpusFormatError(f"{name} line {lineno}: {exc}") from exc
    return LabeledSequence(id=rec_id, seq=seq, label=label)


def read_corpus(path: str) -> tuple[CorpusManifest, dict]:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = CorpusManifest.from_json(fh.read())
    partitions = {}
    for name in PARTITIONS:
        records = []
        fname = f"{name}.csv"
        with open(os.path.join(path, fname)) as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    records.append(_parse_record(line, lineno, fname, manifest.bits))
        if len(records) != manifest.split_counts[name]:
            raise CorpusFormatError(
                f"{fname}: {len(records)} records but manifest says "
                f"{manifest.split_counts[name]}"
            )
        partitions[name] = records
    return manifest, partitions


def verify_labels(
    partitions: dict,
    policy: sts.LabelPolicy = sts.DEFAULT_POLICY,
    fraction: float = 1.0,
    seed: int = 0,
) -> dict:
    """Recompute labels for a sampled subset; mismatches are report content."""
    if not (0.0 <= fraction <= 1.0):
        raise ValueError("fraction must be in [0, 1]")
    records = [rec for name in PARTITIONS for rec in partitions.get(name, [])]
    if fraction < 1.0:
        rng = np.random.default_rng(seed)
        n_pick = int(round(fraction * len(records)))
        picked = rng.choice(len(records), size=n_pick, replace=False)
        records = [records[i] for i in sorted(picked)]
    if not records:
        return {"checked": 0, "mismatches": 0, "mismatch_ids": []}
    mat = np.stack([rec.seq.bits for rec in records])
    fresh = sts.label_matrix(sts.p_value_matrix(mat), policy)
    stored = np.stack([rec.label for rec in records])
    bad = np.flatnonzero(np.any(fresh != stored, axis=1))
    return {
        "checked": len(records),
        "mismatches": int(bad.size),
        "mismatch_ids": [records[i].id for i in bad],
    }
