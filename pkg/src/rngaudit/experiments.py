"""Hyper-parameter sweep and the throughput-and-accuracy bench harness.

A sweep trains one model per (parameter value, input size, head type) cell
with fixed seeds and records all four F1 aggregates plus a convergence flag
(best validation macro F1 >= 0.7). The bench times Transformer, LSTM, and the
statistical test engine over the identical sequence list with a monotonic
clock and reports the "Technique / Inference Time (s) / Micro F1 / Macro F1"
table layout per input size.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from rngaudit import lstm as lstm_mod
from rngaudit import metrics
from rngaudit import model as model_mod
from rngaudit import sts
from rngaudit.bitstream import tokenize

__all__ = [
    "DESK_GRIDS",
    "SWEEP_PARAMETERS",
    "SweepPlan",
    "BenchResult",
    "run_sweep",
    "run_bench",
    "format_bench_table",
    "emit_results",
    "load_any_model",
]

SWEEP_PARAMETERS = ("encoder_layers", "embedding_size", "attention_heads")

# grids bracketing the regimes where convergence behavior changes
DESK_GRIDS = {
    "encoder_layers": (1, 2, 3, 4, 5),
    "embedding_size": (192, 240, 288, 336, 384, 432),
    "attention_heads": (1, 2, 4, 8, 12, 16, 20, 24),
}

CONVERGED_THRESHOLD = 0.7


@dataclass(frozen=True)
class SweepPlan:
    parameter: str
    values: tuple = ()
    input_bits: tuple = (512, 1024, 2048)
    head_types: tuple = ("Flatten", "Average")
    base_layers: int = 3
    base_heads: int = 8
    base_d_model: int = 240
    seed: int = 0
    max_epochs: int = 30
    patience: int = 5
    batch_size: int = 64

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ValueError(f"unknown sweep parameter {self.parameter!r}")
        values = tuple(self.values) or DESK_GRIDS[self.parameter]
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "input_bits", tuple(self.input_bits))
        object.__setattr__(self, "head_types", tuple(self.head_types))
        if not self.input_bits:
            raise ValueError("input_bits must be non-empty")
        for head in self.head_types:
            if head not in ("Flatten", "Average"):
                raise ValueError(f"unknown head type {head!r}")
        for value in values:
            if value <= 0:
                raise ValueError("grid values must be positive")
        # every cell's d_model must split evenly across its head count
        for value in values:
            d_model, n_heads = self.base_d_model, self.base_heads
            if self.parameter == "embedding_size":
                d_model = value
            elif self.parameter == "attention_heads":
                n_heads = value
            if d_model % n_heads:
                raise ValueError(
                    f"grid value {value} gives d_model {d_model} not "
                    f"divisible by {n_heads} heads"
                )

    def config_for(self, value: int, head_type: str,
                   bits: int) -> model_mod.ModelConfig:
        layers, heads, d_model = (self.base_layers, self.base_heads,
                                  self.base_d_model)
        if self.parameter == "encoder_layers":
            layers = value
        elif self.parameter == "embedding_size":
            d_model = value
        else:
            heads = value
        fixed = bits // 16 if head_type == "Flatten" else None
        return model_mod.ModelConfig(
            d_model=d_model,
            n_layers=layers,
            n_heads=heads,
            head_type=head_type,
            fixed_tokens=fixed,
        )


@dataclass(frozen=True)
class BenchResult:
    technique: str
    input_bits: int
    compute_seconds: float
    end_to_end_seconds: float
    n_sequences: int
    micro_f1: float | None = None
    macro_f1: float | None = None
    weighted_f1: float | None = None
    sample_f1: float | None = None

    def __post_init__(self):
        if self.compute_seconds <= 0 or self.end_to_end_seconds <= 0:
            raise ValueError("times must be positive")
        for name in ("micro_f1", "macro_f1", "weighted_f1", "sample_f1"):
            value = getattr(self, name)
            if value is not None and not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} outside [0, 1]")

    @property
    def per_sequence_seconds(self) -> float:
        return self.compute_seconds / self.n_sequences


def run_sweep(plan: SweepPlan, corpora: dict, progress=None) -> list[dict]:
    """Train every (value, size, head) cell; a cell whose training diverges
    is recorded as non-converged with the error text and the sweep moves on.
    """
    for bits in plan.input_bits:
        if bits not in corpora:
            raise ValueError(f"no corpus supplied for {bits}-bit sequences")
    rows = []
    for value in plan.values:
        for bits in plan.input_bits:
            for head in plan.head_types:
                config = plan.config_for(value, head, bits)
                train_cfg = model_mod.TrainConfig(
                    seed=plan.seed,
                    max_epochs=plan.max_epochs,
                    patience=plan.patience,
                    batch_size=plan.batch_size,
                )
                parts = corpora[bits]
                row = {
                    "parameter": plan.parameter,
                    "param_value": value,
                    "input_bits": bits,
                    "head_type": head,
                    "converged": False,
                    "val_macro_f1": float("nan"),
                    "micro_f1": float("nan"),
                    "macro_f1": float("nan"),
                    "weighted_f1": float("nan"),
                    "sample_f1": float("nan"),
                    "epochs": 0,
                    "error": "",
                }
                try:
                    net, history = model_mod.train(
                        config, train_cfg, parts["train"], parts["val"]
                    )
                    best = max(h["val_macro_f1"] for h in history)
                    row["epochs"] = len(history)
                    row["val_macro_f1"] = best
                    row["converged"] = bool(best >= CONVERGED_THRESHOLD)
                    test = parts["test"]
                    probs = model_mod.predict_probs(
                        net, [r.seq for r in test]
                    )
                    preds = probs >= train_cfg.threshold
                    truths = [r.label for r in test]
                    counts = metrics.accumulate(preds, truths)
                    row["micro_f1"] = metrics.micro_f1(counts)
                    row["macro_f1"] = metrics.macro_f1(counts)
                    row["weighted_f1"] = metrics.weighted_f1(counts)
                    row["sample_f1"] = metrics.sample_f1(preds, truths)
                except model_mod.TrainingError as exc:
                    row["error"] = str(exc)
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


def load_any_model(path: str):
    """Dispatch on the magic line to load either classifier type."""
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n").decode(errors="replace")
    if magic == model_mod.MODEL_MAGIC:
        return model_mod.load_model(path)
    if magic == lstm_mod.LSTM_MAGIC:
        return lstm_mod.load_model(path)
    raise ValueError(f"unrecognized model magic {magic!r}")


def _timed_model(net, records, batch_size: int):
    """(compute, end_to_end, probs): compute excludes tokenization."""
    start_total = time.monotonic()
    tokens = [
        torch.from_numpy(np.array(tokenize(r.seq).tokens, dtype=np.int64))
        for r in records
    ]
    stacked = torch.stack(tokens)
    net.eval()
    start_compute = time.monotonic()
    chunks = []
    with torch.no_grad():
        for lo in range(0, stacked.shape[0], batch_size):
            logits = net(stacked[lo : lo + batch_size])
            chunks.append(torch.sigmoid(logits).numpy())
    end = time.monotonic()
    return end - start_compute, end - start_total, np.concatenate(chunks)


def _timed_sts(records, policy: sts.LabelPolicy):
    start_total = time.monotonic()
    bit_matrix = np.stack([r.seq.bits for r in records])
    start_compute = time.monotonic()
    p_values = sts.p_value_matrix(bit_matrix)
    end = time.monotonic()
    labels = sts.label_matrix(p_values, policy)
    return end - start_compute, end - start_total, labels


def run_bench(
    transformer,
    lstm_net,
    test_sets: dict,
    batch_size: int = 256,
    policy: sts.LabelPolicy | None = None,
) -> list[BenchResult]:
    """Time all three techniques over the identical per-size sequence lists.

    F1 for the two models is computed against labels re-derived by the test
    engine during its own timed pass, so every technique consumed exactly the
    same inputs.
    """
    if not test_sets:
        raise ValueError("no test sets supplied")
    policy = policy or sts.LabelPolicy()
    results = []
    for bits in sorted(test_sets):
        records = test_sets[bits]
        if not records:
            raise ValueError(f"empty test set for {bits} bits")
        sts_compute, sts_total, truths = _timed_sts(records, policy)
        results.append(
            BenchResult(
                technique="STS",
                input_bits=bits,
                compute_seconds=sts_compute,
                end_to_end_seconds=sts_total,
                n_sequences=len(records),
            )
        )
        for name, net in (("LSTM", lstm_net), ("Transformer", transformer)):
            if net is None:
                continue
            compute, total, probs = _timed_model(net, records, batch_size)
            preds = probs >= 0.5
            counts = metrics.accumulate(preds, truths)
            results.append(
                BenchResult(
                    technique=name,
                    input_bits=bits,
                    compute_seconds=compute,
                    end_to_end_seconds=total,
                    n_sequences=len(records),
                    micro_f1=metrics.micro_f1(counts),
                    macro_f1=metrics.macro_f1(counts),
                    weighted_f1=metrics.weighted_f1(counts),
                    sample_f1=metrics.sample_f1(preds, truths),
                )
            )
    return results


_TABLE_ORDER = {"LSTM": 0, "Transformer": 1, "STS": 2}


def format_bench_table(results: list) -> str:
    """One table per input size with the bench's canonical column layout:
    Technique | Inference Time (s) | Micro F1 | Macro F1."""
    if not results:
        raise ValueError("no bench results to format")
    lines = []
    for bits in sorted({r.input_bits for r in results}):
        rows = sorted(
            (r for r in results if r.input_bits == bits),
            key=lambda r: _TABLE_ORDER.get(r.technique, 99),
        )
        lines.append(f"Input size: {bits} bits "
                     f"({rows[0].n_sequences} sequences)")
        lines.append("| Technique | Inference Time (s) | Micro F1 | Macro F1 |")
        lines.append("|---|---|---|---|")
        for r in rows:
            micro = f"{r.micro_f1:.3f}" if r.micro_f1 is not None else "-"
            macro = f"{r.macro_f1:.3f}" if r.macro_f1 is not None else "-"
            lines.append(
                f"| {r.technique} | {r.compute_seconds:.3f} | {micro} "
                f"| {macro} |"
            )
        lines.append("")
    return "\n".join(lines)


_SWEEP_FILES = {
    "encoder_layers": "encoder_layers.csv",
    "embedding_size": "embedding_size.csv",
    "attention_heads": "attention_heads.csv",
}


def emit_results(sweep_rows: list, bench_results: list, out_dir) -> list[str]:
    """Write delimited result files, a markdown summary, and the matching
    figures; returns the list of paths written."""
    import os

    from rngaudit import plotting

    if not sweep_rows and not bench_results:
        raise ValueError("nothing to emit: empty sweep and bench results")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    md = ["# Results", ""]

    by_parameter: dict[str, list] = {}
    for row in sweep_rows:
        by_parameter.setdefault(row["parameter"], []).append(row)
    for parameter, rows in by_parameter.items():
        rows = sorted(rows, key=lambda r: (r["param_value"], r["input_bits"],
                                           r["head_type"]))
        path = os.path.join(out_dir, _SWEEP_FILES[parameter])
        with open(path, "w") as fh:
            fh.write("param_value,input_bits,head_type,macro_f1,converged\n")
            for r in rows:
                fh.write(
                    f"{r['param_value']},{r['input_bits']},{r['head_type']},"
                    f"{r['macro_f1']:.6f},{str(r['converged']).lower()}\n"
                )
        written.append(path)
        fig = os.path.join(out_dir, _SWEEP_FILES[parameter].replace(".csv", ".png"))
        plotting.plot_sweep(rows, parameter, fig)
        written.append(fig)
        md.append(f"## Sweep: {parameter}")
        md.append("")
        md.append("| value | bits | head | val macro F1 | test macro F1 "
                  "| converged | epochs | error |")
        md.append("|---|---|---|---|---|---|---|---|")
        for r in rows:
            md.append(
                f"| {r['param_value']} | {r['input_bits']} | {r['head_type']} "
                f"| {r['val_macro_f1']:.3f} | {r['macro_f1']:.3f} "
                f"| {str(r['converged']).lower()} | {r['epochs']} "
                f"| {r['error']} |"
            )
        md.append("")

    if bench_results:
        path = os.path.join(out_dir, "time_vs_size.csv")
        with open(path, "w") as fh:
            fh.write(
                "technique,input_bits,compute_seconds,end_to_end_seconds,"
                "n_sequences,micro_f1,macro_f1,weighted_f1,sample_f1\n"
            )
            for r in sorted(bench_results,
                            key=lambda r: (r.input_bits,
                                           _TABLE_ORDER.get(r.technique, 99))):
                def fmt(v):
                    return "" if v is None else f"{v:.6f}"

                fh.write(
                    f"{r.technique},{r.input_bits},{r.compute_seconds:.6f},"
                    f"{r.end_to_end_seconds:.6f},{r.n_sequences},"
                    f"{fmt(r.micro_f1)},{fmt(r.macro_f1)},"
                    f"{fmt(r.weighted_f1)},{fmt(r.sample_f1)}\n"
                )
        written.append(path)
        fig = os.path.join(out_dir, "time_vs_size.png")
        plotting.plot_times(bench_results, fig)
        written.append(fig)
        md.append("## Bench")
        md.append("")
        md.append(format_bench_table(bench_results))

    summary = os.path.join(out_dir, "summary.md")
    with open(summary, "w") as fh:
        fh.write("\n".join(md).rstrip() + "\n")
    written.append(summary)
    return written
