"""Command line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training failure.
Diagnostics go to stderr; requested data goes to stdout or --out targets.
"""

from __future__ import annotations

import argparse
import os
import sys

from rngaudit import bitstream, corpus, lstm, metrics, sts
from rngaudit import experiments as exp
from rngaudit import model as model_mod

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


class UsageError(Exception):
    """Bad flag values or combinations detected after parsing."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; the contract reserves 2 for
    # data errors, so usage problems are remapped to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _err(message: str) -> None:
    print(f"rngaudit: {message}", file=sys.stderr)


def _note(message: str) -> None:
    print(message, file=sys.stderr)


def _thread_count(args) -> int:
    if getattr(args, "deterministic", False):
        return 1
    if getattr(args, "threads", None):
        return args.threads
    return os.cpu_count() or 1


def _apply_threads(args) -> int:
    import torch

    n = _thread_count(args)
    torch.set_num_threads(n)
    return n


def _read_sequences(path: str) -> list[bitstream.BitSequence]:
    if path == "-":
        text = sys.stdin.read()
    else:
        with open(path) as fh:
            text = fh.read()
    seqs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            seqs.append(bitstream.parse_text(line))
        except bitstream.ParseError as exc:
            raise bitstream.ParseError(f"line {lineno}: {exc}",
                                       exc.offset) from exc
    if not seqs:
        raise ValueError(f"no sequences found in {path!r}")
    return seqs


class _Out:
    """stdout when path is None or '-', else the named file."""

    def __init__(self, path):
        self.path = path

    def __enter__(self):
        if self.path in (None, "-"):
            self.fh = sys.stdout
            self.own = False
        else:
            self.fh = open(self.path, "w")
            self.own = True
        return self.fh

    def __exit__(self, *exc):
        if self.own:
            self.fh.close()


def _load_corpora(paths: list) -> dict:
    """{bits: (manifest, partitions)} with duplicate lengths rejected."""
    out = {}
    for path in paths:
        manifest, partitions = corpus.read_corpus(path)
        if manifest.bits in out:
            raise UsageError(f"two corpora supplied for {manifest.bits} bits")
        out[manifest.bits] = (manifest, partitions)
    return out


def _parse_mix(text: str) -> dict:
    mix = {}
    for item in text.split(","):
        if "=" not in item:
            raise UsageError(f"mix entries are Kind=fraction, got {item!r}")
        kind, _, value = item.partition("=")
        try:
            mix[kind.strip()] = float(value)
        except ValueError:
            raise UsageError(f"bad mix fraction {value!r}") from None
    return mix


def _parse_values(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"values must be comma-separated integers, "
                         f"got {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    seqs = bitstream.generate_random(args.count, args.bits, seed=args.seed)
    with _Out(args.out) as fh:
        for seq in seqs:
            if args.hex:
                fh.write(bitstream.to_hex(seq) + "\n")
            else:
                fh.write(bitstream.to_text(seq) + "\n")
    return EXIT_OK


def cmd_sts(args) -> int:
    seqs = _read_sequences(args.infile)
    reports = sts.run_all_batch(seqs)
    with _Out(args.out) as fh:
        for i, rep in enumerate(reports):
            fh.write(sts.serialize_report(i, rep) + "\n")
    _note(f"scored {len(seqs)} sequences")
    return EXIT_OK


def cmd_build_corpus(args) -> int:
    mix = _parse_mix(args.mix) if args.mix else None
    manifest, partitions = corpus.build_corpus(
        args.bits, count=args.count, mix=mix, seed=args.seed
    )
    corpus.write_corpus(args.out, partitions, manifest)
    _note(
        f"wrote {manifest.count} records "
        f"({manifest.split_counts['train']}/{manifest.split_counts['val']}/"
        f"{manifest.split_counts['test']} train/val/test) to {args.out}"
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    manifest, partitions = corpus.read_corpus(args.corpus)
    result = corpus.verify_labels(
        partitions, manifest.policy(), fraction=args.fraction, seed=args.seed
    )
    print(f"checked {result['checked']} records, "
          f"{result['mismatches']} label mismatches")
    if result["mismatches"]:
        _err(f"mismatched ids: {result['mismatch_ids']}")
        return EXIT_DATA
    return EXIT_OK


def _model_config(args, bits_seen: list) -> model_mod.ModelConfig:
    head = args.head.capitalize()
    fixed = None
    if head == "Flatten":
        if len(set(bits_seen)) != 1:
            raise UsageError("Flatten head needs a single sequence length")
        fixed = bits_seen[0] // 16
    try:
        return model_mod.ModelConfig(
            d_model=args.dmodel,
            n_layers=args.layers,
            n_heads=args.heads,
            ffn_dim=args.ffn,
            head_type=head,
            fixed_tokens=fixed,
            dropout=args.dropout,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _lstm_config(args) -> lstm.LstmConfig:
    try:
        return lstm.LstmConfig(
            d_model=args.dmodel,
            hidden_size=args.hidden or args.dmodel,
            n_layers=args.layers,
            dropout=args.dropout,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    corpora = _load_corpora(args.corpus)
    bits_seen = sorted(corpora)
    train_records = []
    val_records = []
    for bits in bits_seen:
        _, parts = corpora[bits]
        train_records.extend(parts["train"])
        val_records.extend(parts["val"])

    threads = _thread_count(args)
    train_cfg = model_mod.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
        threads=threads,
    )
    if args.arch == "lstm":
        config = _lstm_config(args)
        net, history = lstm.train(config, train_cfg, train_records,
                                  val_records)
        lstm.save_model(args.out, net)
    else:
        config = _model_config(args, bits_seen)
        net, history = model_mod.train(config, train_cfg, train_records,
                                       val_records)
        model_mod.save_model(args.out, net)
    for h in history:
        _note(
            f"epoch {h['epoch']}: train loss {h['train_loss']:.4f}, "
            f"train batch F1 {h['train_batch_f1']:.4f}, "
            f"val macro F1 {h['val_macro_f1']:.4f}"
        )
    best = max(h["val_macro_f1"] for h in history)
    print(f"saved {args.arch} model to {args.out} "
          f"(best val macro F1 {best:.4f})")
    return EXIT_OK


def _predict_records(net, records, threshold: float):
    probs = model_mod.predict_probs(net, [r.seq for r in records])
    preds = probs >= threshold
    truths = [r.label for r in records]
    counts = metrics.accumulate(preds, truths)
    return probs, preds, truths, counts


def cmd_eval(args) -> int:
    _apply_threads(args)
    net = exp.load_any_model(args.model)
    corpora = _load_corpora(args.corpus)
    records = []
    for bits in sorted(corpora):
        records.extend(corpora[bits][1][args.split])
    if not records:
        raise ValueError(f"empty {args.split} split")
    _, preds, truths, counts = _predict_records(net, records, args.threshold)
    print(metrics.report(counts, preds, truths), end="")
    if args.out:
        summary = metrics.summarize(counts, preds, truths)
        with open(args.out, "w") as fh:
            fh.write(metrics.dump_metrics(summary))
        _note(f"wrote metrics to {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    _apply_threads(args)
    net = exp.load_any_model(args.model)
    seqs = _read_sequences(args.infile)
    probs = model_mod.predict_probs(net, seqs)
    with _Out(args.out) as fh:
        for i, row in enumerate(probs):
            label = "".join("1" if p >= args.threshold else "0" for p in row)
            cells = ",".join(f"{p:.6f}" for p in row)
            fh.write(f"{i},{cells},{label}\n")
    _note(f"predicted {len(seqs)} sequences")
    return EXIT_OK


def cmd_sweep(args) -> int:
    _apply_threads(args)
    corpora = _load_corpora(args.corpus)
    try:
        plan = exp.SweepPlan(
            parameter=args.parameter,
            values=_parse_values(args.values) if args.values else (),
            input_bits=tuple(sorted(corpora)),
            head_types=tuple(
                h.capitalize() for h in args.head_types.split(",") if h
            ),
            seed=args.seed,
            max_epochs=args.epochs,
            patience=args.patience,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    def progress(row):
        state = "converged" if row["converged"] else "non-converged"
        detail = row["error"] or f"val macro F1 {row['val_macro_f1']:.4f}"
        _note(
            f"[{row['parameter']}={row['param_value']} "
            f"{row['input_bits']}b {row['head_type']}] {state}: {detail}"
        )

    rows = exp.run_sweep(
        plan, {b: parts for b, (_, parts) in corpora.items()},
        progress=progress,
    )
    written = exp.emit_results(rows, [], args.out)
    for path in written:
        print(path)
    return EXIT_OK


def cmd_bench(args) -> int:
    _apply_threads(args)
    transformer = exp.load_any_model(args.transformer) if args.transformer else None
    lstm_net = exp.load_any_model(args.lstm) if args.lstm else None
    if transformer is None and lstm_net is None:
        raise UsageError("supply --transformer and/or --lstm")
    corpora = _load_corpora(args.corpus)
    test_sets = {bits: parts["test"] for bits, (_, parts) in corpora.items()}
    results = exp.run_bench(
        transformer, lstm_net, test_sets, batch_size=args.batch_size
    )
    print(exp.format_bench_table(results), end="")
    if args.out:
        written = exp.emit_results([], results, args.out)
        for path in written:
            _note(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_model_flags(p):
    p.add_argument("--layers", type=int, default=3,
                   help="encoder or recurrent layer count")
    p.add_argument("--heads", type=int, default=8,
                   help="attention heads (transformer only)")
    p.add_argument("--dmodel", type=int, default=240,
                   help="embedding dimension")
    p.add_argument("--ffn", type=int, default=None,
                   help="feed-forward width (default 4*dmodel)")
    p.add_argument("--head", default="average",
                   choices=["average", "flatten"],
                   help="pooling head type")
    p.add_argument("--hidden", type=int, default=None,
                   help="LSTM hidden size (default dmodel)")
    p.add_argument("--dropout", type=float, default=0.1)


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=0.001, help="Adam step size")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=30,
                   help="maximum training epochs")
    p.add_argument("--patience", type=int, default=5,
                   help="early-stopping patience in epochs")


def _add_threads_flags(p):
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: available parallelism)")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded, bit-reproducible execution")


def build_parser() -> _Parser:
    parser = _Parser(prog="rngaudit",
                     description="randomness audit toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen", help="generate CSPRNG bit sequences")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hex", action="store_true",
                   help="emit hex digits instead of 0/1 text")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("sts", help="run the seven statistical tests")
    p.add_argument("--in", dest="infile", required=True,
                   help="bit-string file, one sequence per line ('-' = stdin)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sts)

    p = sub.add_parser("build-corpus", help="build a labeled corpus")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--count", type=int, default=20000)
    p.add_argument("--mix", default=None,
                   help="augmentation mix, e.g. Identity=0.5,BiasBits=0.1,...")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="corpus directory")
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("verify", help="re-derive labels and report mismatches")
    p.add_argument("--corpus", required=True)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--corpus", action="append", required=True,
                   help="corpus directory (repeat for mixed lengths)")
    p.add_argument("--arch", default="transformer",
                   choices=["transformer", "lstm"])
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--seed", type=int, default=0)
    _add_threads_flags(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model against a corpus split")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", action="append", required=True)
    p.add_argument("--split", default="test",
                   choices=["train", "val", "test"])
    p.add_argument("--threshold", type=float, default=0.5)
    _add_threads_flags(p)
    p.add_argument("--out", default=None, help="metric CSV file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-sequence pass probabilities")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True,
                   help="bit-string file, one sequence per line ('-' = stdin)")
    p.add_argument("--threshold", type=float, default=0.5)
    _add_threads_flags(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="hyper-parameter sweep")
    p.add_argument("--parameter", required=True,
                   choices=list(exp.SWEEP_PARAMETERS))
    p.add_argument("--values", default=None,
                   help="comma-separated grid (default: full desk grid)")
    p.add_argument("--corpus", action="append", required=True)
    p.add_argument("--head-types", default="Flatten,Average")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    _add_threads_flags(p)
    p.add_argument("--out", required=True, help="results directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="throughput and accuracy comparison")
    p.add_argument("--transformer", default=None, help="model file")
    p.add_argument("--lstm", default=None, help="model file")
    p.add_argument("--corpus", action="append", required=True)
    p.add_argument("--batch-size", type=int, default=256)
    _add_threads_flags(p)
    p.add_argument("--out", default=None, help="results directory")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except model_mod.TrainingError as exc:
        _err(f"training failed: {exc}")
        return EXIT_TRAINING
    except (ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
