"""Seven SP 800-22 statistical tests, p-values, and pass/fail labeling.

Every test is implemented both for a single sequence and, internally, for a
2-D matrix of same-length sequences (rows). The matrix path is what the
corpus labeler and the benchmark harness call; the single-sequence functions
wrap a 1-row matrix so both paths cannot drift apart.

Canonical test order (used wherever a 7-vector is indexed):
Frequency, BlockFrequency, Runs, LongestRun, Dft, NonOverlappingTemplate,
CumulativeSums.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.special as sc

from rngaudit.bitstream import BitSequence

__all__ = [
    "TestId",
    "TEST_ORDER",
    "PValueReport",
    "LabelPolicy",
    "StsParams",
    "erfc",
    "igamc",
    "normal_cdf",
    "frequency_test",
    "block_frequency_test",
    "runs_test",
    "longest_run_test",
    "dft_test",
    "non_overlapping_template_test",
    "cumulative_sums_test",
    "run_all",
    "run_all_batch",
    "p_value_matrix",
    "labelize",
    "label_to_str",
    "label_from_str",
    "serialize_report",
]


class TestId(enum.Enum):
    __test__ = False  # not a pytest class despite the name

    FREQUENCY = "Frequency"
    BLOCK_FREQUENCY = "BlockFrequency"
    RUNS = "Runs"
    LONGEST_RUN = "LongestRun"
    DFT = "Dft"
    NON_OVERLAPPING_TEMPLATE = "NonOverlappingTemplate"
    CUMULATIVE_SUMS = "CumulativeSums"


TEST_ORDER: tuple[TestId, ...] = tuple(TestId)
N_TESTS = len(TEST_ORDER)

# DFT peak threshold constant: T = sqrt(ln(1/0.05) * n) per the revised
# spectral test; the variance divisor 4 below is the matching correction.
_DFT_LOG20 = 2.995732274

# Longest-run-of-ones category tables, keyed by minimum sequence length:
# (M block bits, category boundaries, category probabilities).
_LONGEST_RUN_TABLE = (
    (750000, 10000, (10, 11, 12, 13, 14, 15, 16),
     (0.0882, 0.2092, 0.2483, 0.1933, 0.1208, 0.0675, 0.0727)),
    (6272, 128, (4, 5, 6, 7, 8, 9),
     (0.1174035788, 0.242955959, 0.249363483, 0.17517706, 0.102701071,
      0.112398847)),
    (128, 8, (1, 2, 3, 4),
     (0.21484375, 0.3671875, 0.23046875, 0.1875)),
)


# -- special functions --------------------------------------------------------

def erfc(x: float) -> float:
    """Complementary error function."""
    if not math.isfinite(x):
        raise ValueError(f"erfc argument must be finite, got {x}")
    return float(sc.erfc(x))


def igamc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if not (math.isfinite(a) and a > 0):
        raise ValueError(f"igamc requires finite a > 0, got {a}")
    if not (math.isfinite(x) and x >= 0):
        raise ValueError(f"igamc requires finite x >= 0, got {x}")
    return float(sc.gammaincc(a, x))


def normal_cdf(x: float) -> float:
    """Standard normal CDF."""
    if not math.isfinite(x):
        raise ValueError(f"normal_cdf argument must be finite, got {x}")
    return float(sc.ndtr(x))


# -- parameters, reports, labels ----------------------------------------------

@dataclass(frozen=True)
class StsParams:
    """Per-test parameters; the defaults target 512/1024/2048-bit sequences."""

    block_m: int = 128
    template: str = "000000001"
    template_blocks: int = 8
    cusum_mode: str = "forward"

    def __post_init__(self):
        if self.block_m <= 0:
            raise ValueError("block_m must be positive")
        if not self.template or set(self.template) - {"0", "1"}:
            raise ValueError("template must be a non-empty '0'/'1' string")
        if self.template_blocks <= 0:
            raise ValueError("template_blocks must be positive")
        if self.cusum_mode not in ("forward", "backward"):
            raise ValueError(f"unknown cusum mode {self.cusum_mode!r}")


DEFAULT_PARAMS = StsParams()


@dataclass(frozen=True)
class PValueReport:
    p: dict[TestId, float]
    stats: dict[TestId, dict]

    def __post_init__(self):
        if set(self.p) != set(TEST_ORDER):
            raise ValueError("report must contain all seven tests")
        for tid, value in self.p.items():
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{tid.value}: p-value {value} outside [0, 1]")

    def p_vector(self) -> np.ndarray:
        return np.array([self.p[t] for t in TEST_ORDER])


class LabelPolicy:
    """Per-test significance levels; p >= alpha counts as a pass."""

    def __init__(self, alpha: float | Mapping[TestId, float] = 0.01):
        if isinstance(alpha, Mapping):
            table = {t: float(alpha[t]) for t in TEST_ORDER}
        else:
            table = {t: float(alpha) for t in TEST_ORDER}
        for tid, a in table.items():
            if not (0.0 < a < 1.0):
                raise ValueError(f"{tid.value}: alpha {a} outside (0, 1)")
        self.alpha = table

    def __eq__(self, other):
        return isinstance(other, LabelPolicy) and self.alpha == other.alpha

    def __repr__(self):
        values = sorted(set(self.alpha.values()))
        if len(values) == 1:
            return f"LabelPolicy(alpha={values[0]})"
        return f"LabelPolicy(alpha={self.alpha})"


DEFAULT_POLICY = LabelPolicy()


def labelize(report: PValueReport, policy: LabelPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Seven pass booleans in canonical order; boundary p == alpha passes."""
    return np.array(
        [report.p[t] >= policy.alpha[t] for t in TEST_ORDER], dtype=bool
    )


def label_matrix(pmat: np.ndarray, policy: LabelPolicy = DEFAULT_POLICY) -> np.ndarray:
    alphas = np.array([policy.alpha[t] for t in TEST_ORDER])
    return np.asarray(pmat) >= alphas


def label_to_str(label: np.ndarray) -> str:
    if len(label) != N_TESTS:
        raise ValueError(f"label must have {N_TESTS} entries")
    return "".join("1" if b else "0" for b in label)


def label_from_str(text: str) -> np.ndarray:
    if len(text) != N_TESTS or set(text) - {"0", "1"}:
        raise ValueError(f"label must be {N_TESTS} chars of '0'/'1', got {text!r}")
    return np.array([c == "1" for c in text], dtype=bool)


# -- matrix-path test statistics ----------------------------------------------

def _as_matrix(seq: BitSequence) -> np.ndarray:
    return seq.bits[np.newaxis, :]


def _frequency_matrix(mat: np.ndarray):
    n = mat.shape[1]
    ones = mat.sum(axis=1, dtype=np.int64)
    s_n = 2 * ones - n
    s_obs = np.abs(s_n) / math.sqrt(n)
    p = sc.erfc(s_obs / math.sqrt(2.0))
    stats = {"n": n, "s_n": s_n, "s_obs": s_obs, "pi": ones / n}
    if n < 100:
        stats["warning_small_n"] = True
    return p, stats


def _block_frequency_matrix(mat: np.ndarray, m_bits: int):
    n = mat.shape[1]
    if m_bits > n:
        raise ValueError(f"block size {m_bits} exceeds sequence length {n}")
    n_blocks = n // m_bits
    blocks = mat[:, : n_blocks * m_bits].reshape(mat.shape[0], n_blocks, m_bits)
    pi = blocks.mean(axis=2)
    chi2 = 4.0 * m_bits * ((pi - 0.5) ** 2).sum(axis=1)
    p = sc.gammaincc(n_blocks / 2.0, chi2 / 2.0)
    return p, {"n": n, "m_bits": m_bits, "n_blocks": n_blocks, "pi_i": pi,
               "chi2": chi2}


def _runs_matrix(mat: np.ndarray):
    n = mat.shape[1]
    pi = mat.sum(axis=1, dtype=np.int64) / n
    v_n = 1 + np.count_nonzero(np.diff(mat, axis=1), axis=1)
    tau = 2.0 / math.sqrt(n)
    gate_failed = np.abs(pi - 0.5) >= tau
    denom = 2.0 * math.sqrt(2.0 * n) * pi * (1.0 - pi)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = sc.erfc(np.abs(v_n - 2.0 * n * pi * (1.0 - pi)) / denom)
    p = np.where(gate_failed, 0.0, raw)
    return p, {"n": n, "pi": pi, "v_n": v_n, "gate_failed": gate_failed}


def _longest_run_params(n: int):
    for min_n, m_bits, bounds, probs in _LONGEST_RUN_TABLE:
        if n >= min_n:
            return m_bits, bounds, probs
    raise ValueError(f"longest-run test requires n >= 128, got {n}")


def _max_ones_run_per_block(blocks: np.ndarray) -> np.ndarray:
    """Longest run of ones along the last axis of a (rows, N, M) array."""
    rows, n_blocks, m_bits = blocks.shape
    flat = blocks.reshape(rows * n_blocks, m_bits)
    idx = np.arange(m_bits, dtype=np.int64)
    last_zero = np.where(flat == 0, idx, -1)
    np.maximum.accumulate(last_zero, axis=1, out=last_zero)
    run_ending_here = np.where(flat == 1, idx - last_zero, 0)
    return run_ending_here.max(axis=1).reshape(rows, n_blocks)


def _longest_run_matrix(mat: np.ndarray):
    n = mat.shape[1]
    m_bits, bounds, probs = _longest_run_params(n)
    n_blocks = n // m_bits
    blocks = mat[:, : n_blocks * m_bits].reshape(mat.shape[0], n_blocks, m_bits)
    longest = _max_ones_run_per_block(blocks)
    # categories: <= bounds[0], then one per interior bound, then >= bounds[-1]
    k = len(bounds) - 1
    cat = np.minimum(np.searchsorted(np.array(bounds), longest, side="left"), k)
    nu = np.stack(
        [np.count_nonzero(cat == i, axis=1) for i in range(k + 1)], axis=1
    )
    expected = n_blocks * np.array(probs)
    chi2 = ((nu - expected) ** 2 / expected).sum(axis=1)
    p = sc.gammaincc(k / 2.0, chi2 / 2.0)
    return p, {"n": n, "m_bits": m_bits, "n_blocks": n_blocks, "nu": nu,
               "chi2": chi2}


def _dft_matrix(mat: np.ndarray):
    n = mat.shape[1]
    if n % 2 != 0:
        raise ValueError(f"dft test requires even n, got {n}")
    x = 2.0 * mat.astype(np.float64) - 1.0
    spectrum = np.fft.rfft(x, axis=1)
    moduli = np.abs(spectrum[:, : n // 2])
    threshold = math.sqrt(_DFT_LOG20 * n)
    n0 = 0.95 * n / 2.0
    n1 = np.count_nonzero(moduli < threshold, axis=1)
    d = (n1 - n0) / math.sqrt(n * 0.95 * 0.05 / 4.0)
    p = sc.erfc(np.abs(d) / math.sqrt(2.0))
    return p, {"n": n, "threshold": threshold, "n0": n0, "n1": n1, "d": d}


def _template_matrix(mat: np.ndarray, template: str, n_blocks: int):
    n = mat.shape[1]
    tmpl = np.array([int(c) for c in template], dtype=np.uint8)
    m = tmpl.size
    m_block = n // n_blocks
    if m_block < m:
        raise ValueError(
            f"template block size {m_block} smaller than template length {m}"
        )
    rows = mat.shape[0]
    span = n - m + 1
    match = np.ones((rows, span), dtype=bool)
    for j, bit in enumerate(tmpl):
        match &= mat[:, j : j + span] == bit
    counts = np.zeros((rows, n_blocks), dtype=np.int64)
    limit = m_block - m  # last in-block start offset
    for r in range(rows):
        cursors = [b * m_block for b in range(n_blocks)]
        for pos in np.flatnonzero(match[r]):
            b = pos // m_block
            if b >= n_blocks or pos - b * m_block > limit:
                continue
            if pos >= cursors[b]:
                counts[r, b] += 1
                cursors[b] = pos + m
    mu = (m_block - m + 1) / 2.0**m
    sigma2 = m_block * (1.0 / 2.0**m - (2.0 * m - 1.0) / 2.0 ** (2 * m))
    chi2 = ((counts - mu) ** 2 / sigma2).sum(axis=1)
    p = sc.gammaincc(n_blocks / 2.0, chi2 / 2.0)
    return p, {"n": n, "template": template, "m": m, "m_block": m_block,
               "n_blocks": n_blocks, "w": counts, "mu": mu, "sigma2": sigma2,
               "chi2": chi2}


def _c_div(a: int, b: int) -> int:
    """Integer division truncating toward zero (C semantics)."""
    q, r = divmod(a, b)
    if r != 0 and (a < 0) != (b < 0):
        q += 1
    return q


def _cusum_p(z: int, n: int) -> float:
    if z <= 0:
        return 1.0
    sqrt_n = math.sqrt(n)
    nz = _c_div(n, z)
    neg = _c_div(-n, z)
    total = 1.0
    for k in range(_c_div(neg + 1, 4), _c_div(nz - 1, 4) + 1):
        total -= sc.ndtr((4 * k + 1) * z / sqrt_n) - sc.ndtr((4 * k - 1) * z / sqrt_n)
    for k in range(_c_div(neg - 3, 4), _c_div(nz - 1, 4) + 1):
        total += sc.ndtr((4 * k + 3) * z / sqrt_n) - sc.ndtr((4 * k + 1) * z / sqrt_n)
    return min(max(float(total), 0.0), 1.0)


def _cusum_matrix(mat: np.ndarray, mode: str):
    n = mat.shape[1]
    work = mat if mode == "forward" else mat[:, ::-1]
    x = 2 * work.astype(np.int64) - 1
    z = np.abs(np.cumsum(x, axis=1)).max(axis=1)
    unique = {int(v): _cusum_p(int(v), n) for v in np.unique(z)}
    p = np.array([unique[int(v)] for v in z])
    return p, {"n": n, "z": z, "mode": mode}


_MATRIX_TESTS = {
    TestId.FREQUENCY: lambda mat, prm: _frequency_matrix(mat),
    TestId.BLOCK_FREQUENCY: lambda mat, prm: _block_frequency_matrix(mat, prm.block_m),
    TestId.RUNS: lambda mat, prm: _runs_matrix(mat),
    TestId.LONGEST_RUN: lambda mat, prm: _longest_run_matrix(mat),
    TestId.DFT: lambda mat, prm: _dft_matrix(mat),
    TestId.NON_OVERLAPPING_TEMPLATE: lambda mat, prm: _template_matrix(
        mat, prm.template, prm.template_blocks
    ),
    TestId.CUMULATIVE_SUMS: lambda mat, prm: _cusum_matrix(mat, prm.cusum_mode),
}


# -- public single-sequence tests ---------------------------------------------

def _single(test_id: TestId, seq: BitSequence, params: StsParams):
    p, stats = _MATRIX_TESTS[test_id](_as_matrix(seq), params)
    out = {}
    for key, value in stats.items():
        if isinstance(value, np.ndarray) and value.ndim >= 1 and value.shape[0] == 1:
            row = value[0]
            out[key] = row.tolist() if isinstance(row, np.ndarray) else _scalar(row)
        else:
            out[key] = _scalar(value)
    return float(p[0]), out


def _scalar(value):
    if isinstance(value, np.generic):
        return value.item()
    return value


def frequency_test(seq: BitSequence, params: StsParams = DEFAULT_PARAMS):
    return _single(TestId.FREQUENCY, seq, params)


def block_frequency_test(seq: BitSequence, m_bits: int = 128):
    return _single(TestId.BLOCK_FREQUENCY, seq, StsParams(block_m=m_bits))


def runs_test(seq: BitSequence, params: StsParams = DEFAULT_PARAMS):
    return _single(TestId.RUNS, seq, params)


def longest_run_test(seq: BitSequence, params: StsParams = DEFAULT_PARAMS):
    return _single(TestId.LONGEST_RUN, seq, params)


def dft_test(seq: BitSequence, params: StsParams = DEFAULT_PARAMS):
    return _single(TestId.DFT, seq, params)


def non_overlapping_template_test(
    seq: BitSequence, template: str = "000000001", n_blocks: int = 8
):
    return _single(
        TestId.NON_OVERLAPPING_TEMPLATE,
        seq,
        StsParams(template=template, template_blocks=n_blocks),
    )


def cumulative_sums_test(seq: BitSequence, mode: str = "forward"):
    return _single(TestId.CUMULATIVE_SUMS, seq, StsParams(cusum_mode=mode))


# -- whole-suite entry points --------------------------------------------------

def run_all(seq: BitSequence, params: StsParams | None = None) -> PValueReport:
    """All seven tests on one sequence.

    With params=None the module defaults are used and the sequence length must
    be one of the corpus sizes; pass explicit params to test other lengths.
    """
    from rngaudit.bitstream import CORPUS_BIT_SIZES

    if params is None:
        if seq.n not in CORPUS_BIT_SIZES:
            raise ValueError(
                f"default parameterization expects n in {CORPUS_BIT_SIZES}; "
                f"got {seq.n} (pass explicit StsParams to override)"
            )
        params = DEFAULT_PARAMS
    p = {}
    stats = {}
    for tid in TEST_ORDER:
        try:
            p[tid], stats[tid] = _single(tid, seq, params)
        except ValueError as exc:
            raise ValueError(f"[{tid.value}] {exc}") from exc
    return PValueReport(p=p, stats=stats)


def p_value_matrix(mat: np.ndarray, params: StsParams = DEFAULT_PARAMS) -> np.ndarray:
    """(rows, 7) p-value matrix in canonical test order for same-length rows."""
    mat = np.ascontiguousarray(mat, dtype=np.uint8)
    if mat.ndim != 2 or mat.shape[1] == 0:
        raise ValueError("expected a non-empty 2-D bit matrix")
    columns = [_MATRIX_TESTS[tid](mat, params)[0] for tid in TEST_ORDER]
    return np.stack(columns, axis=1)


def run_all_batch(
    seqs: list[BitSequence], params: StsParams | None = None
) -> list[PValueReport]:
    """run_all over many sequences; mixed lengths are grouped internally."""
    reports: list[PValueReport | None] = [None] * len(seqs)
    by_length: dict[int, list[int]] = {}
    for i, seq in enumerate(seqs):
        by_length.setdefault(seq.n, []).append(i)
    for n, idxs in by_length.items():
        mat = np.stack([seqs[i].bits for i in idxs])
        prm = params
        if prm is None:
            from rngaudit.bitstream import CORPUS_BIT_SIZES

            if n not in CORPUS_BIT_SIZES:
                raise ValueError(
                    f"default parameterization expects n in {CORPUS_BIT_SIZES}; got {n}"
                )
            prm = DEFAULT_PARAMS
        pmat = p_value_matrix(mat, prm)
        for row, i in enumerate(idxs):
            reports[i] = PValueReport(
                p={tid: float(pmat[row, j]) for j, tid in enumerate(TEST_ORDER)},
                stats={tid: {} for tid in TEST_ORDER},
            )
    return reports  # type: ignore[return-value]


def serialize_report(
    seq_id: int, report: PValueReport, policy: LabelPolicy = DEFAULT_POLICY
) -> str:
    """One delimited record: id, then (name, p to 10 significant digits, pass)."""
    fields = [str(seq_id)]
    for tid in TEST_ORDER:
        p = report.p[tid]
        fields.extend([tid.value, f"{p:.9e}", str(int(p >= policy.alpha[tid]))])
    return ",".join(fields)
