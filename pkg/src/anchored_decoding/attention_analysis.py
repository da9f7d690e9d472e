"""Attention instruments: prompt-attention ratio curves, finite-difference
token sensitivity, and passed-vs-failed length statistics."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass

import numpy as np

from .decoding import GenerationTrace
from .errors import UnsupportedOperationError

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class DilutionCurve:
    """Per-step attention-to-prompt ratios for one decode."""

    alphas: list[float]
    prompt_length: int


@dataclass(frozen=True)
class LengthStats:
    """Mean/median generated-token counts per (group, passed/failed) cell.

    cells maps (group, status) -> (mean, median, count), status in
    {"passed", "failed"}.
    """

    cells: dict[tuple[str, str], tuple[float, float, int]]


def attention_ratio(attention_row, prompt_length: int) -> float:
    """Fraction of the (normalized) attention row's mass on prompt positions.

    Rows are probability vectors, so the ratio is just the prefix sum over
    the first prompt_length positions.
    """
    row = np.asarray(attention_row, dtype=np.float64)
    if abs(float(row.sum()) - 1.0) > ROW_SUM_TOL:
        raise ValueError(f"attention row sums to {row.sum()}, not 1")
    if not (0 <= prompt_length <= len(row)):
        raise ValueError("prompt_length out of range")
    if prompt_length == len(row):
        return 1.0  # whole row is prompt mass; avoid rounding below 1
    return float(row[:prompt_length].sum())


def dilution_curve(trace: GenerationTrace) -> DilutionCurve:
    """Attention-to-prompt ratio at every step of a trace captured with
    want_attention. At step 1 the context is all prompt, so alpha is 1."""
    prompt_length = len(trace.prompt_tokens)
    alphas = []
    for i, (_, score) in enumerate(trace.steps):
        if score.attention_row is None:
            raise ValueError(f"step {i} has no attention row; decode with want_attention")
        alphas.append(attention_ratio(score.attention_row, prompt_length))
    return DilutionCurve(alphas, prompt_length)


def gradient_attention(backend, context_tokens, delta: float = 1e-3) -> np.ndarray:
    """Per-token sensitivity via central finite differences.

    For each context position the score is the Euclidean norm (over embedding
    dimensions) of the numerical gradient of the next-step argmax token's
    logit with respect to that position's input embedding. Requires a backend
    exposing embed()/forward_from_embeddings() (the toy model or a test
    double); remote backends cannot support it.
    """
    if not (hasattr(backend, "embed") and hasattr(backend, "forward_from_embeddings")):
        raise UnsupportedOperationError("gradient probes need embedding access (toy backend only)")
    base = backend.embed(context_tokens)
    target = int(np.argmax(backend.forward_from_embeddings(base)))
    n, d = base.shape
    scores = np.zeros(n)
    for i in range(n):
        grad = np.zeros(d)
        for j in range(d):
            plus = base.copy()
            plus[i, j] += delta
            minus = base.copy()
            minus[i, j] -= delta
            f_plus = backend.forward_from_embeddings(plus)[target]
            f_minus = backend.forward_from_embeddings(minus)[target]
            grad[j] = (f_plus - f_minus) / (2.0 * delta)
        scores[i] = float(np.linalg.norm(grad))
    return scores


def length_stats(results) -> LengthStats:
    """Aggregate (token_count, passed, group) triples into per-cell
    mean/median/count."""
    if not results:
        raise ValueError("no results")
    buckets: dict[tuple[str, str], list[int]] = {}
    for count, passed, group in results:
        if count < 0:
            raise ValueError("negative token count")
        key = (str(group), "passed" if passed else "failed")
        buckets.setdefault(key, []).append(count)
    cells = {
        key: (statistics.mean(vals), float(statistics.median(vals)), len(vals))
        for key, vals in buckets.items()
    }
    return LengthStats(cells)


def write_curve_csv(curve: DilutionCurve, fp) -> None:
    w = csv.writer(fp)
    w.writerow(["step", "alpha"])
    for i, a in enumerate(curve.alphas):
        w.writerow([i, repr(a)])


def write_length_stats_csv(stats: LengthStats, fp) -> None:
    w = csv.writer(fp)
    w.writerow(["group", "status", "mean", "median", "count"])
    for (group, status), (mean, median, count) in sorted(stats.cells.items()):
        w.writerow([group, status, repr(mean), repr(median), count])
