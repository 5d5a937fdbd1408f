"""Model-agnostic evaluation of predictive power.

Works with any model exposing ``log_evidence(seq)`` and
``predict_distribution(seq, position)``; grammar models additionally expose
``normalized_log_evidence`` which the perplexity uses so that their evidence
is normalized within fixed-length sequence sets like the other model families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import EncodedDataset


@dataclass(frozen=True)
class EvalReport:
    perplexity: float
    error_rate: float
    rmrr: float
    n_symbols: int

    def as_dict(self) -> dict[str, float]:
        return {
            "perplexity": self.perplexity,
            "error_rate": self.error_rate,
            "rmrr": self.rmrr,
            "n_symbols": self.n_symbols,
        }


def _sequences(test) -> list[np.ndarray]:
    seqs = test.sequences if isinstance(test, EncodedDataset) else list(test)
    if len(seqs) == 0:
        raise ValueError("test data is empty")
    return seqs


def _log_evidence_fn(model):
    return getattr(model, "normalized_log_evidence", None) or model.log_evidence


def perplexity(model, test) -> float:
    """exp of the mean negative log evidence per symbol; infinite whenever any
    sequence has zero evidence."""
    seqs = _sequences(test)
    log_ev = _log_evidence_fn(model)
    total = 0.0
    count = 0
    for seq in seqs:
        value = log_ev(seq)
        count += len(seq)
        if value == -math.inf:
            return math.inf
        total += value
    return math.exp(-total / count)


def error_rate(model, test) -> float:
    """Fraction of positions whose maximum-probability prediction differs from
    the observed symbol; argmax ties break toward the lowest symbol id."""
    seqs = _sequences(test)
    wrong = 0
    count = 0
    for seq in seqs:
        for pos in range(1, len(seq) + 1):
            probs = model.predict_distribution(seq, pos)
            if int(np.argmax(probs)) != int(seq[pos - 1]):
                wrong += 1
            count += 1
    return wrong / count


def rmrr(model, test) -> float:
    """Harmonic mean of the rank of the observed symbol under each prediction;
    rank ties resolve in favor of the lowest symbol id."""
    seqs = _sequences(test)
    recip_total = 0.0
    count = 0
    for seq in seqs:
        for pos in range(1, len(seq) + 1):
            probs = model.predict_distribution(seq, pos)
            truth = int(seq[pos - 1])
            p_true = probs[truth]
            rank = 1 + int((probs > p_true).sum()) + int((probs[:truth] == p_true).sum())
            recip_total += 1.0 / rank
            count += 1
    return count / recip_total


def evaluate_model(model, test) -> EvalReport:
    seqs = _sequences(test)
    return EvalReport(
        perplexity=perplexity(model, seqs),
        error_rate=error_rate(model, seqs),
        rmrr=rmrr(model, seqs),
        n_symbols=sum(len(s) for s in seqs),
    )


CSV_HEADER = "model,dataset,perplexity,error_rate,rmrr,n_symbols"


def csv_row(model_label: str, dataset_label: str, report: EvalReport) -> str:
    """One CSV row of all metrics for a (model, dataset) pair."""
    return ",".join(
        [
            model_label,
            dataset_label,
            repr(report.perplexity),
            repr(report.error_rate),
            repr(report.rmrr),
            str(report.n_symbols),
        ]
    )


def param_count(model_kind: str, size: int, vocab_size: int) -> int:
    """Free parameters after normalization for each model family."""
    if size < 1:
        raise ValueError("size must be >= 1")
    n = vocab_size
    if model_kind == "markov":
        return sum(n**j for j in range(size + 1)) * (n - 1)
    if model_kind == "hmm":
        return (1 + size) * (size - 1) + size * (n - 1)
    if model_kind == "pcfg":
        return (1 + size) * (size**2 - 1) + size * n
    raise ValueError(f"unknown model kind {model_kind!r}")
