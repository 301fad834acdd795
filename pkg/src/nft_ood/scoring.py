"""OOD score functions (MCM, NegLabel, tuned NegLabel) and evaluation metrics."""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimMismatch,
    EmptyBank,
    EmptyInput,
    NoNegativeLabels,
    NonPositiveInput,
    NonPositiveTemperature,
)
from .model import transform_bank
from .numerics import as_f64, logsumexp, sigmoid, stable_softmax

THREADS_ENV = "NFT_OOD_THREADS"


@dataclass
class MetricReport:
    auroc: float
    fpr95: float
    n_id: int
    n_ood: int
    threshold_at_95tpr: float

    def to_dict(self):
        return {
            "auroc": self.auroc,
            "fpr95": self.fpr95,
            "n_id": self.n_id,
            "n_ood": self.n_ood,
            "threshold": self.threshold_at_95tpr,
        }


def score_neglabel(v, bank_rows, n_pos, tau_score=1.0):
    """sigmoid(logsumexp(pos cosines / tau) - logsumexp(neg cosines / tau)).

    Algebraically identical to the ratio of exponentiated positive
    similarities to the total over positive plus negative labels.
    """
    if tau_score <= 0:
        raise NonPositiveTemperature(f"tau_score must be > 0, got {tau_score}")
    bank_rows = as_f64(bank_rows)
    v = as_f64(v)
    if n_pos < 1:
        raise EmptyBank("need at least one positive label row")
    if bank_rows.shape[0] - n_pos < 1:
        raise NoNegativeLabels("NegLabel score requires negative label rows")
    cos = bank_rows @ v
    return sigmoid(logsumexp(cos[:n_pos] / tau_score) - logsumexp(cos[n_pos:] / tau_score))


def score_mcm(v, pos_rows, tau=1.0):
    """Maximum softmax probability over positive label similarities."""
    pos_rows = as_f64(pos_rows)
    if pos_rows.shape[0] < 1:
        raise EmptyBank("MCM score requires at least one positive label row")
    v = as_f64(v)
    return float(np.max(stable_softmax(pos_rows @ v, tau)))


def score_krnft(state, v, bank, tau_score=1.0):
    """NegLabel score on the image-conditionally tuned bank."""
    rows = transform_bank(state, bank, v)
    return score_neglabel(v, rows, bank.n_pos, tau_score)


def score_many(images, method, bank, state=None, tau_score=1.0, n_threads=None):
    """Score each row of images; output order follows input order.

    n_threads defaults to the NFT_OOD_THREADS environment variable (1 if unset).
    """
    images = as_f64(np.atleast_2d(images))
    if images.shape[1] != bank.dim:
        raise DimMismatch("image features do not match bank dimension")
    if n_threads is None:
        n_threads = int(os.environ.get(THREADS_ENV, "1"))
    if method == "mcm":
        fn = lambda v: score_mcm(v, bank.pos, tau_score)
    elif method == "neglabel":
        fn = lambda v: score_neglabel(v, bank.rows(), bank.n_pos, tau_score)
    elif method == "krnft":
        if state is None:
            raise EmptyInput("krnft scoring requires a model state")
        fn = lambda v: score_krnft(state, v, bank, tau_score)
    else:
        raise EmptyInput(f"unknown scoring method {method!r}")
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            return np.array(list(pool.map(fn, images)))
    return np.array([fn(v) for v in images])


def decide(score, gamma):
    """'ID' iff score >= gamma (threshold inclusive)."""
    return "ID" if score >= gamma else "OOD"


def auroc(id_scores, ood_scores):
    """Probability a random ID score exceeds a random OOD score; ties count 0.5.

    Computed by the rank statistic, which matches the O(n^2) pairwise count
    exactly (rank sums are half-integers, exact in float64).
    """
    id_scores = as_f64(id_scores).reshape(-1)
    ood_scores = as_f64(ood_scores).reshape(-1)
    n_id, n_ood = id_scores.size, ood_scores.size
    if n_id == 0 or n_ood == 0:
        raise EmptyInput("auroc requires non-empty score sets")
    combined = np.concatenate([id_scores, ood_scores])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size)
    sorted_vals = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average 1-based rank
        i = j + 1
    r_id = float(np.sum(ranks[:n_id]))
    return (r_id - n_id * (n_id + 1) / 2.0) / (n_id * n_ood)


def fpr_at_tpr(id_scores, ood_scores, tpr=0.95):
    """FPR at the tightest threshold admitting at least tpr of the ID scores.

    The threshold is the c-th largest ID score with c = ceil(tpr * n_id);
    samples scoring exactly the threshold count as detected-ID.
    """
    id_scores = as_f64(id_scores).reshape(-1)
    ood_scores = as_f64(ood_scores).reshape(-1)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise EmptyInput("fpr_at_tpr requires non-empty score sets")
    if not 0 < tpr <= 1:
        raise NonPositiveInput(f"tpr must be in (0, 1], got {tpr}")
    n = id_scores.size
    c = int(math.ceil(tpr * n - 1e-9))
    threshold = float(np.sort(id_scores)[::-1][c - 1])
    fpr = float(np.mean(ood_scores >= threshold))
    return fpr, threshold


def hmean(a, b):
    """Harmonic mean 2ab / (a + b)."""
    if a <= 0 or b <= 0:
        raise NonPositiveInput("harmonic mean requires positive inputs")
    return 2.0 * a * b / (a + b)


def evaluate(id_scores, ood_scores, tpr=0.95):
    fpr, threshold = fpr_at_tpr(id_scores, ood_scores, tpr)
    return MetricReport(
        auroc=auroc(id_scores, ood_scores),
        fpr95=fpr,
        n_id=len(np.asarray(id_scores).reshape(-1)),
        n_ood=len(np.asarray(ood_scores).reshape(-1)),
        threshold_at_95tpr=threshold,
    )
