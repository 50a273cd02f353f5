"""Reconstruction fidelity scores and paired one-sided significance tests."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateInput, LabError, ShapeError
from .images import ImageSet, resize
from .models import Encoder, Reconstructor, encode, features_for, reconstruct

PSNR_CAP = 99.0
EXACT_MAX_N = 25


@dataclass
class SimilarityScore:
    value: float
    judge: str
    image_id: str = ""


@dataclass
class StatTestResult:
    method: str
    statistic: float
    p_value: float
    n: int
    alternative: str = "greater"
    n_zero: int = 0
    exact: bool | None = None
    B: int | None = None
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _at_resolution(images: np.ndarray, size: int) -> np.ndarray:
    if images.shape[1:3] == (size, size):
        return images
    return np.stack([resize(img, size, size) for img in images])


def pooled_embeddings(judge: Encoder, images: np.ndarray) -> np.ndarray:
    """Mean-pooled judge tokens; images are resampled to the judge's input size if needed."""
    f = encode(judge, _at_resolution(images, judge.resolution))
    return f.reshape(f.shape[0], -1, f.shape[-1]).mean(axis=1)


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise LabError("zero-norm pooled embedding")
    return np.sum(a * b, axis=-1) / (na * nb)


def judge_scores(judge: Encoder, originals: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Cosine similarity of mean-pooled judge tokens, one value per image pair."""
    if originals.shape != others.shape:
        raise ShapeError(f"image batches differ in shape: {originals.shape} vs {others.shape}")
    return _cosine_rows(pooled_embeddings(judge, originals), pooled_embeddings(judge, others))


def judge_similarity(judge: Encoder, image: np.ndarray, other: np.ndarray,
                     judge_tag: str = "judge", image_id: str = "") -> SimilarityScore:
    if not judge.frozen:
        raise LabError("judge encoder must be frozen")
    value = float(judge_scores(judge, image[None], other[None])[0])
    return SimilarityScore(value, judge_tag, image_id)


def pixel_metrics(a: np.ndarray, b: np.ndarray) -> dict:
    """MSE and PSNR for [0, 1] images; PSNR is capped (and flagged) at 99 dB."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    capped = mse <= 10 ** (-PSNR_CAP / 10)
    psnr = PSNR_CAP if capped else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))
    return {"mse": mse, "psnr": psnr, "psnr_capped": capped}


# Wilcoxon signed-rank


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_null_pmf(ranks: Sequence[float]) -> np.ndarray:
    """Exact null distribution of W+ over all 2^n sign assignments.

    Index ``k`` of the result holds P(W+ = k / 2). Built by counting
    subset sums of doubled ranks, which enumerates every sign pattern.
    """
    r2 = np.rint(2 * np.asarray(ranks)).astype(int)
    counts = np.zeros(int(r2.sum()) + 1)
    counts[0] = 1.0
    for r in r2:
        counts[r:] = counts[r:] + counts[:-r].copy()
    return counts / 2.0 ** len(r2)


def _tail(pmf: np.ndarray, w2: int, alternative: str) -> float:
    upper = float(pmf[w2:].sum())
    lower = float(pmf[:w2 + 1].sum())
    if alternative == "greater":
        return upper
    if alternative == "less":
        return lower
    return min(1.0, 2.0 * min(upper, lower))


def wilcoxon_signed_rank(diffs: Sequence[float], alternative: str = "greater",
                         method: str = "auto") -> StatTestResult:
    """Signed-rank test of paired differences; zeros are dropped.

    ``method`` is ``exact`` (subset-sum enumeration), ``approx`` (normal with
    tie and continuity corrections) or ``auto`` (exact for n <= 25).
    """
    if alternative not in ("greater", "less", "two-sided"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = np.asarray(diffs, dtype=float)
    nonzero = d[d != 0]
    n_zero = int(len(d) - len(nonzero))
    if len(nonzero) == 0:
        raise DegenerateInput("all paired differences are zero")
    n = len(nonzero)
    if n < 5:
        raise ValueError(f"need at least 5 nonzero differences, got {n}")
    ranks = midranks(np.abs(nonzero))
    w_plus = float(ranks[nonzero > 0].sum())
    exact = n <= EXACT_MAX_N if method == "auto" else method == "exact"
    if exact:
        p = _tail(wilcoxon_null_pmf(ranks), int(round(2 * w_plus)), alternative)
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
        sd = math.sqrt(var)
        upper = 0.5 * math.erfc(((w_plus - mean - 0.5) / sd) / math.sqrt(2))
        lower = 0.5 * math.erfc(((mean - w_plus - 0.5) / sd) / math.sqrt(2))
        p = {"greater": upper, "less": lower}.get(alternative, min(1.0, 2 * min(upper, lower)))
    return StatTestResult("wilcoxon-signed-rank", w_plus, float(min(max(p, 0.0), 1.0)), n,
                          alternative, n_zero, exact)


def paired_bootstrap(diffs: Sequence[float], B: int = 100_000, seed: int = 0) -> StatTestResult:
    """One-sided bootstrap of the mean difference: p = (1 + #{mean* <= 0}) / (B + 1)."""
    d = np.asarray(diffs, dtype=float)
    n = len(d)
    if B < 1000:
        raise ValueError("bootstrap needs B >= 1000")
    if n < 10:
        raise ValueError("bootstrap needs at least 10 differences")
    rng = np.random.default_rng(seed)
    chunk = max(1, 2_000_000 // n)
    hits, done = 0, 0
    while done < B:
        k = min(chunk, B - done)
        means = d[rng.integers(0, n, size=(k, n))].mean(axis=1)
        hits += int(np.count_nonzero(means <= 0.0))
        done += k
    p = (1 + hits) / (B + 1)
    return StatTestResult("paired-bootstrap", float(d.mean()), p, n, "greater", B=B, seed=seed)


# encoder comparison


@dataclass
class Comparison:
    judge: str
    image_ids: list[str]
    sim_a: np.ndarray
    sim_b: np.ndarray
    wilcoxon: StatTestResult | None
    bootstrap: StatTestResult | None
    degenerate: bool

    @property
    def diffs(self) -> np.ndarray:
        return self.sim_a - self.sim_b

    def rows(self):
        for i, a, b in zip(self.image_ids, self.sim_a, self.sim_b):
            yield i, float(a), float(b), float(a - b)

    def summary(self) -> dict:
        return {
            "judge": self.judge,
            "n": len(self.image_ids),
            "mean_sim_a": float(self.sim_a.mean()),
            "mean_sim_b": float(self.sim_b.mean()),
            "bootstrap_statistic": "mean difference",
            "degenerate": self.degenerate,
            "wilcoxon": self.wilcoxon.to_dict() if self.wilcoxon else None,
            "bootstrap": self.bootstrap.to_dict() if self.bootstrap else None,
        }


def reconstruction_scores(enc: Encoder, rec: Reconstructor, judge: Encoder,
                          pixels: np.ndarray) -> np.ndarray:
    recon = reconstruct(rec, features_for(enc, pixels))
    return judge_scores(judge, pixels, recon)


def compare_encoders(enc_a: Encoder, rec_a: Reconstructor, enc_b: Encoder, rec_b: Reconstructor,
                     judge: Encoder, images: ImageSet, judge_tag: str = "judge",
                     B: int = 100_000, seed: int = 0) -> Comparison:
    """Per-image judge similarity for two encoder/reconstructor pipelines, plus both tests.

    The alternative hypothesis is that pipeline A reconstructs better.
    """
    images.require("eval")
    jh = judge.param_hash()
    if jh in (enc_a.param_hash(), enc_b.param_hash()):
        raise ConfigError("judge encoder must differ from both encoders under test")
    if not judge.frozen:
        raise LabError("judge encoder must be frozen")
    sim_a = reconstruction_scores(enc_a, rec_a, judge, images.pixels)
    sim_b = reconstruction_scores(enc_b, rec_b, judge, images.pixels)
    diffs = sim_a - sim_b
    if not np.any(diffs != 0):
        return Comparison(judge_tag, list(images.ids), sim_a, sim_b, None, None, True)
    return Comparison(judge_tag, list(images.ids), sim_a, sim_b,
                      wilcoxon_signed_rank(diffs, "greater"), paired_bootstrap(diffs, B, seed), False)


def write_similarity_csv(path, comp: Comparison) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "sim_A", "sim_B", "diff"])
        for i, a, b, d in comp.rows():
            w.writerow([i, repr(a), repr(b), repr(d)])
