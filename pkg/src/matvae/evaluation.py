"""Zero-shot ELBO-ratio scoring, rank metrics and report tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from matvae import model as M
from matvae import tensor as T
from matvae.seqdata import DmsDataset, one_hot_indices


@dataclass
class VariantScore:
    mutant: str
    predicted: float
    target: float
    target_binary: bool


@dataclass
class MetricsReport:
    dataset: str
    spearman_r: float
    auroc: float
    n_variants: int
    tags: dict[str, str] = field(default_factory=dict)
    per_fold: list[tuple[float, float]] | None = None


# ---------------------------------------------------------------------------
# scoring


def elbo_scores(params: M.ModelParams, x: np.ndarray, batch: int = 1) -> np.ndarray:
    """-(S(h) + CE(x, x_hat)) per sequence with z = h and beta = beta_test.

    ``x`` is N x L x d one-hot.  No parameters are touched.  The default
    batch of 1 keeps every sequence on the same BLAS code path, so equal
    inputs give bitwise-equal scores regardless of batch composition.
    """
    if params.mode != M.MATVAE:
        raise ValueError("ELBO scoring needs matVAE parameters")
    beta = params.config.beta_test
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(len(x))
    for s in range(0, len(x), batch):
        xb = x[s:s + batch]
        h, _, x_hat = M.matvae_forward(xb, params, None, "test")
        hd = h.data
        ent = -(np.where(hd > 0, hd * np.log(np.where(hd > 0, hd, 1.0)), 0.0)).sum(axis=-1)
        p = np.maximum((x_hat.data * xb).sum(axis=-1), T.PROB_FLOOR)
        out[s:s + batch] = -(beta * ent - np.log(p).sum(axis=-1))
    return out


def elbo_score(params: M.ModelParams, x: np.ndarray) -> float:
    return float(elbo_scores(params, np.asarray(x)[None])[0])


def log_ratio(params: M.ModelParams, variants: np.ndarray, wild_type: np.ndarray) -> np.ndarray:
    """ELBO(variant) - ELBO(wild type) for every variant one-hot matrix."""
    variants = np.asarray(variants)
    single = variants.ndim == 2
    if single:
        variants = variants[None]
    wt = elbo_scores(params, np.asarray(wild_type)[None])[0]
    out = elbo_scores(params, variants) - wt
    return out[0] if single else out


def score_dms(params: M.ModelParams, dms: DmsDataset, wild_type_encoded: np.ndarray) -> list[VariantScore]:
    d = params.config.d
    x = np.stack([one_hot_indices(r.encoded, d) for r in dms.records])
    pred = log_ratio(params, x, one_hot_indices(wild_type_encoded, d))
    return [VariantScore(r.mutant, float(p), r.score, bool(r.label)) for r, p in zip(dms.records, pred)]


# ---------------------------------------------------------------------------
# metrics


def rankdata(x) -> np.ndarray:
    """1-based ranks, ties sharing their mid-rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_r(pred, target) -> float:
    """Pearson correlation of mid-ranks; NaN if either side is constant."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1 or len(pred) < 2:
        raise ValueError("spearman_r: need two equal-length vectors of length >= 2")
    a = rankdata(pred)
    b = rankdata(target)
    a -= a.mean()
    b -= b.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den == 0:
        return float("nan")
    return float(np.clip((a * b).sum() / den, -1.0, 1.0))


def auroc(pred, labels) -> float:
    """P(score of a random positive > random negative), ties worth 1/2.

    NaN when only one class is present.
    """
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    r = rankdata(pred)
    u = r[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# reports


def evaluate_scores(scores: list[VariantScore], dataset: str = "", higher_is_fit: bool = True,
                    tags: dict | None = None) -> MetricsReport:
    pred = np.array([s.predicted for s in scores])
    target = np.array([s.target for s in scores])
    if not higher_is_fit:
        target = -target
    labels = np.array([s.target_binary for s in scores])
    return MetricsReport(dataset, spearman_r(pred, target), auroc(pred, labels), len(scores), dict(tags or {}))


def evaluate_zero_shot(params: M.ModelParams, dms: DmsDataset, wild_type_encoded: np.ndarray,
                       dataset: str = "", tags: dict | None = None) -> tuple[MetricsReport, list[VariantScore]]:
    scores = score_dms(params, dms, wild_type_encoded)
    return evaluate_scores(scores, dataset, dms.higher_is_fit, tags), scores


def evaluate_cv(predictions, assignment, dms: DmsDataset, dataset: str = "", tags: dict | None = None) -> MetricsReport:
    """Per-fold metrics on held-out records, then their unweighted mean."""
    predictions = np.asarray(predictions, dtype=np.float64)
    assignment = np.asarray(assignment)
    if len(predictions) != len(dms) or len(assignment) != len(dms) or np.isnan(predictions).any():
        raise ValueError("predictions must cover every record exactly once")
    fit = dms.fitness
    labels = dms.labels
    per_fold = []
    for f in np.unique(assignment):
        sel = assignment == f
        per_fold.append((spearman_r(predictions[sel], fit[sel]), auroc(predictions[sel], labels[sel])))
    sp = float(np.mean([p[0] for p in per_fold]))
    au = float(np.mean([p[1] for p in per_fold]))
    return MetricsReport(dataset, sp, au, len(dms), dict(tags or {}), per_fold)


@dataclass
class GroupRow:
    group: str
    n_datasets: int
    spearman_mean: float
    spearman_std: float
    auroc_mean: float
    auroc_std: float


def aggregate_report(reports: list[MetricsReport], group_by: str | None = None) -> list[GroupRow]:
    """Mean and population standard deviation per group (insertion order)."""
    groups: dict[str, list[MetricsReport]] = {}
    for r in reports:
        key = "all" if not group_by or group_by == "none" else r.tags.get(group_by, "unknown")
        groups.setdefault(key, []).append(r)
    rows = []
    for key, rs in groups.items():
        sp = np.array([r.spearman_r for r in rs])
        au = np.array([r.auroc for r in rs])
        rows.append(GroupRow(key, len(rs), float(sp.mean()), float(sp.std()), float(au.mean()), float(au.std())))
    return rows


def report_csv(rows: list[GroupRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "n_datasets", "spearman_mean", "spearman_std", "auroc_mean", "auroc_std"])
    for r in rows:
        w.writerow([r.group, r.n_datasets, repr(r.spearman_mean), repr(r.spearman_std), repr(r.auroc_mean), repr(r.auroc_std)])
    return buf.getvalue()


def report_text(rows: list[GroupRow]) -> str:
    head = ("group", "n", "spearmanr", "auroc")
    body = [(r.group, str(r.n_datasets), f"{r.spearman_mean:.3f} ± {r.spearman_std:.3f}",
             f"{r.auroc_mean:.3f} ± {r.auroc_std:.3f}") for r in rows]
    widths = [max(len(x[i]) for x in [head, *body]) for i in range(4)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [head, *body]]
    return "\n".join(lines) + "\n"


def write_scores(path, scores: list[VariantScore]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mutant", "predicted", "target", "target_binary"])
        for s in scores:
            w.writerow([s.mutant, repr(s.predicted), repr(s.target), int(s.target_binary)])


def read_scores(path) -> list[VariantScore]:
    with open(path, newline="") as fh:
        return [VariantScore(r["mutant"], float(r["predicted"]), float(r["target"]), bool(int(r["target_binary"])))
                for r in csv.DictReader(fh)]
