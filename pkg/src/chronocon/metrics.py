"""Evaluation statistics: totals and progression, ICC, RMSE/MAE/Pearson,
bootstrap intervals, the paired t-test on squared errors and the
cross-visit error-correlation decomposition of progression error.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


# ------------------------------------------------------------ score tables

@dataclass
class ScoreTable:
    """One row per (patient, visit timestamp, score name); NaN marks MISSING truth."""

    patient: np.ndarray
    timestamp: np.ndarray
    score_name: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray

    def __post_init__(self):
        self.patient = np.asarray(self.patient, dtype=object)
        self.timestamp = np.asarray(self.timestamp, dtype=float)
        self.score_name = np.asarray(self.score_name, dtype=object)
        self.y_true = np.asarray(self.y_true, dtype=float)
        self.y_pred = np.asarray(self.y_pred, dtype=float)
        keys = set(zip(self.patient, self.timestamp, self.score_name))
        if len(keys) != len(self.patient):
            raise ValueError("duplicate (patient, visit, score) rows")

    def __len__(self):
        return len(self.patient)


@dataclass
class Totals:
    patient: np.ndarray
    timestamp: np.ndarray
    true: np.ndarray
    pred: np.ndarray
    missing_fraction: np.ndarray


def aggregate_total(table: ScoreTable, score_max: dict | None = None, max_missing: float = 0.25) -> Totals:
    """Per-visit total scores.

    Predictions are clipped to ``[0, score_max[name]]``. Missing true
    subscores are linearly interpolated over the patient's visit times
    (constant beyond the ends); visits with more than ``max_missing`` of
    their subscores missing are dropped.
    """
    score_max = score_max or {}
    out = {k: [] for k in ("patient", "timestamp", "true", "pred", "missing_fraction")}
    order = np.lexsort((table.timestamp, table.patient.astype(str)))
    patients = table.patient[order]
    for patient in sorted(set(patients)):
        rows = order[patients == patient]
        times = np.unique(table.timestamp[rows])
        scores = sorted(set(table.score_name[rows]))
        true = np.full((len(times), len(scores)), np.nan)
        pred = np.zeros((len(times), len(scores)))
        t_index = {t: i for i, t in enumerate(times)}
        s_index = {s: j for j, s in enumerate(scores)}
        present = np.zeros_like(true, dtype=bool)
        for r in rows:
            i, j = t_index[table.timestamp[r]], s_index[table.score_name[r]]
            true[i, j] = table.y_true[r]
            hi = score_max.get(table.score_name[r], np.inf)
            pred[i, j] = np.clip(table.y_pred[r], 0.0, hi)
            present[i, j] = True
        missing = np.isnan(true)
        filled = true.copy()
        for j, name in enumerate(scores):
            ok = ~missing[:, j]
            if not ok.any():
                warnings.warn(f"patient {patient}: score {name} missing at every visit; counted as 0")
                filled[:, j] = 0.0
            elif not ok.all():
                filled[:, j] = np.interp(times, times[ok], true[ok, j])
        frac = missing.mean(axis=1)
        for i, t in enumerate(times):
            if frac[i] > max_missing:
                continue
            out["patient"].append(patient)
            out["timestamp"].append(t)
            out["true"].append(filled[i].sum())
            out["pred"].append(pred[i].sum())
            out["missing_fraction"].append(frac[i])
    return Totals(np.array(out["patient"], dtype=object), np.array(out["timestamp"], dtype=float),
                  np.array(out["true"], dtype=float), np.array(out["pred"], dtype=float),
                  np.array(out["missing_fraction"], dtype=float))


@dataclass
class Progression:
    patient: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    true: np.ndarray
    pred: np.ndarray


def progression(totals: Totals) -> Progression:
    """Differences ``total(t2) - total(t1)`` between consecutive retained visits."""
    out = {k: [] for k in ("patient", "t1", "t2", "true", "pred")}
    for patient in sorted(set(totals.patient)):
        sel = np.flatnonzero(totals.patient == patient)
        sel = sel[np.argsort(totals.timestamp[sel], kind="stable")]
        for i, j in zip(sel[:-1], sel[1:]):
            out["patient"].append(patient)
            out["t1"].append(totals.timestamp[i])
            out["t2"].append(totals.timestamp[j])
            out["true"].append(totals.true[j] - totals.true[i])
            out["pred"].append(totals.pred[j] - totals.pred[i])
    return Progression(np.array(out["patient"], dtype=object), np.array(out["t1"], dtype=float),
                       np.array(out["t2"], dtype=float), np.array(out["true"], dtype=float),
                       np.array(out["pred"], dtype=float))


# --------------------------------------------------------------------- ICC

@dataclass(frozen=True)
class ICCResult:
    icc31: float
    icc21: float
    bms: float
    jms: float
    ems: float
    n: int
    degenerate: bool = False


def icc(y_true, y_pred) -> ICCResult:
    """Single-measure ICC(3,1) (consistency) and ICC(2,1) (absolute agreement).

    Two-way ANOVA on the n x 2 matrix ``[y_true, y_pred]``:
    ``ICC(3,1) = (BMS - EMS) / (BMS + EMS)`` and
    ``ICC(2,1) = (BMS - EMS) / (BMS + EMS + 2 (JMS - EMS) / n)``.
    """
    data = np.column_stack([np.asarray(y_true, dtype=float), np.asarray(y_pred, dtype=float)])
    n, k = data.shape
    if n < 3:
        raise ValueError("ICC needs at least 3 subjects")
    grand = data.mean()
    ss_rows = k * np.sum((data.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((data.mean(axis=0) - grand) ** 2)
    ss_total = np.sum((data - grand) ** 2)
    ss_err = ss_total - ss_rows - ss_cols
    bms = ss_rows / (n - 1)
    jms = ss_cols / (k - 1)
    ems = ss_err / ((n - 1) * (k - 1))
    if ss_total == 0 or bms == 0:
        return ICCResult(0.0, 0.0, bms, jms, ems, n, degenerate=True)
    icc31 = (bms - ems) / (bms + (k - 1) * ems)
    icc21 = (bms - ems) / (bms + (k - 1) * ems + k * (jms - ems) / n)
    return ICCResult(float(icc31), float(icc21), float(bms), float(jms), float(ems), n)


def icc31(y_true, y_pred) -> float:
    return icc(y_true, y_pred).icc31


def icc21(y_true, y_pred) -> float:
    return icc(y_true, y_pred).icc21


# ------------------------------------------------------- point statistics

def rmse(y_true, y_pred) -> float:
    d = np.asarray(y_pred, dtype=float) - np.asarray(y_true, dtype=float)
    if d.size == 0:
        raise ValueError("rmse of no pairs")
    return float(np.sqrt(np.mean(d * d)))


def mae(y_true, y_pred) -> float:
    d = np.asarray(y_pred, dtype=float) - np.asarray(y_true, dtype=float)
    if d.size == 0:
        raise ValueError("mae of no pairs")
    return float(np.mean(np.abs(d)))


def pearson(y_true, y_pred) -> float:
    x = np.asarray(y_true, dtype=float)
    y = np.asarray(y_pred, dtype=float)
    if x.size < 2:
        raise ValueError("pearson needs at least 2 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise ValueError("pearson undefined for zero variance")
    return float(np.clip(dx @ dy / math.sqrt(sxx * syy), -1.0, 1.0))


# --------------------------------------------------------------- bootstrap

@dataclass(frozen=True)
class BootstrapCI:
    low: float
    high: float
    n_resamples: int
    n_redraws: int


def bootstrap_ci(arrays: Sequence, statistic: Callable, B: int = 2000, seed: int = 0,
                 clusters=None, level: float = 0.95) -> BootstrapCI:
    """Percentile bootstrap interval of ``statistic(*arrays)``.

    With ``clusters`` (one label per row, e.g. patient ids) whole clusters are
    resampled. Resamples on which the statistic fails or is non-finite are
    redrawn; more than ``B // 10`` redraws raise ``RuntimeError``.
    """
    if B < 100:
        raise ValueError("use at least 100 bootstrap resamples")
    arrays = [np.asarray(a) for a in arrays]
    n = len(arrays[0])
    if any(len(a) != n for a in arrays) or n == 0:
        raise ValueError("arrays must be nonempty and of equal length")
    rng = np.random.default_rng(seed)
    if clusters is not None:
        clusters = np.asarray(clusters)
        labels, inverse = np.unique(clusters, return_inverse=True)
        members = [np.flatnonzero(inverse == c) for c in range(len(labels))]

    def draw():
        if clusters is None:
            return rng.integers(0, n, size=n)
        picks = rng.integers(0, len(members), size=len(members))
        return np.concatenate([members[c] for c in picks])

    stats, redraws = [], 0
    while len(stats) < B:
        idx = draw()
        try:
            value = float(statistic(*[a[idx] for a in arrays]))
        except (ValueError, ZeroDivisionError, FloatingPointError):
            value = float("nan")
        if not math.isfinite(value):
            redraws += 1
            if redraws > B // 10:
                raise RuntimeError(f"statistic undefined on {redraws} resamples")
            continue
        stats.append(value)
    stats = np.sort(stats)
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(stats, [alpha, 1.0 - alpha])
    return BootstrapCI(float(low), float(high), B, redraws)


# ------------------------------------------------------------------ t-test

def _betacf(a, b, x, max_iter=500, eps=3e-16):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float, y: float | None = None) -> float:
    """Regularized incomplete beta function I_x(a, b).

    ``y`` may pass ``1 - x`` computed without cancellation.
    """
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    y = 1.0 - x if y is None else y
    if x == 0.0 or y == 0.0:
        return 0.0 if x == 0.0 else 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(y))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, y) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t with ``df`` dof."""
    if math.isinf(t):
        return 0.0
    t2 = t * t
    return betainc(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))


def student_t_cdf(t: float, df: float) -> float:
    tail = 0.5 * student_t_sf2(t, df)
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    n: int
    degenerate: bool = False


def paired_mse_ttest(errors_a, errors_b) -> TTestResult:
    """Two-sided paired t-test on per-instance squared errors ``a_i - b_i``."""
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("error vectors must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd <= 1e-12 * abs(mean):  # constant differences up to rounding
        sd = 0.0
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0, n, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), float(min(1.0, student_t_sf2(t, n - 1))), n)


# ---------------------------------------------------- error correlation

@dataclass(frozen=True)
class ErrorCorrelation:
    sigma2: float
    c: float
    mse_delta_empirical: float
    mse_delta_model: float
    rmse: float
    rmse_delta: float
    n_patients: int


def error_correlation(patients, errors, timestamps=None) -> ErrorCorrelation:
    """Cross-visit error correlation and the implied progression error.

    ``sigma2`` is the mean squared error over all visits of patients with at
    least two visits; ``c`` is the within-patient cross product ``e_i e_j``
    (``i != j``) relative to ``(e_i^2 + e_j^2) / 2`` summed over the same
    pairs, so per-patient constant errors give exactly 1. The model value
    ``2 sigma2 (1 - c)`` is compared with the empirical MSE of consecutive
    differences.
    """
    patients = np.asarray(patients, dtype=object)
    errors = np.asarray(errors, dtype=float)
    timestamps = np.arange(len(errors), dtype=float) if timestamps is None else np.asarray(timestamps, float)
    sq, cross_sum, pair_sq, deltas = [], 0.0, 0.0, []
    n_pat = 0
    for p in sorted(set(patients), key=str):
        sel = np.flatnonzero(patients == p)
        if sel.size < 2:
            continue
        n_pat += 1
        e = errors[sel[np.argsort(timestamps[sel], kind="stable")]]
        sq.append(e * e)
        s = e.sum()
        cross_sum += s * s - np.sum(e * e)
        pair_sq += (e.size - 1) * np.sum(e * e)
        deltas.append(np.diff(e))
    if n_pat == 0:
        raise ValueError("error correlation needs patients with at least two visits")
    sq = np.concatenate(sq)
    deltas = np.concatenate(deltas)
    sigma2 = float(sq.mean())
    c = float(cross_sum / pair_sq) if pair_sq > 0 else 1.0
    mse_d = float(np.mean(deltas * deltas))
    return ErrorCorrelation(sigma2, c, mse_d, 2.0 * sigma2 * (1.0 - c), math.sqrt(sigma2),
                            math.sqrt(mse_d), n_pat)


# ------------------------------------------------------------- reporting

def metric_with_ci(y_true, y_pred, statistic, clusters=None, B=2000, seed=0) -> dict:
    point = float(statistic(y_true, y_pred))
    try:
        ci = bootstrap_ci((y_true, y_pred), statistic, B=B, seed=seed, clusters=clusters)
        low, high = min(ci.low, point), max(ci.high, point)
    except RuntimeError:
        low = high = float("nan")
    return {"value": point, "ci_low": low, "ci_high": high}


def _safe(fn):
    def wrapped(a, b):
        try:
            return fn(a, b)
        except ValueError:
            return float("nan")
    return wrapped


def evaluate_tables(table: ScoreTable, score_max: dict | None = None, B: int = 2000, seed: int = 0,
                    cluster_by_patient: bool = True, baseline: ScoreTable | None = None) -> dict:
    """Cross-sectional and progression report with the fixed key names.

    ``baseline`` (predictions of a second model on the same rows) enables the
    paired t-test on squared errors.
    """
    totals = aggregate_total(table, score_max)
    prog = progression(totals)
    report = {"n_visits": int(len(totals.true)), "n_deltas": int(len(prog.true)),
              "n_patients": int(len(set(totals.patient)))}
    for key, y, yh, cl in (("cross_sectional", totals.true, totals.pred, totals.patient),
                           ("longitudinal", prog.true, prog.pred, prog.patient)):
        clusters = cl if cluster_by_patient else None
        block = {}
        if len(y) >= 3:
            res = icc(y, yh)
            block["icc31"] = metric_with_ci(y, yh, icc31, clusters, B, seed)
            block["icc21"] = metric_with_ci(y, yh, icc21, clusters, B, seed)
            block["icc_degenerate"] = res.degenerate
            block["rmse"] = metric_with_ci(y, yh, rmse, clusters, B, seed)
            block["mae"] = metric_with_ci(y, yh, mae, clusters, B, seed)
            block["pearson"] = metric_with_ci(y, yh, _safe(pearson), clusters, B, seed)
        block["n"] = int(len(y))
        report[key] = block
    try:
        ec = error_correlation(totals.patient, totals.pred - totals.true, totals.timestamp)
        report.update(c=ec.c, sigma2=ec.sigma2, mse_delta_empirical=ec.mse_delta_empirical,
                      mse_delta_model=ec.mse_delta_model)
    except ValueError:
        report.update(c=None, sigma2=None, mse_delta_empirical=None, mse_delta_model=None)
    report["ttest"] = None
    if baseline is not None:
        other = aggregate_total(baseline, score_max)
        key_a = {(p, t): i for i, (p, t) in enumerate(zip(totals.patient, totals.timestamp))}
        pairs = [(key_a[(p, t)], j) for j, (p, t) in enumerate(zip(other.patient, other.timestamp))
                 if (p, t) in key_a]
        ia = np.array([i for i, _ in pairs], dtype=int)
        ib = np.array([j for _, j in pairs], dtype=int)
        ea = (totals.pred[ia] - totals.true[ia]) ** 2
        eb = (other.pred[ib] - other.true[ib]) ** 2
        tt = paired_mse_ttest(ea, eb)
        report["ttest"] = {"t": tt.t, "p": tt.p, "n": tt.n, "degenerate": tt.degenerate}
    return report


def write_score_csv(path, rows, header) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else format(float(x), ".17g")


def save_pred_table(path, table: ScoreTable) -> None:
    write_score_csv(path, [(p, _fmt(t), s, _fmt(yh)) for p, t, s, yh in
                           zip(table.patient, table.timestamp, table.score_name, table.y_pred)],
                    ["patient", "timestamp", "score_name", "y_pred"])


def save_truth_table(path, table: ScoreTable, score_max: dict) -> None:
    write_score_csv(path, [(p, _fmt(t), s, _fmt(y), score_max.get(s, "")) for p, t, s, y in
                           zip(table.patient, table.timestamp, table.score_name, table.y_true)],
                    ["patient", "timestamp", "score_name", "y_true", "score_max"])


def load_tables(pred_path, truth_path) -> tuple[ScoreTable, dict]:
    """Join a prediction CSV with a truth CSV on (patient, timestamp, score_name)."""
    truth, score_max = {}, {}
    with open(truth_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["patient"], float(row["timestamp"]), row["score_name"])
            truth[key] = float(row["y_true"]) if row["y_true"] != "" else float("nan")
            if row.get("score_max"):
                score_max[row["score_name"]] = float(row["score_max"])
    cols = {k: [] for k in ("patient", "timestamp", "score_name", "y_true", "y_pred")}
    with open(pred_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["patient"], float(row["timestamp"]), row["score_name"])
            if key not in truth:
                raise ValueError(f"prediction {key} has no truth row")
            for name, value in zip(("patient", "timestamp", "score_name"), key):
                cols[name].append(value)
            cols["y_true"].append(truth[key])
            cols["y_pred"].append(float(row["y_pred"]))
    return ScoreTable(**cols), score_max
