"""Label-efficiency sweeps, embedding analyses and plot-ready report files."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .data import Cohort, subsample_labeled_patients
from .metrics import ScoreTable, evaluate_tables
from .training import VARIANTS, Model, TrainConfig, finetune, pretrain, predict_scores, scratch

log = logging.getLogger(__name__)

SCRATCH = "scratch"
METRICS = ("icc31", "icc21", "rmse", "mae", "pearson")


# ------------------------------------------------------------- evaluation

def score_table(model: Model, cohort: Cohort, split: str | None = "test") -> ScoreTable:
    """Predictions joined with true labels for the view-0 samples of ``split``."""
    part = cohort.subset(split) if split and cohort.split_assignment else cohort
    samples = [s for s in part.samples if s.view_id == 0]
    part = Cohort(tuple(samples), part.score_types, part.split_assignment)
    preds = {(sid, name): y for sid, name, y in predict_scores(model, part)}
    # a None entry is a score this sample does not carry (or an unlabeled one)
    rows = [(s.patient, s.timestamp, name, float(y), preds[(s.sample_id, name)])
            for s in samples for name, y in sorted(s.labels.items()) if y is not None]
    if not rows:
        return ScoreTable([], [], [], [], [])
    return ScoreTable(*map(list, zip(*rows)))


def evaluate_model(model: Model, cohort: Cohort, split: str = "test", B: int = 2000, seed: int = 0,
                   baseline: Model | None = None) -> dict:
    table = score_table(model, cohort, split)
    other = score_table(baseline, cohort, split) if baseline is not None else None
    return evaluate_tables(table, cohort.score_max, B=B, seed=seed, baseline=other)


# ----------------------------------------------------------------- sweeps

def parse_variant(name: str) -> tuple[str, bool]:
    """``"chrono+dae"`` -> ``("chrono", True)``; ``"scratch"`` and ``"dae"`` are special."""
    if name == SCRATCH:
        return SCRATCH, False
    loss, _, extra = name.partition("+")
    if loss not in VARIANTS or extra not in ("", "dae"):
        raise ValueError(f"unknown sweep variant {name!r}")
    return loss, extra == "dae" or loss == "dae"


@dataclass(frozen=True)
class SweepSpec:
    n_labeled: tuple = (5, 10, 20, 40, 120)
    variants: tuple = (SCRATCH, "dae", "chrono+dae")
    repetitions: int = 5
    out_dir: str = "sweep"
    bootstrap: int = 1000
    jobs: int = 1

    def validate(self, cohort: Cohort) -> None:
        n_train = len(cohort.patients_in("train"))
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.bootstrap < 100:
            raise ValueError("bootstrap must be >= 100")
        for n in self.n_labeled:
            if not 0 < n <= n_train:
                raise ValueError(f"n_labeled={n} outside (0, {n_train}]")
        for v in self.variants:
            parse_variant(v)


COLUMNS = ["variant", "n_labeled", "seed", "status", "labeled_scores", "labeled_samples"] + [
    f"{part}_{m}{suffix}" for part in ("cross", "long") for m in METRICS
    for suffix in ("", "_lo", "_hi")] + ["c", "mse_delta_empirical", "mse_delta_model", "best_epoch", "error"]


def _pretrained_path(out_dir, variant, seed):
    return Path(out_dir) / "models" / f"{variant.replace('+', '_')}_s{seed}.json"


def _pretrain_task(args):
    cohort, variant, seed, config, path = args
    if Path(path).exists():
        return str(path)
    loss, use_dae = parse_variant(variant)
    model = pretrain(cohort, loss, use_dae, TrainConfig(**{**asdict(config), "seed": seed}))
    tmp = Path(str(path) + ".tmp")
    model.save(tmp)
    os.replace(tmp, path)
    return str(path)


def run_cell(cohort: Cohort, variant: str, n_labeled: int, seed: int, config: TrainConfig,
             out_dir, bootstrap: int = 1000) -> dict:
    """Fine-tune (or train from scratch) on ``n_labeled`` patients and evaluate on test."""
    row = {"variant": variant, "n_labeled": n_labeled, "seed": seed}
    try:
        cfg = TrainConfig(**{**asdict(config), "seed": seed})
        masked = subsample_labeled_patients(cohort, n_labeled, seed)
        train = masked.subset("train")
        row["labeled_samples"] = sum(any(v is not None for v in s.labels.values()) for s in train.samples)
        row["labeled_scores"] = sum(v is not None for s in train.samples for v in s.labels.values())
        if variant == SCRATCH:
            model = scratch(masked, cfg)
        else:
            model = finetune(Model.load(_pretrained_path(out_dir, variant, seed)), masked, cfg)
        report = evaluate_model(model, cohort, "test", B=bootstrap, seed=seed)
        for part, key in (("cross", "cross_sectional"), ("long", "longitudinal")):
            for m in METRICS:
                entry = report[key].get(m, {})
                row[f"{part}_{m}"] = entry.get("value")
                row[f"{part}_{m}_lo"] = entry.get("ci_low")
                row[f"{part}_{m}_hi"] = entry.get("ci_high")
        row.update(c=report["c"], mse_delta_empirical=report["mse_delta_empirical"],
                   mse_delta_model=report["mse_delta_model"], best_epoch=model.meta.get("best_epoch"),
                   status="ok", error="")
    except Exception as exc:  # recorded, sweep continues
        log.warning("cell %s/%s/%s failed: %s", variant, n_labeled, seed, exc)
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def _cell_task(args):
    return run_cell(*args)


def _fmt(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _row_key(row):
    return (str(row["variant"]), int(row["n_labeled"]), int(row["seed"]))


def read_sweep(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k, v in row.items():
            if k in ("variant", "status", "error"):
                continue
            if v == "":
                row[k] = None
            elif k in ("n_labeled", "seed", "labeled_scores", "labeled_samples", "best_epoch"):
                row[k] = int(float(v))
            else:
                row[k] = float(v)
    return rows


def write_sweep(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in sorted(rows, key=_row_key):
            w.writerow([_fmt(row.get(c)) for c in COLUMNS])


def _append(path, row) -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(COLUMNS)
        w.writerow([_fmt(row.get(c)) for c in COLUMNS])
        fh.flush()
        os.fsync(fh.fileno())


def run_sweep(spec: SweepSpec, cohort: Cohort, config: TrainConfig | None = None,
              max_cells: int | None = None) -> list[dict]:
    """Run every (variant, n_labeled, seed) cell not yet recorded in ``out_dir``.

    Completed cells are appended to ``cells.csv`` as they finish, so an
    interrupted sweep resumes where it stopped (failed cells are retried); ``sweep.csv`` is the sorted
    final table. Pretrained encoders are cached per (variant, seed).
    ``max_cells`` stops after that many new cells (used to exercise resume).
    """
    config = config or TrainConfig.desk()
    spec.validate(cohort)
    out = Path(spec.out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    log_path = out / "cells.csv"
    done = {_row_key(r): r for r in read_sweep(log_path)}
    seeds = list(range(spec.repetitions))
    cells = [(v, n, s) for v in spec.variants for n in spec.n_labeled for s in seeds
             if done.get((v, n, s), {}).get("status") != "ok"]
    if max_cells is not None:
        cells = cells[:max_cells]
    needed = sorted({(v, s) for v, _, s in cells if v != SCRATCH})
    jobs = max(1, spec.jobs)
    cap = os.environ.get("CHRONOCON_THREADS")
    if cap:
        jobs = max(1, min(jobs, int(cap)))

    pre_args = [(cohort, v, s, config, _pretrained_path(out, v, s)) for v, s in needed]
    cell_args = [(cohort, v, n, s, config, out, spec.bootstrap) for v, n, s in cells]
    if jobs == 1:
        for a in pre_args:
            _pretrain_task(a)
        for a in cell_args:
            row = _cell_task(a)
            done[_row_key(row)] = row
            _append(log_path, row)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_pretrain_task, pre_args))
            for row in pool.map(_cell_task, cell_args):
                done[_row_key(row)] = row
                _append(log_path, row)
    rows = sorted(done.values(), key=_row_key)
    write_sweep(out / "sweep.csv", rows)
    (out / "spec.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=1) + "\n")
    return rows


def summarize(rows, metric="icc31") -> dict:
    """Seed-averaged metric per (variant, n_labeled) for both evaluation modes."""
    acc: dict = {}
    for r in rows:
        if r.get("status") != "ok":
            continue
        key = (r["variant"], int(r["n_labeled"]))
        acc.setdefault(key, []).append((r[f"cross_{metric}"], r[f"long_{metric}"]))
    return {k: tuple(float(np.mean([x[i] for x in v])) for i in (0, 1)) for k, v in acc.items()}


def gap_trend(rows, variant="chrono+dae", baseline=SCRATCH, metric="icc31", part=1):
    """Per-grid gap (variant - baseline) and its Spearman correlation with n_labeled."""
    s = summarize(rows, metric)
    grid = sorted({n for (v, n) in s if v == variant and (baseline, n) in s})
    gaps = [s[(variant, n)][part] - s[(baseline, n)][part] for n in grid]
    rho = float(spearmanr(grid, gaps)[0]) if len(grid) > 1 else float("nan")
    return grid, gaps, rho


# ---------------------------------------------------------- embeddings

@dataclass
class PCAResult:
    points: np.ndarray
    explained_variance: np.ndarray   # fraction of total variance per component
    components: np.ndarray           # (k, d) rows are unit loadings
    eigenvalues: np.ndarray
    rank_deficient: bool = False


def pca_project(X, n_components: int = 2) -> PCAResult:
    """Eigendecomposition of the centered covariance; largest loading made positive."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] < n_components:
        raise ValueError(f"need at least {n_components} samples")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    total = evals.sum()
    tol = max(X.shape) * np.finfo(float).eps * (evals[0] if evals.size else 0.0)
    rank = int(np.sum(evals > tol))
    k = min(n_components, rank) if total > 0 else 0
    comps = evecs[:, :k].T
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    ratio = evals[:k] / total if total > 0 else np.zeros(0)
    return PCAResult(Xc @ comps.T, ratio, comps, evals[:k], rank_deficient=k < n_components)


def _samples(cohort: Cohort, split):
    part = cohort.subset(split) if split and cohort.split_assignment else cohort
    return [s for s in part.samples if s.view_id == 0]


def _label_of(sample):
    vals = [v for _, v in sorted(sample.labels.items()) if v is not None]
    return vals[0] if vals else None


def similarity_vs_scorediff(model: Model, cohort: Cohort, split: str | None = "test") -> list[dict]:
    """Feature similarity ``-||v_i - v_j||`` and label change for every ordered visit pair per group."""
    samples = _samples(cohort, split)
    if not samples:
        return []
    V = model.embed(np.stack([s.features for s in samples]))
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.group_id, []).append(i)
    rows = []
    for gid in sorted(groups):
        idx = sorted(groups[gid], key=lambda i: samples[i].timestamp)
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                i, j = idx[a], idx[b]
                yi, yj = _label_of(samples[i]), _label_of(samples[j])
                rows.append({"group_id": gid, "t1": samples[i].timestamp, "t2": samples[j].timestamp,
                             "visit_gap": b - a,
                             "delta_label": None if yi is None or yj is None else yj - yi,
                             "similarity": -float(np.linalg.norm(V[i] - V[j]))})
    return rows


def bucket_medians(rows, buckets=(0, 1, 2, 3)) -> dict:
    out = {}
    for b in buckets:
        sims = [r["similarity"] for r in rows if r["delta_label"] == b]
        out[b] = float(np.median(sims)) if sims else float("nan")
    return out


def strictly_decreasing(values) -> bool:
    v = list(values)
    return all(np.isfinite(v)) and all(x > y for x, y in zip(v[:-1], v[1:]))


def delta_histogram(rows) -> dict:
    hist: dict = {}
    for r in rows:
        if r["delta_label"] is not None:
            hist[r["delta_label"]] = hist.get(r["delta_label"], 0) + 1
    return dict(sorted(hist.items()))


def within_group_rank_correlation(model: Model, cohort: Cohort, split: str | None = "test") -> float:
    """Mean over groups (>= 3 visits) of the Spearman correlation between
    ``-||v(t_first) - v(t)||`` and visit index."""
    samples = _samples(cohort, split)
    V = model.embed(np.stack([s.features for s in samples]))
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.group_id, []).append(i)
    rhos = []
    for gid in sorted(groups):
        idx = sorted(groups[gid], key=lambda i: samples[i].timestamp)
        if len(idx) < 3:
            continue
        sims = [-np.linalg.norm(V[idx[0]] - V[i]) for i in idx[1:]]
        if np.ptp(sims) == 0:  # a region that never changed has no ordering to score
            continue
        rhos.append(spearmanr(np.arange(len(sims)), sims)[0])
    return float(np.mean(rhos)) if rhos else float("nan")


def analyze_embeddings(model: Model, cohort: Cohort, split: str | None = "test") -> dict:
    samples = _samples(cohort, split)
    V = model.embed(np.stack([s.features for s in samples]))
    pca = pca_project(V, 2)
    first, last = {}, {}
    for s in samples:
        first[s.group_id] = min(first.get(s.group_id, s.timestamp), s.timestamp)
        last[s.group_id] = max(last.get(s.group_id, s.timestamp), s.timestamp)
    pca_rows = []
    for s, pt in zip(samples, pca.points):
        span = last[s.group_id] - first[s.group_id]
        pca_rows.append({"sample_id": s.sample_id, "group_id": s.group_id, "timestamp": s.timestamp,
                         "t_rel": (s.timestamp - first[s.group_id]) / span if span > 0 else 0.0,
                         "label": _label_of(s), "pc1": float(pt[0]) if pt.size > 0 else 0.0,
                         "pc2": float(pt[1]) if pt.size > 1 else 0.0})
    simdiff = similarity_vs_scorediff(model, cohort, split)
    return {"pca": pca_rows, "explained_variance": [float(x) for x in pca.explained_variance],
            "simdiff": simdiff, "histogram": delta_histogram(simdiff),
            "bucket_medians": bucket_medians(simdiff)}


# -------------------------------------------------------------- reports

def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


TABLE2_COLUMNS = ["variant", "patients", "labeled_scores", "labeled_samples", "scores_pct",
                  "cross_rmse", "cross_rmse_ci_half", "cross_icc", "cross_icc_ci_half",
                  "long_rmse", "long_rmse_ci_half", "long_icc", "long_icc_ci_half",
                  "cross_rmse_vs_scratch", "cross_icc_vs_scratch", "long_rmse_vs_scratch", "long_icc_vs_scratch"]


def _mean(rows, key):
    vals = [r[key] for r in rows if r.get(key) is not None]
    return float(np.mean(vals)) if vals else None


def _half(rows, key):
    vals = [(r[f"{key}_hi"] - r[f"{key}_lo"]) / 2 for r in rows
            if r.get(f"{key}_hi") is not None and r.get(f"{key}_lo") is not None]
    return float(np.mean(vals)) if vals else None


def table2_rows(rows) -> list[list]:
    ok = [r for r in rows if r.get("status") == "ok"]
    cells: dict = {}
    for r in ok:
        cells.setdefault((r["variant"], int(r["n_labeled"])), []).append(r)
    total_scores = max((r["labeled_scores"] for r in ok), default=0)
    out = []
    for (variant, n) in sorted(cells):
        rs = cells[(variant, n)]
        base = cells.get((SCRATCH, n), [])
        scores = _mean(rs, "labeled_scores")
        rec = [variant, n, scores, _mean(rs, "labeled_samples"),
               100.0 * scores / total_scores if total_scores else None]
        for part in ("cross", "long"):
            rec += [_mean(rs, f"{part}_rmse"), _half(rs, f"{part}_rmse"),
                    _mean(rs, f"{part}_icc31"), _half(rs, f"{part}_icc31")]
        for part in ("cross", "long"):
            for m in ("rmse", "icc31"):
                a, b = _mean(rs, f"{part}_{m}"), _mean(base, f"{part}_{m}")
                rec.append(None if a is None or b is None or variant == SCRATCH else a - b)
        out.append(rec)
    return out


def fig3_rows(rows, part) -> list[list]:
    ok = [r for r in rows if r.get("status") == "ok"]
    cells: dict = {}
    for r in ok:
        cells.setdefault((r["variant"], int(r["n_labeled"])), []).append(r)
    out = []
    for (variant, n) in sorted(cells):
        rs = cells[(variant, n)]
        out.append([variant, n, _mean(rs, f"{part}_icc31"), _mean(rs, f"{part}_icc31_lo"),
                    _mean(rs, f"{part}_icc31_hi"), len(rs)])
    return out


def emit_report(rows, embeddings: dict | None, out_dir) -> Path:
    """Write fig3_left/right, fig4_pca/simdiff, table2 CSVs and summary.md to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=_row_key)
    fig_header = ["variant", "n_labeled", "icc31", "ci_low", "ci_high", "n_seeds"]
    _write_csv(out / "fig3_left.csv", fig_header, fig3_rows(rows, "cross"))
    _write_csv(out / "fig3_right.csv", fig_header, fig3_rows(rows, "long"))
    _write_csv(out / "table2.csv", TABLE2_COLUMNS, table2_rows(rows))
    embeddings = embeddings or {"pca": [], "simdiff": [], "histogram": {}, "bucket_medians": {}}
    pca_cols = ["sample_id", "group_id", "timestamp", "t_rel", "label", "pc1", "pc2"]
    _write_csv(out / "fig4_pca.csv", pca_cols, [[r[c] for c in pca_cols] for r in embeddings["pca"]])
    sim_cols = ["group_id", "t1", "t2", "visit_gap", "delta_label", "similarity"]
    _write_csv(out / "fig4_simdiff.csv", sim_cols, [[r[c] for c in sim_cols] for r in embeddings["simdiff"]])
    _write_csv(out / "fig4_simdiff_hist.csv", ["delta_label", "count"],
               [[k, v] for k, v in sorted(embeddings["histogram"].items())])

    ok = [r for r in rows if r.get("status") == "ok"]
    failed = [r for r in rows if r.get("status") != "ok"]
    lines = ["# Sweep summary", "", f"cells: {len(rows)} ({len(ok)} ok, {len(failed)} failed)", ""]
    if ok:
        lines += ["| variant | labeled patients | ICC cross | ICC progression | RMSE cross | RMSE progression |",
                  "|---|---|---|---|---|---|"]
        for rec in table2_rows(rows):
            v, n = rec[0], rec[1]
            lines.append(f"| {v} | {n} | {rec[7]:.3f} | {rec[11]:.3f} | {rec[5]:.3f} | {rec[9]:.3f} |"
                         if None not in (rec[5], rec[7], rec[9], rec[11]) else f"| {v} | {n} | | | | |")
        variants = {r["variant"] for r in ok}
        for v in sorted(variants - {SCRATCH}):
            if SCRATCH in variants:
                grid, gaps, rho = gap_trend(ok, v)
                if grid:
                    lines += ["", f"progression ICC gap {v} - scratch: " +
                              ", ".join(f"n={n}: {g:+.3f}" for n, g in zip(grid, gaps)) +
                              f" (Spearman rho vs n: {rho:+.3f})"]
    else:
        lines.append("No completed cells.")
    if embeddings.get("bucket_medians"):
        meds = embeddings["bucket_medians"]
        lines += ["", "median feature similarity by label change: " +
                  ", ".join(f"{k}: {v:.4f}" for k, v in sorted(meds.items()))]
    (out / "summary.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def load_embedding_analysis(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    doc["histogram"] = {int(k): v for k, v in doc.get("histogram", {}).items()}
    doc["bucket_medians"] = {int(k): v for k, v in doc.get("bucket_medians", {}).items()}
    return doc


def save_embedding_analysis(path, analysis: dict) -> None:
    Path(path).write_text(json.dumps(analysis, sort_keys=True, indent=1) + "\n", encoding="utf-8")
