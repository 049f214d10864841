"""Synthetic longitudinal cohorts with monotone, jump-like latent severity.

Each patient has ``rois_per_patient`` regions (groups ``"<patient>/roi<r>"``)
imaged at the same irregular visit times. Severity per group is a
piecewise-constant nondecreasing jump process; features embed it linearly
along a region-specific direction, add a patient-constant nuisance offset in
the orthogonal complement, an optional per-visit offset in the same
complement (shared by the regions of one visit) and i.i.d. Gaussian noise. Reader
scores are ``clip(round(s), 0, K)`` with optional +-1 reader errors.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Cohort, Sample, split_patients


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 200
    visit_counts: tuple = (2, 3, 4, 5, 6, 7)
    visit_probs: tuple = (0.1, 0.2, 0.3, 0.2, 0.1, 0.1)
    rois_per_patient: int = 4
    feature_dim: int = 32
    severity_dims: int = 4
    horizon: float = 6.0
    baseline_shape: float = 1.0
    baseline_scale: float = 0.6
    jump_rate: float = 0.5
    jump_shape: float = 2.0
    jump_scale: float = 0.4
    frailty_shape: float = 2.0
    severity_scale: float = 1.0
    twist_rate: float = 0.0
    twist_radius: float = 1.0
    nuisance_sigma: float = 2.0
    visit_nuisance_sigma: float = 0.0
    noise_sigma: float = 0.2
    label_max: int = 4
    reader_noise_prob: float = 0.1
    split_fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.twist_rate and self.severity_dims < 3:
            raise ValueError("a twisted severity path needs severity_dims >= 3")
        if self.severity_dims > self.feature_dim:
            raise ValueError("severity_dims must not exceed feature_dim")
        if self.severity_dims < 1 or self.rois_per_patient < 1 or self.n_patients < 0:
            raise ValueError("severity_dims and rois_per_patient must be positive")
        for name in ("jump_rate", "noise_sigma", "nuisance_sigma", "visit_nuisance_sigma", "jump_shape", "jump_scale",
                     "baseline_shape", "baseline_scale", "frailty_shape", "severity_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.reader_noise_prob <= 1.0:
            raise ValueError("reader_noise_prob must lie in [0, 1]")
        if len(self.visit_counts) != len(self.visit_probs) or min(self.visit_counts) < 1:
            raise ValueError("visit_counts/visit_probs mismatch")
        if abs(sum(self.visit_probs) - 1.0) > 1e-9:
            raise ValueError("visit_probs must sum to 1")
        if self.horizon <= 0 or self.label_max < 1:
            raise ValueError("horizon and label_max must be positive")


@dataclass(frozen=True)
class LatentTrajectory:
    group_id: str
    visit_times: np.ndarray
    severity: np.ndarray
    jump_times: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _embedding(config: CohortConfig, rng: np.random.Generator):
    """Per-region orthonormal frames (rois, 3, D) inside the severity subspace.

    Row 0 is the linear severity direction, rows 1-2 span the twist plane.
    """
    D, k = config.feature_dim, config.severity_dims
    q, _ = np.linalg.qr(rng.standard_normal((D, D)))
    severity_basis, nuisance_basis = q[:, :k], q[:, k:]
    m = min(3, k)
    frames = np.zeros((config.rois_per_patient, 3, D))
    for r in range(config.rois_per_patient):
        w, _ = np.linalg.qr(rng.standard_normal((k, m)))
        frames[r, :m] = (severity_basis @ w).T
    return frames, nuisance_basis


def severity_path(s, frame, config: CohortConfig) -> np.ndarray:
    """Feature displacement for severity ``s``: linear drift plus an optional helix.

    With ``twist_rate`` w > 0 the path is ``a s e0 + R (cos(w s) e1 + sin(w s) e2)``,
    so raw distances are not monotone in severity differences.
    """
    x = config.severity_scale * s * frame[0]
    if config.twist_rate:
        phase = config.twist_rate * s
        x = x + config.twist_radius * (np.cos(phase) * frame[1] + np.sin(phase) * frame[2])
    return x


def _jump_process(rng, horizon, rate, config):
    """Severity path: baseline plus gamma-sized jumps at Poisson times."""
    baseline = rng.gamma(config.baseline_shape, config.baseline_scale) if config.baseline_shape > 0 else 0.0
    n_jumps = rng.poisson(rate * horizon) if rate > 0 else 0
    times = np.sort(rng.uniform(0.0, horizon, size=n_jumps))
    sizes = rng.gamma(config.jump_shape, config.jump_scale, size=n_jumps) if n_jumps else np.zeros(0)
    return baseline, times, sizes


def _generate_patient(index: int, seed_seq, config: CohortConfig, frames, nuisance_basis):
    rng = np.random.default_rng(seed_seq)
    patient = f"p{index:04d}"
    n_visits = int(rng.choice(config.visit_counts, p=config.visit_probs))
    visit_times = np.sort(rng.uniform(0.0, config.horizon, size=n_visits))
    while np.any(np.diff(visit_times) <= 0):  # measure-zero ties
        visit_times = np.sort(rng.uniform(0.0, config.horizon, size=n_visits))
    frailty = rng.gamma(config.frailty_shape, 1.0 / config.frailty_shape) if config.frailty_shape > 0 else 1.0
    nuisance = nuisance_basis @ (config.nuisance_sigma * rng.standard_normal(nuisance_basis.shape[1])) \
        if nuisance_basis.shape[1] else np.zeros(config.feature_dim)

    # acquisition offset per visit, shared by all regions of that visit
    k = nuisance_basis.shape[1]
    visit_offsets = (config.visit_nuisance_sigma * rng.standard_normal((n_visits, k))) @ nuisance_basis.T \
        if k and config.visit_nuisance_sigma > 0 else np.zeros((n_visits, config.feature_dim))

    rows, trajectories = [], {}
    for r in range(config.rois_per_patient):
        group_id = f"{patient}/roi{r}"
        baseline, jump_times, sizes = _jump_process(rng, config.horizon, config.jump_rate * frailty, config)
        cumulative = np.concatenate([[0.0], np.cumsum(sizes)])
        severity = baseline + cumulative[np.searchsorted(jump_times, visit_times, side="right")]
        trajectories[group_id] = LatentTrajectory(group_id, visit_times.copy(), severity, jump_times)
        score = f"score{r}"
        for v, (t, s) in enumerate(zip(visit_times, severity)):
            x = severity_path(s, frames[r], config) + nuisance + visit_offsets[v]
            if config.noise_sigma > 0:
                x = x + config.noise_sigma * rng.standard_normal(config.feature_dim)
            label = int(np.clip(np.rint(s), 0, config.label_max))
            if config.reader_noise_prob > 0 and rng.random() < config.reader_noise_prob:
                label = int(np.clip(label + rng.choice((-1, 1)), 0, config.label_max))
            labels = {f"score{q}": None for q in range(config.rois_per_patient)}  # not scored here
            labels[score] = label
            rows.append((group_id, float(t), x, labels))
    return rows, trajectories


def generate(config: CohortConfig):
    """Return ``(cohort, trajectories)`` for ``config``; pure function of the config.

    Patients get independent child seeds, so per-patient generation is
    order-independent. Samples are sorted by group id then timestamp.
    """
    root = np.random.SeedSequence(config.seed)
    embed_seq, *patient_seqs = root.spawn(config.n_patients + 1)
    frames, nuisance_basis = _embedding(config, np.random.default_rng(embed_seq))

    rows, trajectories = [], {}
    for i, seq in enumerate(patient_seqs):
        r, tr = _generate_patient(i, seq, config, frames, nuisance_basis)
        rows.extend(r)
        trajectories.update(tr)
    rows.sort(key=lambda row: (row[0], row[1]))
    samples = tuple(Sample(i, g, t, x, labels, 0) for i, (g, t, x, labels) in enumerate(rows))
    score_types = tuple((f"score{r}", config.label_max) for r in range(config.rois_per_patient))
    cohort = Cohort(samples, score_types, {})
    if config.n_patients:
        cohort = split_patients(cohort, config.split_fractions, seed=config.seed)
    return cohort, trajectories


def true_severity(trajectories, group_id: str, timestamp: float) -> float:
    try:
        traj = trajectories[group_id]
    except KeyError:
        raise KeyError(f"unknown group {group_id!r}") from None
    hits = np.flatnonzero(traj.visit_times == timestamp)
    if hits.size == 0:
        raise KeyError(f"{group_id!r} has no visit at t={timestamp!r}")
    return float(traj.severity[hits[0]])


def dumps_truth(trajectories) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["group_id", "timestamp", "severity"])
    for gid in sorted(trajectories):
        traj = trajectories[gid]
        for t, s in zip(traj.visit_times, traj.severity):
            writer.writerow([gid, format(float(t), ".17g"), format(float(s), ".17g")])
    return buf.getvalue()


def save_truth(trajectories, path) -> None:
    Path(path).write_bytes(dumps_truth(trajectories).encode("utf-8"))


def load_truth(path) -> dict:
    groups: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(row["group_id"], []).append((float(row["timestamp"]), float(row["severity"])))
    out = {}
    for gid, pts in groups.items():
        pts.sort()
        out[gid] = LatentTrajectory(gid, np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
    return out


def config_dict(config: CohortConfig) -> dict:
    return asdict(config)
