"""Two-stage training: contrastive (+DAE) pretraining, then multi-head regression.

Features are min-max scaled to [0, 1] with statistics from the training split.
The encoder, decoder, SimCLR projector and regression heads are small
:class:`~chronocon.nn.MLP` instances trained with :class:`~chronocon.nn.AdamW`.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import Cohort, Sample
from .losses import COSINE, NEG_L2, SimilarityKind, contrastive_loss, dae_loss
from .nn import MLP, AdamW, ReduceLROnPlateau, load_arrays, save_arrays
from .pairing import Direction, distance_plan, instance_plan, ordered_plan

log = logging.getLogger(__name__)

CHRONO, RNC_LABEL, RNC_TIME, ORDINAL_Y, SIMCLR, DAE_ONLY = "chrono", "rnc", "rnc-t", "ordinal-y", "simclr", "dae"
VARIANTS = (CHRONO, RNC_LABEL, RNC_TIME, ORDINAL_Y, SIMCLR, DAE_ONLY)
LABEL_VARIANTS = (RNC_LABEL, ORDINAL_Y)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(f"{message}; snapshot={snapshot}")
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for both stages.

    Learning rates are given for ``lr_reference_batch`` and scaled linearly
    to ``batch_size``.
    """

    batch_size: int = 64
    encoder_lr: float = 4e-4
    head_lr: float = 4e-5
    lr_reference_batch: int = 512
    weight_decay: float = 1e-6
    stage2_encoder_lr_factor: float = 0.1
    dae_weight: float = 1e3
    dae_noise: float = 1e-5
    early_stop_patience: int = 10
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    pretrain_epochs: int = 30
    finetune_epochs: int = 100
    seed: int = 0
    augment_noise: float = 0.05
    augment_dropout: float = 0.1
    finetune_augment: bool = True
    hidden: tuple = (64, 64)
    embed_dim: int = 16
    head_hidden: int = 128
    activation: str = "relu"
    similarity: str = NEG_L2
    temperature: float = 1.0
    squared_distance: bool = False
    simclr_temperature: float = 0.07
    simclr_projector_dim: int = 128

    def __post_init__(self):
        if min(self.encoder_lr, self.head_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.early_stop_patience < 1 or self.batch_size < 1:
            raise ValueError("patience and batch_size must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Preset for small synthetic cohorts of scaled feature vectors.

        Larger learning rates (few hundred steps instead of GPU-scale runs),
        a reconstruction weight that puts the DAE term on the order of the
        contrastive term for [0, 1]-scaled vectors, 16-unit heads, and
        noise-only views (coordinate dropout swamps the severity signal).
        """
        values = dict(encoder_lr=0.024, head_lr=0.024, dae_weight=10.0, head_hidden=16,
                      augment_noise=0.03, augment_dropout=0.0, finetune_augment=False)
        values.update(overrides)
        return cls(**values)

    @property
    def lr_scale(self) -> float:
        return self.batch_size / self.lr_reference_batch

    @property
    def sim(self) -> SimilarityKind:
        return SimilarityKind(self.similarity, self.temperature, self.squared_distance)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**values)


@dataclass
class Model:
    """Encoder plus optional decoder, projector and per-score regression heads."""

    encoder: MLP
    shift: np.ndarray
    scale: np.ndarray
    decoder: MLP | None = None
    projector: MLP | None = None
    heads: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def normalize(self, X):
        return (np.asarray(X, dtype=float) - self.shift) / self.scale

    def embed(self, X, normalized=False):
        return self.encoder(X if normalized else self.normalize(X))

    def copy(self) -> "Model":
        return Model(self.encoder.copy(), self.shift.copy(), self.scale.copy(),
                     self.decoder.copy() if self.decoder else None,
                     self.projector.copy() if self.projector else None,
                     {k: h.copy() for k, h in self.heads.items()},
                     [dict(h) for h in self.history], dict(self.meta))

    def modules(self) -> dict:
        out = {"encoder": self.encoder}
        if self.decoder is not None:
            out["decoder"] = self.decoder
        if self.projector is not None:
            out["projector"] = self.projector
        for name in sorted(self.heads):
            out[f"head:{name}"] = self.heads[name]
        return out

    def save(self, path) -> None:
        arrays = {"scaler/shift": self.shift, "scaler/scale": self.scale}
        layouts = {}
        for mod_name, mlp in self.modules().items():
            layouts[mod_name] = {"sizes": list(mlp.sizes), "activation": mlp.activation}
            for arr_name, arr in mlp.named_arrays().items():
                arrays[f"{mod_name}/{arr_name}"] = arr
        meta = {"modules": layouts, "history": self.history, "info": self.meta}
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Model":
        arrays, meta = load_arrays(path)
        mods = {}
        for mod_name, lay in meta["modules"].items():
            mlp = MLP(lay["sizes"], lay["activation"])
            for arr_name, view in mlp.named_arrays().items():
                view[...] = arrays[f"{mod_name}/{arr_name}"]
            mods[mod_name] = mlp
        heads = {k[len("head:"):]: v for k, v in mods.items() if k.startswith("head:")}
        return cls(mods["encoder"], arrays["scaler/shift"], arrays["scaler/scale"],
                   mods.get("decoder"), mods.get("projector"), heads,
                   meta.get("history", []), meta.get("info", {}))


def _train_part(cohort: Cohort, split: str) -> Cohort:
    if not cohort.split_assignment:
        return cohort if split == "train" else replace(cohort, samples=())
    return cohort.subset(split)


def init_model(cohort: Cohort, config: TrainConfig = TrainConfig()) -> Model:
    """Fresh encoder/decoder/projector with a scaler fitted on the training split."""
    X = _train_part(cohort, "train").features()
    if X.size == 0:
        raise ValueError("cannot initialise a model without training samples")
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    rng = np.random.default_rng([config.seed, 0])
    D, d = X.shape[1], config.embed_dim
    enc = MLP((D, *config.hidden, d), config.activation, rng)
    dec = MLP((d, *reversed(config.hidden), D), config.activation, rng)
    proj = MLP((d, d, config.simclr_projector_dim), config.activation, rng)
    return Model(enc, lo, span, dec, proj, meta={"feature_dim": D})


def init_heads(model: Model, score_names, config: TrainConfig) -> dict:
    rng = np.random.default_rng([config.seed, 1])
    d, h = model.encoder.sizes[-1], config.head_hidden
    return {name: MLP((d, h, h, 1), config.activation, rng) for name in score_names}


# ---------------------------------------------------------------- batching

def _group_medians(samples) -> dict:
    vals: dict = {}
    for s in samples:
        present = [v for v in s.labels.values() if v is not None]
        vals.setdefault(s.group_id, []).extend(present)
    return {g: float(np.median(v)) if v else 0.0 for g, v in vals.items()}


def build_batches(samples, batch_size: int, labels_available: bool = False, seed: int = 0,
                  epoch: int = 0) -> list[np.ndarray]:
    """Group-contiguous batches of sample indices for one epoch.

    Without labels every group appears once per epoch in a seeded random
    order. With labels, groups are drawn with replacement with probability
    proportional to ``1 + median(label)``; equal weights fall back to the
    unlabeled scheme. A group appears at most once per batch.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot batch an empty cohort")
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.group_id, []).append(i)
    names = sorted(groups)
    if batch_size >= len(samples):
        return [np.array(sorted(i for g in names for i in groups[g]))]

    rng = np.random.default_rng([seed, epoch])
    weights = None
    if labels_available:
        med = _group_medians(samples)
        weights = np.array([1.0 + med[g] for g in names])
        if np.all(weights == weights[0]):
            weights = None
    if weights is None:
        draws = rng.permutation(len(names))
    else:
        draws = rng.choice(len(names), size=len(names), replace=True, p=weights / weights.sum())

    batches, current, members = [], [], set()
    for g in draws:
        idx = groups[names[g]]
        if len(idx) > batch_size:
            warnings.warn(f"group {names[g]} has {len(idx)} samples > batch_size {batch_size}; splitting")
            for start in range(0, len(idx), batch_size):
                batches.append(np.array(idx[start:start + batch_size]))
            continue
        if len(current) + len(idx) > batch_size or g in members:
            batches.append(np.array(current))
            current, members = [], set()
        current.extend(idx)
        members.add(g)
    if current:
        batches.append(np.array(current))
    return batches


# ------------------------------------------------------------ augmentation

def augment_features(X, noise_scale, dropout, rng):
    X = np.asarray(X, dtype=float)
    out = X + noise_scale * rng.standard_normal(X.shape) if noise_scale > 0 else X.copy()
    if dropout > 0:
        out[rng.random(X.shape) < dropout] = 0.0
    return out


def augment_two_views(sample: Sample, noise_scale: float, seed: int, dropout: float = 0.1):
    """Two stochastic views of ``sample`` (view ids 0 and 1), metadata unchanged."""
    if sample.view_id != 0:
        raise ValueError("augment only original (view 0) samples")
    rng = np.random.default_rng(seed)
    views = []
    for view_id in (0, 1):
        x = augment_features(sample.features[None, :], noise_scale, dropout, rng)[0]
        views.append(replace(sample, features=x, labels=dict(sample.labels), view_id=view_id))
    return tuple(views)


# -------------------------------------------------------------- stage one

@dataclass
class _Batch:
    X: np.ndarray
    groups: np.ndarray
    times: np.ndarray
    score_keys: np.ndarray
    score_vals: np.ndarray


def _batch_arrays(model: Model, samples, idx, need_labels: bool) -> _Batch:
    chosen = [samples[i] for i in idx]
    X = model.normalize(np.stack([s.features for s in chosen]))
    keys, vals = [], []
    for s in chosen:
        present = [(k, v) for k, v in s.labels.items() if v is not None]
        if need_labels:
            if not present:
                raise ValueError(f"sample {s.sample_id} has no label; label-based pretraining needs labels")
            keys.append(present[0][0])
            vals.append(present[0][1])
    return _Batch(X, np.array([s.group_id for s in chosen]), np.array([s.timestamp for s in chosen]),
                  np.array(keys), np.array(vals, dtype=float))


def _plan(variant: str, b: _Batch, n: int):
    twice = lambda a: np.concatenate([a, a])  # noqa: E731
    if variant == CHRONO:
        return ordered_plan(twice(b.groups), twice(b.times))
    if variant == RNC_TIME:
        return distance_plan(twice(b.groups), twice(b.times), Direction.TIME_DIST)
    if variant == RNC_LABEL:
        return distance_plan(twice(b.score_keys), twice(b.score_vals), Direction.LABEL)
    if variant == ORDINAL_Y:
        return ordered_plan(twice(b.score_keys), twice(b.score_vals))
    if variant == SIMCLR:
        return instance_plan(twice(np.arange(n)))
    raise ValueError(f"unknown contrastive variant {variant!r}")


def stage1_objective(model: Model, b: _Batch, variant: str, use_dae: bool, config: TrainConfig, rng,
                     grads: bool = True):
    """Loss value, components and per-module flat gradients for one batch."""
    n = len(b.X)
    contrastive = variant != DAE_ONLY
    use_dae = use_dae or not contrastive
    if contrastive:
        inputs = np.concatenate([augment_features(b.X, config.augment_noise, config.augment_dropout, rng),
                                 augment_features(b.X, config.augment_noise, config.augment_dropout, rng)])
    else:
        inputs = augment_features(b.X, config.augment_noise, config.augment_dropout, rng)
    enc_in = inputs
    if use_dae:
        enc_in = np.clip(inputs + config.dae_noise * rng.standard_normal(inputs.shape), 0.0, 1.0)
    V, enc_cache = model.encoder.forward(enc_in)
    gV = np.zeros_like(V)
    parts = {}
    out_grads = {}
    if contrastive:
        plan = _plan(variant, b, n)
        if variant == SIMCLR:
            Z, pcache = model.projector.forward(V)
            res = contrastive_loss(plan, Z, SimilarityKind(COSINE, config.simclr_temperature))
            if grads:
                out_grads["projector"], gproj = model.projector.backward(pcache, res.grad)
                gV += gproj
        else:
            res = contrastive_loss(plan, V, config.sim)
            gV += res.grad
        parts["contrastive"] = res.value
        parts["terms"] = len(plan)
    if use_dae:
        R, dcache = model.decoder.forward(V)
        value, gR = dae_loss(inputs, enc_in, R)
        parts["dae"] = value
        if grads:
            out_grads["decoder"], gdec = model.decoder.backward(dcache, config.dae_weight * gR)
            gV += gdec
    total = parts.get("contrastive", 0.0) + (config.dae_weight * parts["dae"] if use_dae else 0.0)
    if grads:
        out_grads["encoder"], _ = model.encoder.backward(enc_cache, gV)
    return total, parts, out_grads


def _check_finite(total, parts, model, epoch, step):
    if not np.isfinite(total):
        snapshot = {"epoch": epoch, "step": step, "parts": {k: float(v) for k, v in parts.items()},
                    "param_norms": {k: float(np.linalg.norm(m.params)) for k, m in model.modules().items()}}
        raise TrainingDivergedError("non-finite loss", snapshot)


def pretrain(cohort: Cohort, variant: str = CHRONO, use_dae: bool = True,
             config: TrainConfig = TrainConfig(), model: Model | None = None) -> Model:
    """Stage 1: train the encoder on ``variant`` (+ weighted DAE) without score heads.

    Runs ``config.pretrain_epochs`` epochs with a plateau scheduler on the
    validation objective; per-epoch losses are appended to ``model.history``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    model = init_model(cohort, config) if model is None else model.copy()
    train = list(_train_part(cohort, "train").samples)
    val = list(_train_part(cohort, "val").samples)
    need_labels = variant in LABEL_VARIANTS
    use_dae = use_dae or variant == DAE_ONLY

    trained = {"encoder": model.encoder}
    if use_dae:
        trained["decoder"] = model.decoder
    if variant == SIMCLR:
        trained["projector"] = model.projector
    lr = config.encoder_lr * config.lr_scale
    opts = {k: AdamW(m.n_params, lr, weight_decay=config.weight_decay) for k, m in trained.items()}
    sched = ReduceLROnPlateau(opts.values(), config.plateau_factor, config.plateau_patience)
    model.meta.update({"variant": variant, "use_dae": bool(use_dae), "stage": 1})

    val_batches = build_batches(val, config.batch_size, False, seed=config.seed + 1, epoch=0) if val else []
    for epoch in range(config.pretrain_epochs):
        rng = np.random.default_rng([config.seed, 2, epoch])
        losses = []
        for step, idx in enumerate(build_batches(train, config.batch_size, False, config.seed, epoch)):
            b = _batch_arrays(model, train, idx, need_labels)
            total, parts, g = stage1_objective(model, b, variant, use_dae, config, rng)
            _check_finite(total, parts, model, epoch, step)
            for k, opt in opts.items():
                opt.step(trained[k].params, g[k])
            losses.append(total)
        val_loss = None
        if val_batches:
            vrng = np.random.default_rng([config.seed, 3])
            val_loss = float(np.mean([
                stage1_objective(model, _batch_arrays(model, val, idx, need_labels), variant, use_dae,
                                 config, vrng, grads=False)[0] for idx in val_batches]))
        train_loss = float(np.mean(losses)) if losses else float("nan")
        sched.step(val_loss if val_loss is not None else train_loss)
        model.history.append({"stage": 1, "epoch": epoch, "train_loss": train_loss,
                              "val_loss": val_loss, "lr": opts["encoder"].lr})
        log.debug("pretrain %s epoch %d train %.4f val %s", variant, epoch, train_loss, val_loss)
    return model


# -------------------------------------------------------------- stage two

def _label_table(samples, names):
    Y = np.full((len(samples), len(names)), np.nan)
    col = {n: j for j, n in enumerate(names)}
    for i, s in enumerate(samples):
        for k, v in s.labels.items():
            if v is not None and k in col:
                Y[i, col[k]] = v
    return Y


def _heads_forward(model: Model, V, Y, names, grads=True):
    """Sum of squared errors over present labels and gradients."""
    sse, count = 0.0, 0
    gV = np.zeros_like(V)
    head_grads = {}
    abs_err = 0.0
    for j, name in enumerate(names):
        rows = np.flatnonzero(~np.isnan(Y[:, j]))
        if rows.size == 0:
            if grads:
                head_grads[name] = np.zeros(model.heads[name].n_params)
            continue
        pred, cache = model.heads[name].forward(V[rows])
        r = pred[:, 0] - Y[rows, j]
        sse += float(r @ r)
        abs_err += float(np.abs(r).sum())
        count += rows.size
        if grads:
            head_grads[name], gv = model.heads[name].backward(cache, 2.0 * r[:, None])
            gV[rows] += gv
    return sse, abs_err, count, gV, head_grads


def finetune(model: Model, cohort: Cohort, config: TrainConfig = TrainConfig(),
             encoder_lr_factor: float | None = None) -> Model:
    """Stage 2: fit one regression head per score type with MSE on present labels.

    The encoder is updated at ``encoder_lr_factor`` (default
    ``config.stage2_encoder_lr_factor``) times the encoder learning rate.
    Early stopping on validation MAE restores the best epoch.
    """
    factor = config.stage2_encoder_lr_factor if encoder_lr_factor is None else encoder_lr_factor
    model = model.copy()
    names = cohort.score_names
    train = [s for s in _train_part(cohort, "train").samples if any(v is not None for v in s.labels.values())]
    if not train:
        raise ValueError("no labeled training samples")
    val = [s for s in _train_part(cohort, "val").samples if any(v is not None for v in s.labels.values())]
    if not model.heads:
        model.heads = init_heads(model, names, config)
    Y_train = _label_table(train, names)
    X_train = model.normalize(np.stack([s.features for s in train]))
    if val:
        Y_val = _label_table(val, names)
        X_val = model.normalize(np.stack([s.features for s in val]))

    scale = config.lr_scale
    enc_opt = AdamW(model.encoder.n_params, config.encoder_lr * scale * factor, weight_decay=config.weight_decay)
    head_opts = {n: AdamW(h.n_params, config.head_lr * scale, weight_decay=config.weight_decay)
                 for n, h in model.heads.items()}
    sched = ReduceLROnPlateau([enc_opt, *head_opts.values()], config.plateau_factor, config.plateau_patience)
    model.meta.update({"stage": 2, "encoder_lr_factor": factor})

    best = (np.inf, -1, None)
    for epoch in range(config.finetune_epochs):
        rng = np.random.default_rng([config.seed, 4, epoch])
        losses = []
        for step, idx in enumerate(build_batches(train, config.batch_size, True, config.seed, epoch)):
            X = X_train[idx]
            if config.finetune_augment:
                X = augment_features(X, config.augment_noise, config.augment_dropout, rng)
            V, cache = model.encoder.forward(X)
            sse, _, count, gV, hg = _heads_forward(model, V, Y_train[idx], names)
            if count == 0:
                continue
            loss = sse / count
            _check_finite(loss, {"mse": loss}, model, epoch, step)
            for n in names:
                head_opts[n].step(model.heads[n].params, hg[n] / count)
            if enc_opt.lr > 0:
                g_enc, _ = model.encoder.backward(cache, gV / count)
                enc_opt.step(model.encoder.params, g_enc)
            losses.append(loss)
        record = {"stage": 2, "epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None}
        if val:
            sse, sae, count, _, _ = _heads_forward(model, model.encoder(X_val), Y_val, names, grads=False)
            record.update(val_mse=sse / count, val_mae=sae / count)
            sched.step(sse / count)
            if record["val_mae"] < best[0]:
                best = (record["val_mae"], epoch, model.copy())
        model.history.append(record)
        if val and epoch - best[1] >= config.early_stop_patience:
            break
    if best[2] is not None:
        restored = best[2]
        restored.history = model.history
        restored.meta.update(best_epoch=best[1], best_val_mae=best[0])
        return restored
    return model


def scratch(cohort: Cohort, config: TrainConfig = TrainConfig()) -> Model:
    """Single-stage baseline: encoder and heads trained together from initialization."""
    model = init_model(cohort, config)
    model.meta["variant"] = "scratch"
    return finetune(model, cohort, config, encoder_lr_factor=1.0)


def predict_scores(model: Model, cohort: Cohort) -> list[tuple]:
    """Rows ``(sample_id, score_name, y_hat)`` for every score a sample carries; no clipping."""
    samples = list(cohort.samples)
    if not samples:
        return []
    X = np.stack([s.features for s in samples])
    if X.shape[1] != model.shift.shape[0]:
        raise ValueError(f"model expects {model.shift.shape[0]} features, cohort has {X.shape[1]}")
    V = model.embed(X)
    rows = []
    for name, head in sorted(model.heads.items()):
        sel = [i for i, s in enumerate(samples) if name in s.labels]
        if not sel:
            continue
        pred = head(V[sel])[:, 0]
        rows.extend((samples[i].sample_id, name, float(p)) for i, p in zip(sel, pred))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
