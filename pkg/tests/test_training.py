import warnings
from dataclasses import replace

import numpy as np
import pytest

from chronocon.data import Cohort, Sample, subsample_labeled_patients
from chronocon.synthetic import CohortConfig, generate
from chronocon.training import (CHRONO, DAE_ONLY, ORDINAL_Y, RNC_LABEL, RNC_TIME, SIMCLR, Model, TrainConfig,
                                TrainingDivergedError, _batch_arrays, augment_two_views, build_batches,
                                finetune, init_model, predict_scores, pretrain, scratch, stage1_objective)
from oracles import central_diff, rel_err

FAST = TrainConfig.desk(pretrain_epochs=2, finetune_epochs=3, hidden=(8,), embed_dim=4, head_hidden=4,
                        simclr_projector_dim=6)


@pytest.fixture(scope="module")
def cohort():
    return generate(CohortConfig(n_patients=15, feature_dim=6, severity_dims=3, rois_per_patient=2, seed=1))[0]


def encoder_gradient_error(model, cohort, variant, use_dae, config, seed):
    train = [s for s in cohort.samples if cohort.split_of(s) == "train"]
    b = _batch_arrays(model, train, np.arange(min(12, len(train))), variant in (RNC_LABEL, ORDINAL_Y))
    f = lambda: stage1_objective(model, b, variant, use_dae, config, np.random.default_rng(seed))  # noqa: E731
    _, _, g = f()
    errs = []
    for name, grad in g.items():
        mod = getattr(model, name)
        p0 = mod.params.copy()

        def value(p):
            mod.params[...] = p
            return f()[0]

        fd = central_diff(value, p0)
        mod.params[...] = p0
        errs.append(rel_err(grad, fd))
    return max(errs)


@pytest.mark.parametrize("variant,use_dae", [(CHRONO, True), (CHRONO, False), (RNC_TIME, False),
                                             (RNC_LABEL, False), (ORDINAL_Y, True), (SIMCLR, False),
                                             (DAE_ONLY, True)])
def test_encoder_composed_gradients(cohort, variant, use_dae):
    cfg = replace(FAST, activation="tanh", dae_weight=3.0)
    model = init_model(cohort, cfg)
    assert encoder_gradient_error(model, cohort, variant, use_dae, cfg, seed=0) < 1e-4


def test_pretrain_is_deterministic(cohort, tmp_path):
    a = pretrain(cohort, CHRONO, True, FAST)
    b = pretrain(cohort, CHRONO, True, FAST)
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    c = pretrain(cohort, CHRONO, True, replace(FAST, seed=5))
    assert not np.array_equal(a.encoder.params, c.encoder.params)


def test_zero_epochs_returns_initialisation(cohort):
    cfg = replace(FAST, pretrain_epochs=0)
    assert np.array_equal(pretrain(cohort, CHRONO, True, cfg).encoder.params, init_model(cohort, cfg).encoder.params)


def test_pretrain_records_history_and_lowers_loss(cohort):
    m = pretrain(cohort, CHRONO, False, replace(FAST, pretrain_epochs=15))
    losses = [h["train_loss"] for h in m.history]
    assert len(losses) == 15 and all(h["stage"] == 1 for h in m.history)
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_model_roundtrip(cohort, tmp_path):
    m = finetune(pretrain(cohort, SIMCLR, True, FAST), cohort, FAST)
    m.save(tmp_path / "m.json")
    back = Model.load(tmp_path / "m.json")
    X = cohort.features()
    assert np.array_equal(back.embed(X), m.embed(X))
    assert predict_scores(back, cohort) == predict_scores(m, cohort)
    back.save(tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


def test_frozen_encoder(cohort):
    pre = pretrain(cohort, CHRONO, True, FAST)
    ft = finetune(pre, cohort, FAST, encoder_lr_factor=0.0)
    assert np.array_equal(ft.encoder.params, pre.encoder.params)
    assert ft.heads


def test_overfits_single_sample():
    rng = np.random.default_rng(0)
    s = Sample(0, "p/a", 0.0, rng.random(4), {"a": 3})
    other = Sample(1, "p/a", 1.0, rng.random(4), {"a": None})
    c = Cohort((s, other), (("a", 4),))
    cfg = replace(FAST, finetune_epochs=1000, lr_reference_batch=FAST.batch_size, encoder_lr=0.01, head_lr=0.01)
    m = finetune(init_model(c, cfg), c, cfg, encoder_lr_factor=1.0)
    assert abs(predict_scores(m, c)[0][2] - 3.0) < 1e-2


def test_early_stopping_restores_best_epoch(cohort):
    cfg = replace(FAST, finetune_epochs=60, early_stop_patience=3, encoder_lr=0.5, head_lr=0.5)
    m = scratch(cohort, cfg)
    vals = [h["val_mae"] for h in m.history]
    best = int(np.argmin(vals))
    assert m.meta["best_epoch"] == best and m.meta["best_val_mae"] == vals[best]
    assert len(vals) <= best + cfg.early_stop_patience + 1


def test_unlabeled_training_samples_do_not_influence_finetuning(cohort):
    masked = subsample_labeled_patients(cohort, 3, seed=0)
    dropped = replace(masked, samples=tuple(s for s in masked.samples
                                            if any(v is not None for v in s.labels.values())))
    pre = pretrain(cohort, CHRONO, True, FAST)
    a, b = finetune(pre, masked, FAST), finetune(pre, dropped, FAST)
    assert np.array_equal(a.encoder.params, b.encoder.params)
    for k in a.heads:
        assert np.array_equal(a.heads[k].params, b.heads[k].params)


def test_label_pretraining_needs_labels(cohort):
    masked = subsample_labeled_patients(cohort, 1, seed=0)
    with pytest.raises(ValueError, match="needs labels"):
        pretrain(masked, RNC_LABEL, False, FAST)
    with pytest.raises(ValueError):
        pretrain(cohort, "nope", False, FAST)


def test_divergence_is_reported(cohort):
    cfg = replace(FAST, encoder_lr=1e200, lr_reference_batch=FAST.batch_size, dae_weight=1e200)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(TrainingDivergedError) as info:
            pretrain(cohort, CHRONO, True, replace(cfg, pretrain_epochs=5))
    assert "epoch" in info.value.snapshot


def test_batches_unlabeled_cover_each_group_once(cohort):
    samples = list(cohort.samples)
    batches = build_batches(samples, 8, False, seed=0, epoch=0)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(len(samples)))
    for b in batches:
        groups = [samples[i].group_id for i in b]
        # contiguous group blocks: each group forms one run
        runs = [g for i, g in enumerate(groups) if i == 0 or groups[i - 1] != g]
        assert len(runs) == len(set(runs))
    assert [b.tolist() for b in batches] == [b.tolist() for b in build_batches(samples, 8, False, 0, 0)]
    assert len(build_batches(samples, 10 ** 6)) == 1


def test_batches_oversample_by_median_label():
    rng = np.random.default_rng(0)
    samples = []
    for g, y in (("lo", 0), ("hi", 3)):
        for t in range(2):
            samples.append(Sample(len(samples), f"{g}/a", float(t), rng.random(2), {"a": y}))
    for i in range(20):
        samples.append(Sample(len(samples), f"x{i}/a", 0.0, rng.random(2), {"a": 0}))
    counts = {"lo/a": 0, "hi/a": 0}
    for epoch in range(400):
        for b in build_batches(samples, 4, True, seed=1, epoch=epoch):
            for g in {samples[i].group_id for i in b}:
                if g in counts:
                    counts[g] += 1
    assert 3.0 < counts["hi/a"] / counts["lo/a"] < 5.0  # weights 4 vs 1


def test_oversize_group_warns():
    samples = [Sample(i, "g/a", float(i), np.zeros(2)) for i in range(5)] + [Sample(5, "h/a", 0.0, np.zeros(2))]
    with pytest.warns(UserWarning, match="splitting"):
        batches = build_batches(samples, 2)
    assert sorted(np.concatenate(batches).tolist()) == list(range(6))


def test_two_views_keep_metadata():
    s = Sample(3, "p/a", 2.5, np.linspace(0, 1, 5), {"a": 2})
    v0, v1 = augment_two_views(s, 0.1, seed=7)
    assert (v0.view_id, v1.view_id) == (0, 1)
    assert all(v.group_id == s.group_id and v.timestamp == s.timestamp and v.labels == s.labels for v in (v0, v1))
    assert not np.array_equal(v0.features, v1.features)
    again = augment_two_views(s, 0.1, seed=7)
    assert np.array_equal(again[1].features, v1.features)
    with pytest.raises(ValueError):
        augment_two_views(v1, 0.1, 0)


def test_lr_scaling_and_config():
    assert TrainConfig().lr_scale == 64 / 512
    assert TrainConfig.from_dict({"batch_size": 128}).batch_size == 128
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        TrainConfig(encoder_lr=0)


def _rank_corr(cohort, variant, use_dae, cfg):
    from chronocon.analysis import within_group_rank_correlation
    return within_group_rank_correlation(pretrain(cohort, variant, use_dae, cfg), cohort, None)


def test_chrono_orders_visits_better_than_dae_on_noiseless_cohort():
    cohort = generate(CohortConfig(n_patients=60, reader_noise_prob=0.0, noise_sigma=0.0))[0]
    cfg = TrainConfig.desk()
    chrono, dae = _rank_corr(cohort, CHRONO, False, cfg), _rank_corr(cohort, DAE_ONLY, True, cfg)
    assert chrono < 0 and chrono < dae


def test_noiseless_cohort_rank_statistic_ignores_the_encoder():
    # severity is flat between jumps, so repeated visits coincide in feature space and
    # distance from the first visit is already monotone before any training
    from chronocon.analysis import within_group_rank_correlation
    cohort = generate(CohortConfig(n_patients=60, reader_noise_prob=0.0, noise_sigma=0.0))[0]
    values = {within_group_rank_correlation(init_model(cohort, TrainConfig.desk(seed=s)), cohort, None)
              for s in range(3)}
    assert len(values) == 1 and values.pop() < 0


def test_chrono_orders_visits_better_than_dae_with_visit_nuisance():
    cohort = generate(CohortConfig(n_patients=100, reader_noise_prob=0.0, noise_sigma=0.0,
                                   visit_nuisance_sigma=1.0))[0]
    cfg = TrainConfig.desk()
    chrono, dae = _rank_corr(cohort, CHRONO, False, cfg), _rank_corr(cohort, DAE_ONLY, True, cfg)
    assert chrono < -0.3 and chrono < dae - 0.2
