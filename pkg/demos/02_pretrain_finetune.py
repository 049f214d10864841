"""Generate a cohort, pretrain without labels, fine-tune on 5 labeled patients.

Compares the two-stage model against a network trained from scratch on the
same 5 patients. Takes about a minute on one core.
"""
from chronocon.analysis import evaluate_model
from chronocon.data import subsample_labeled_patients
from chronocon.synthetic import CohortConfig, generate
from chronocon.training import TrainConfig, finetune, pretrain, scratch

cohort, _ = generate(CohortConfig(seed=0))
print(f"{len(cohort.samples)} samples from {len(cohort.patients())} patients")

cfg = TrainConfig.desk()
encoder = pretrain(cohort, "chrono", use_dae=True, config=cfg)  # labels are never read here
few = subsample_labeled_patients(cohort, 5, seed=0)

two_stage = finetune(encoder, few, cfg)
baseline = scratch(few, cfg)

for name, model in (("chrono+dae", two_stage), ("scratch", baseline)):
    rep = evaluate_model(model, cohort, "test", B=200)
    cross, prog = rep["cross_sectional"], rep["longitudinal"]
    print(f"{name:>11}: ICC(3,1) totals {cross['icc31']['value']:.3f}  progression {prog['icc31']['value']:.3f}"
          f"  RMSE totals {cross['rmse']['value']:.2f}")
