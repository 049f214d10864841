"""Agreement metrics and the error-correlation identity on simulated scores.

Two readers score the same visits; ICC, RMSE and a clustered bootstrap CI are
reported. Then errors with a designed within-patient correlation c show
MSE(delta) = 2 sigma^2 (1 - c): correlated errors cancel in differences.
"""
import numpy as np

from chronocon.metrics import bootstrap_ci, error_correlation, icc, icc31, paired_mse_ttest, rmse

rng = np.random.default_rng(1)
truth = rng.uniform(0, 40, 60)
patients = np.repeat(np.arange(20), 3)
reader = truth + rng.normal(0, 3, 60)

res = icc(truth, reader)
print(f"ICC(3,1) {res.icc31:.3f}  ICC(2,1) {res.icc21:.3f}  RMSE {rmse(truth, reader):.2f}")
ci = bootstrap_ci((truth, reader), icc31, B=1000, seed=0, clusters=patients)
print(f"95% CI for ICC(3,1), resampling patients: [{ci.low:.3f}, {ci.high:.3f}]")

other = truth + rng.normal(0, 4, 60)
tt = paired_mse_ttest((reader - truth) ** 2, (other - truth) ** 2)
print(f"paired t-test on squared errors: t = {tt.t:.2f}, p = {tt.p:.3f}")

print("\ndesigned c   estimated c   MSE(delta)   2(1-c)")
for c in (0.0, 0.5, 0.9):
    shared = rng.standard_normal(1000) * np.sqrt(c)
    errors = (shared[:, None] + rng.standard_normal((1000, 4)) * np.sqrt(1 - c)).ravel()
    ec = error_correlation(np.repeat(np.arange(1000), 4), errors)
    print(f"{c:10.1f}   {ec.c:11.3f}   {ec.mse_delta_empirical:10.3f}   {2 * (1 - c):6.3f}")
