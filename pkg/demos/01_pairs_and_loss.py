"""Chronological pairs for one patient and the loss they produce.

Three visits of one region at t = 0, 1, 2 give two non-trivial terms: the
forward term (anchor 0, positive 1, negative 2) and its time-reversed twin.
Re-timing the visits without changing their order leaves the loss bit-for-bit
unchanged, while the time-distance variant (RnC:t) moves.
"""
import math

import numpy as np

from chronocon.data import Sample
from chronocon.losses import chronocon_loss, rnc_time_loss
from chronocon.pairing import chrono_pairs, rnc_time_pairs


def visits(times, dim=1):
    return [Sample(i, "patient0/roi0", float(t), np.zeros(dim), {}) for i, t in enumerate(times)]


batch = visits([0, 1, 2])
plan = chrono_pairs(batch)
print(plan.dump())

V = np.array([[0.0], [1.0], [3.0]])
out = chronocon_loss(plan, V)
print(f"\nloss on embeddings (0, 1, 3): {out.value:.15f}")
print(f"closed form ln(1+e^-2)+ln(1+e^-1): {math.log1p(math.exp(-2)) + math.log1p(math.exp(-1)):.15f}")
print("gradient per embedding:", out.grad.ravel())

# same order, very different spacing
rng = np.random.default_rng(0)
V = rng.standard_normal((4, 2))
even, warped = visits([0, 1, 2, 10], 2), visits([0, 1, 8, 1000], 2)
print("\nre-timed batch, same visit order")
print("  chrono loss:", chronocon_loss(chrono_pairs(even), V).value, chronocon_loss(chrono_pairs(warped), V).value)
print("  RnC:t loss: ", rnc_time_loss(rnc_time_pairs(even), V).value, rnc_time_loss(rnc_time_pairs(warped), V).value)
