"""
Scoring ensemble forecasts
==========================

CRPS of an empirical ensemble, its summed-variable version and the
calibration score, on forecasts that are right, biased and overconfident.
"""

import numpy as np

from rfn.metrics import confidence_score, crps_empirical, crps_quadrature, score_all

# two equally likely outcomes, observation half way: the textbook 0.25
print("CRPS({0, 1}, 0.5) =", crps_empirical([0.0, 1.0], 0.5))

# the energy form agrees with direct integration of (F - 1{x <= y})^2
rng = np.random.default_rng(0)
s, x = rng.normal(size=20), 0.3
print(f"energy {crps_empirical(s, x):.12f}  quadrature {crps_quadrature(s, x):.12f}")

# 500 time points, 3 variables, 200 samples per forecast
T, n, D = 500, 200, 3
loc = rng.normal(size=(T, D))
obs = loc + rng.normal(size=(T, D))
forecasts = {
    "calibrated": loc[:, None, :] + rng.normal(size=(T, n, D)),
    "biased": loc[:, None, :] + 1.0 + rng.normal(size=(T, n, D)),
    "overconfident": loc[:, None, :] + 0.3 * rng.normal(size=(T, n, D)),
}
for name, samples in forecasts.items():
    scores = score_all(samples, obs)
    print(f"{name:>13}: crps {scores['crps']:.4f}  crps_sum {scores['crps_sum']:.4f}  cs {scores['cs']:.4f}")

# hiding entries removes them from every score
mask = (rng.random((T, D)) < 0.5).astype(float)
mask[mask.sum(axis=1) == 0, 0] = 1
print("calibrated, half masked: cs", round(confidence_score(forecasts["calibrated"], obs, mask), 4))
