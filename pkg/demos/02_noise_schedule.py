"""How noise levels are chosen during training.

    python demos/02_noise_schedule.py
"""

import numpy as np

from consistency_ae.schedule import ScheduleConfig, consistency_scalings, loss_weight, sample_noise_pair, step_size, t_to_sigma

cfg = ScheduleConfig()

# noise levels live on a rho=7 warped timeline t in [0, 1]
for t in (0.0, 0.25, 0.5, 0.75, 1.0):
    print(f"t={t:4.2f}  sigma={t_to_sigma(t, cfg):9.4f}")

# the gap between the teacher's and the student's timestep shrinks over training
K = cfg.total_iters
for k in (0, K // 4, K // 2, 3 * K // 4, K):
    print(f"iteration {k:>7}: dt = {step_size(k, cfg):.5f}")

# sigma_hi follows a lognormal (most mass below sigma=1), sigma_lo sits one dt lower
rng = np.random.default_rng(0)
early = sample_noise_pair(0, rng, cfg, 100_000)
late = sample_noise_pair(K, rng, cfg, 100_000)
print("median sigma_hi:", float(np.median(early.sigma_hi)))
print("median gap early / late:", float(np.median(early.sigma_hi - early.sigma_lo)), float(np.median(late.sigma_hi - late.sigma_lo)))
print("share of draws above sigma=10:", float(np.mean(early.sigma_hi > 10)))

# the loss weight is the inverse gap, so each pair contributes on a comparable scale
w = loss_weight(early.sigma_lo, early.sigma_hi)
print("weight * gap, min/max:", float((w * (early.sigma_hi - early.sigma_lo)).min()), float((w * (early.sigma_hi - early.sigma_lo)).max()))

# the output mixes the noisy input and the network prediction; near sigma_min the
# skip coefficient is exactly one, which makes f(x, sigma_min) = x by construction
for sigma in (cfg.sigma_min, 0.1, 0.5, 5.0, 80.0):
    c_skip, c_out, c_in = consistency_scalings(np.float64(sigma), cfg)
    print(f"sigma={sigma:7.3f}  c_skip={float(c_skip):.4f}  c_out={float(c_out):.4f}  c_in={float(c_in):.4f}")
