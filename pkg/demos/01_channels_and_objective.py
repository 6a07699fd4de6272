"""Draw a few cell-free channel samples and score simple allocations.

Run:  python demos/01_channels_and_objective.py
"""
import numpy as np

from cfee.baselines import equal_power, random_power
from cfee.objective import sum_ee
from cfee.scenario import SystemParams, gain_statistics, generate_dataset

params = SystemParams(n_aps=15, n_ues=15)
data = generate_dataset(params, 32, seed=0)
mean, std = gain_statistics(data)
print(f"{len(data)} samples of {params.n_aps} APs x {params.n_ues} UEs")
print(f"effective gain mean {mean:.3e}  std {std:.3e}")

g = data.gains()
full = sum_ee(g, np.ones((len(g), params.n_ues, params.n_aps)), params)
eq = sum_ee(g, equal_power(g, params), params)
rnd = sum_ee(g, random_power(g, np.random.default_rng(1)), params)
print(f"mean sum EE [Mbit/J]  full power {full.mean() / 1e6:.2f}  best equal {eq.mean() / 1e6:.2f}  "
      f"uniform random {rnd.mean() / 1e6:.2f}")
