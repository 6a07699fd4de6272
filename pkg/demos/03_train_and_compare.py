"""Short training run on the desk scenario, then compare against baselines.

Uses 3000 iterations (a few minutes) instead of the 20K in configs/desk.toml,
so expect the GNN to sit somewhat below the multistart reference.

Run:  python demos/03_train_and_compare.py
"""
import dataclasses
import logging
from pathlib import Path

from cfee.cli import compare_table, read_config
from cfee.scenario import generate_dataset
from cfee.training import train

logging.basicConfig(level=logging.INFO, format="%(message)s")

system, config = read_config(Path(__file__).resolve().parent.parent / "configs" / "desk.toml")
config = dataclasses.replace(config, total_iterations=3000, eval_every=500)
train_set = generate_dataset(system, 4096, config.seed)
test_set = generate_dataset(system, 128, config.seed + 1000)

result = train(config, train_set, progress=True)
header, rows = compare_table(result.best_policy, test_set, config.norm, restarts=4, steps=200)
print()
print(f"{header[0]:<24}" + "".join(f"{h:>12}" for h in header[1:]))
for row in rows:
    print(f"{row[0]:<24}" + "".join(f"{v:12.4g}" for v in row[1:]))
