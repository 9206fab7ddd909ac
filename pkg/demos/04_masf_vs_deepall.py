"""One leave-one-domain-out fold, MASF against the pooled baseline.

Uses a short budget so it finishes in well under a minute; the full
benchmark is `masf eval`.
"""

import time

from masf.data import SyntheticSpec, generate_synthetic
from masf.harness import aggregate, leave_one_out
from masf.network import ModelConfig
from masf.trainer import TrainConfig

spec = SyntheticSpec(samples_per_class=100)
data = generate_synthetic(spec)
cfg = TrainConfig(max_iters=300)
mcfg = ModelConfig(input_dim=spec.input_dim, num_classes=spec.num_classes)

t0 = time.perf_counter()
ours = leave_one_out(data, "masf", cfg, mcfg, seeds=[1], targets=[3])
base = leave_one_out(data, "deepall", cfg, mcfg, seeds=[1], targets=[3])
print(aggregate(ours, base).to_text())
print(f"{time.perf_counter() - t0:.0f} s")
