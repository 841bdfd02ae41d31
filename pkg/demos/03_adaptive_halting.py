"""Does the end-of-sequence head learn to ask for more queries on busy pages?

    python demos/03_adaptive_halting.py [steps]

Half the pages carry exactly 2 elements and half exactly 8.  The decoder
starts from 4 queries and may add groups of 4 after each layer, up to 16.
"""

import sys

import numpy as np

from hybridla import experiments
from hybridla.model import ModelConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
split = experiments.two_population_fixture()
run = experiments.run(split, ModelConfig(n_init=4), steps=steps)
print(f"train mAP {run.map:.3f} after {run.report.steps} steps")

sizes = np.array([len(gt) for _, gt in split.pages])
counts = experiments.query_counts(run.outputs)
for n in (2, 8):
    print(f"pages with {n} elements: queries {counts[sizes == n].tolist()}  mean {counts[sizes == n].mean():.2f}")

# The halting probabilities behind those counts, step by step, for one page of each kind.
for page in (0, len(split) - 1):
    out = run.outputs[page]
    probs = [round(float(p.item()), 3) for p in out.eos_probs]
    print(f"page {page} ({sizes[page]} elements): counts before each step {out.counts_before_step}, "
          f"eos probabilities {probs}")
