"""Overfit the desk-scale detector on 16 synthetic pages and look inside it.

    python demos/02_overfit_and_refine.py [steps]

With the default 300 steps this takes about a minute; 2000 steps reproduces
the acceptance run.
"""

import sys

import numpy as np

from hybridla import experiments
from hybridla.model import ModelConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
split = experiments.overfit_fixture()
print(f"{len(split)} pages, element counts {[len(gt) for _, gt in split.pages]}")


def progress(step, comps):
    if step % 100 == 0:
        print(f"step {step:5d}  loss {comps['total']:.3f}  lr {comps['lr']:.0e}")


run = experiments.run(split, ModelConfig(), steps=steps, on_step=progress)
print(f"train mAP {run.map:.3f} (EMA weights {run.map_ema:.3f}) in {run.seconds:.0f}s")

# Each decoder layer adds a residual to the boxes of the layer before it.  The
# matched L1 error per layer shows whether that chain actually converges.
err = experiments.layer_errors(run.outputs, split)
print("mean matched L1 per layer:", np.round(np.nanmean(err, axis=0), 4))
print("pages where the last layer is no worse than the first:",
      f"{experiments.refinement_fraction(run.outputs, split):.0%}")

# One query's trajectory: the stored residuals replay its box history exactly.
pred = run.outputs[0].predictions[0]
for t, (box, res) in enumerate(zip(pred.layer_history, pred.residuals + [None])):
    print(f"  layer {t}: box {np.round(box, 3)}" + ("" if res is None else f"  residual {np.round(res, 3)}"))

# Turning query expansion off at inference keeps exactly the initial queries.
no_aqe = experiments.page_outputs(experiments.with_config(run, aqe_enabled=False), split)
print("predictions per page with expansion off:", set(experiments.query_counts(no_aqe).tolist()))
