"""Dynamic inference: query team members one at a time and stop early.

The running mean of the members' predictions gives two scores per step, a
change score U (KL between consecutive means) and a confidence C (largest
class probability, squared). The stop probability after member t is
q_t = sigmoid(a U + b C). The first member never stops on its own (q_1 = 0).
"""
import numpy as np

from eedlab.die import DieConfig, die_from_predictions, online_stop, optimal_stop, stop_likelihoods

AGREE = [[0.9, 0.1], [0.88, 0.12], [0.91, 0.09], [0.9, 0.1]]
DISAGREE = [[0.9, 0.1], [0.2, 0.8], [0.3, 0.7], [0.25, 0.75]]


def show(title, preds, cfg):
    trace = die_from_predictions(np.array(preds), cfg)
    mean = np.round(trace.predictions[trace.stop - 1], 3).tolist()
    print(f"  {title:16s} q={np.round(trace.q, 3).tolist()}  stop={trace.stop}  mean={mean}")


# With the default coefficients a large change pushes q up and high confidence
# pulls it down, so a team that flips its answer stops sooner than one that agrees.
print("a=5, b=-1 (defaults)")
show("members agree", AGREE, DieConfig())
show("members disagree", DISAGREE, DieConfig())

# Flipping both signs gives the opposite behaviour: stop when settled and sure.
print("a=-5, b=1")
show("members agree", AGREE, DieConfig(a=-5.0, b=1.0))
show("members disagree", DISAGREE, DieConfig(a=-5.0, b=1.0))

# z_t = q_t * prod(1 - q_k, k < t) is the chance of stopping exactly at t.
# Exhaustive mode takes its peak; online mode stops at the first drop and
# never looks further ahead.
q = [0.3, 0.1, 0.95]
z = stop_likelihoods(q)
print(f"\nq={q}  z={np.round(z, 4).tolist()}")
print(f"  online stop {online_stop(z)}, exhaustive stop {optimal_stop(q)}")
