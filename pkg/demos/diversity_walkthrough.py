"""How robust diversity picks a team, on a failure matrix small enough to read.

Each row is a sub-model and each column a validation sample; a 1 means the
attack fooled that model on that sample. A team is good when its members
rarely fail on the same samples.
"""
import numpy as np

from eedlab.attacks import FailureMatrix
from eedlab.ensemble import (EedLossConfig, diversity_probabilities, enumerate_teams,
                             robust_diversity, select_team)

fm = FailureMatrix(np.array([
    [1, 1, 0, 0, 0, 0, 1, 0],   # model 0
    [0, 0, 1, 1, 0, 0, 1, 0],   # model 1: fails elsewhere, shares only sample 6
    [1, 1, 0, 0, 0, 0, 1, 0],   # model 2: a copy of model 0
    [0, 0, 0, 0, 1, 1, 0, 1],   # model 3: disjoint from everyone
]))
print("failure rates:", fm.failure_rates().tolist())

for team in [(0, 2), (0, 1), (0, 3), (0, 1, 3)]:
    p1, p2 = diversity_probabilities(team, fm)
    print(f"team {team}: P(one fails)={p1}  P(two fail)={p2}  RD={robust_diversity(team, fm):.3f}")

# identical members score 0, members that never fail together score 1
teams = enumerate_teams(4)
chosen, report = select_team(teams, fm, EedLossConfig(rd_threshold=0.7))
print("\nsmallest team clearing RD >= 0.7:", chosen.members, f"rd={chosen.rd:.3f}")
print("tie-break path:", report["tie_break"])

# a parameter budget can force a particular size
chosen, _ = select_team(teams, fm, EedLossConfig(rd_threshold=0.7), min_size=3, max_size=3)
print("best team of exactly three:", chosen.members, f"rd={chosen.rd:.3f}")
