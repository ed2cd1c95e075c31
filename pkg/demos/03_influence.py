# The influence matrix of one update window, built from hand-made gradients.
#
# Layout: two shared coordinates, then one private coordinate per problem
# type. Same-type tasks compare full vectors, cross-type tasks compare only
# the shared part.

import numpy as np

from mtlbandit.decomp import SegmentLayout
from mtlbandit.influence import AvgInfluence, GradientLedger, build_matrix, reward
from mtlbandit.tasks import TaskRegistry

reg = TaskRegistry({"tsp": [5, 8], "kp": [10]})
layout = SegmentLayout({"shared": 2, "tsp": 1, "kp": 1})
ledger = GradientLedger(reg, layout)

# tsp-5 twice, kp-10 once; tsp-8 sits this window out
ledger.record(1, "tsp-5", [1.0, 0.0, 2.0, 0.0])
ledger.record(2, "kp-10", [1.0, 1.0, 0.0, 3.0])
ledger.record(3, "tsp-5", [1.0, 0.5, 1.0, 0.0])

M = build_matrix(ledger)
print("window", M.t1, "to", M.t2)
print("rows are targets, columns are sources:", M.names)
print(M.values.round(3))
r = reward(M)
print("column sums", r.raw.round(3), "-> bandit rewards", r.normalized.round(3))

# The next window: tsp-8 now has no cache, tsp-5 keeps its stale average.
ledger.clear()
ledger.record(4, "tsp-8", [-1.0, 0.0, -2.0, 0.0])
M2 = build_matrix(ledger)
print(M2.values.round(3))

W = AvgInfluence.zeros(len(reg)).update(M).update(M2)
print("running mean W")
print(W.W.round(3))
