"""
Steering a follower drone
=========================

The victim follows whatever its network predicts.  The attacker hovers so
that one of its patches appears at the placement trained for some target,
and picks the pair whose induced setpoint is closest to where it wants the
victim to go.  Here the prediction is idealized (it equals the target), so
the run shows the policy and the closed loop without a trained patch.
"""
import numpy as np

from flypatch.attack import PatchSet
from flypatch.geometry import Pose
from flypatch.policy import (SimConfig, hold_position_error, run_kidnap_episode,
                             sinusoid_trajectory, static_trajectory)

# Offsets of equal length around the resting setpoint (1, 0, 0).  With uneven
# lengths the closest-setpoint rule keeps picking the shortest one and the
# victim stalls about 0.1 m short of the goal.
targets = [[1, 0.3, 0], [1, -0.3, 0], [1, 0, 0.3], [1.26, 0, -0.15], [0.74, 0, -0.15]]
rng = np.random.default_rng(0)
patches = PatchSet(rng.uniform(0, 255, (2, 64, 64)),
                   np.tile([0.3, 0.0, 0.0], (2, 5, 1)),
                   np.array([[1, 0, 1, 0, 1], [0, 1, 0, 1, 0]], dtype=bool))

# walk the victim to a fixed spot
goal = Pose((0.5, 0.3, 0.0), 0.0)
res = run_kidnap_episode(None, patches, targets, static_trajectory(goal),
                         SimConfig(duration=20), idealized=True)
print("static goal: final error %.3f m" % res.log[-1, -1])

# and along a slow sideways sinusoid
cfg = SimConfig(duration=40)
traj = sinusoid_trajectory(0.5, 20.0)
res = run_kidnap_episode(None, patches, targets, traj, cfg, idealized=True)
print("sinusoid: mean error %.3f m, holding still would give %.3f m"
      % (res.mean_error, hold_position_error(traj, cfg)))

# which (patch, target) pair the attacker showed, every 2 s
for row in res.log[::40]:
    print("t=%5.1f  victim y=%+.2f  pair (%d, %d)" % (row[0], row[2], row[9], row[10]))
