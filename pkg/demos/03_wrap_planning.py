"""
Planning a bottom-up wrap
=========================

Plan the effector path for one truss: rise under the fruit, follow the
peduncle curve from its far end back to the stem, then turn to cut.  A fruit
sphere placed against the path forces the planner to shift waypoints (or
give up when it blocks the rise), and
the harvest state machine walks one nominal attempt.
"""

import numpy as np

from trusspick.geometry import curve_normal
from trusspick.errors import PlanInfeasible
from trusspick.harness.scene import generate_scene
from trusspick.phenotyping import FruitSphere
from trusspick.planning import (
    NOMINAL_EVENTS,
    EffectorModel,
    Event,
    HarvestMachine,
    Phase,
    check_collision,
    plan_collision_free,
    plan_wrap_trajectory,
    shift_waypoints,
)
from trusspick.pose import PedicelKeypointSet

effector = EffectorModel()
truth = generate_scene(0).trusses[0]
traj = plan_wrap_trajectory(truth.pose, truth.spheres, effector)

print(f"{len(traj)} waypoints, peduncle length {traj.curve.length * 1000:.0f} mm")
for phase in dict.fromkeys(traj.phases):
    idx = [i for i, p in enumerate(traj.phases) if p is phase]
    print(f"  {phase.value:<12} waypoints {idx[0]}..{idx[-1]}")
print(f"cut point {np.round(traj.cut_point, 3)}, SP {np.round(truth.keypoints[0], 3)}")
print(f"collision with the truss's own fruit: {check_collision(traj, truth.spheres, effector, 0.005)}")

def graze(traj, w):
    """A neighbouring fruit just inside the wall, 10 cm below waypoint w."""
    normal = curve_normal(traj.curve, traj.curve.closest_param(traj.points[w]))
    return FruitSphere(traj.points[w] + normal * (effector.inner_radius + 0.015 - 0.003) + [0, 0.1, 0], 0.015)


# on this short peduncle the wrap sits right above the rise, so the fruit is
# also in the way of the positioning path, which is never shifted
wrap = traj.indices(Phase.WRAP)
blocker = graze(traj, wrap[len(wrap) // 2])
hit = check_collision(traj, [blocker], effector, 0.005)
print(f"blocker hits {traj.phases[hit.waypoint].value} waypoint {hit.waypoint}")
try:
    plan_collision_free(truth.pose, [blocker], effector)
except PlanInfeasible as err:
    print(f"  infeasible: {err}")

# a long peduncle curving sideways leaves room to slide the planned wrap off
# a neighbour that only shows up after planning
theta = np.linspace(0, np.pi / 2, 7)
arc = np.column_stack([0.3 * np.cos(theta), np.zeros(7), 0.6 + 0.3 * np.sin(theta)])[::-1]
pose = PedicelKeypointSet.full(arc)
traj = plan_wrap_trajectory(pose, [], effector)
wrap = traj.indices(Phase.WRAP)
blocker = graze(traj, wrap[len(wrap) // 2])
hit = check_collision(traj, [blocker], effector, 0.005)
print(f"sideways peduncle: blocker hits {traj.phases[hit.waypoint].value} waypoint {hit.waypoint}, "
      f"penetration {hit.penetration * 1000:.1f} mm")
shifted = shift_waypoints(traj, traj.curve, hit, [blocker], effector, 0.005)
moved = np.linalg.norm(shifted.points - traj.points, axis=1)
print(f"  after shifting: collision {check_collision(shifted, [blocker], effector, 0.005)}, "
      f"{np.count_nonzero(moved)} waypoints moved, at most {moved.max() * 1000:.1f} mm")

machine = HarvestMachine(effector)
for kind in NOMINAL_EVENTS:
    machine.fire(kind)
machine.fire(Event("cut", sp_offset=0.002))
print(" -> ".join(str(s) for s in machine.history))
