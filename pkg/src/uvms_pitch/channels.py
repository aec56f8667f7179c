"""Names, units and feature groups of the 40 recorded data streams."""
from __future__ import annotations

from dataclasses import dataclass

_J = range(1, 5)

CONTINUOUS = (
    ["vehicle_x", "vehicle_y", "vehicle_z"]
    + ["vehicle_vx", "vehicle_vy", "vehicle_vz"]
    + ["vehicle_roll", "vehicle_pitch", "vehicle_yaw"]
    + ["vehicle_wx", "vehicle_wy", "vehicle_wz"]
    + [f"joint{j}_position" for j in _J]
    + [f"joint{j}_velocity" for j in _J]
    + [f"joint{j}_desired_velocity" for j in _J]
)
CONSTANT = (
    [f"joint{j}_start_position" for j in _J]
    + [f"joint{j}_goal_position" for j in _J]
    + [f"joint{j}_start_velocity" for j in _J]
    + [f"joint{j}_goal_velocity" for j in _J]
)
ALL = CONTINUOUS + CONSTANT

UNITS = dict(
    [(c, "m") for c in CONTINUOUS[0:3]]
    + [(c, "m/s") for c in CONTINUOUS[3:6]]
    + [(c, "rad") for c in CONTINUOUS[6:9]]
    + [(c, "rad/s") for c in CONTINUOUS[9:12]]
    + [(c, "rad") for c in CONTINUOUS[12:16]]
    + [(c, "rad/s") for c in CONTINUOUS[16:24]]
    + [(c, "rad") for c in CONSTANT[0:8]]
    + [(c, "rad/s") for c in CONSTANT[8:16]]
)

PITCH = "vehicle_pitch"
PITCH_RATE = "vehicle_wy"
ALWAYS_KEEP = (PITCH, PITCH_RATE)


@dataclass(frozen=True)
class FeatureGroup:
    id: int
    name: str
    channels: tuple[str, ...]

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(ALL.index(c) for c in self.channels)

    @property
    def constant(self) -> bool:
        return self.id >= 8


FEATURE_GROUPS = {
    1: FeatureGroup(1, "Vehicle X, Y, Z positions", tuple(CONTINUOUS[0:3])),
    2: FeatureGroup(2, "Vehicle X, Y, Z velocities", tuple(CONTINUOUS[3:6])),
    3: FeatureGroup(3, "Vehicle roll, pitch, and yaw", tuple(CONTINUOUS[6:9])),
    4: FeatureGroup(4, "Vehicle angular velocities", tuple(CONTINUOUS[9:12])),
    5: FeatureGroup(5, "Manipulator joint positions", tuple(CONTINUOUS[12:16])),
    6: FeatureGroup(6, "Manipulator joint velocities", tuple(CONTINUOUS[16:20])),
    7: FeatureGroup(7, "Manipulator desired joint velocities", tuple(CONTINUOUS[20:24])),
    8: FeatureGroup(8, "Manip. joint position waypoints", tuple(CONSTANT[0:8])),
    9: FeatureGroup(9, "Manip. joint velocity waypoints", tuple(CONSTANT[8:16])),
}

# the five most useful groups of the backwards elimination (17 channels)
TOP_FIVE = (3, 5, 4, 2, 7)

VELOCITY_CHANNELS = tuple(CONTINUOUS[3:6] + CONTINUOUS[9:12] + CONTINUOUS[16:24])


def group_of(channel: str) -> int:
    for gid, g in FEATURE_GROUPS.items():
        if channel in g.channels:
            return gid
    raise KeyError(channel)
