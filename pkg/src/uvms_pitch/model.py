"""Physical description of the vehicle-manipulator system and its config file."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np
import yaml

from .spatial import (
    SpatialInertia,
    axis_angle_matrix,
    rotate_inertia,
    shift_inertia,
    spatial_inertia_matrix,
)

N_ARM_JOINTS = 4


class ConfigError(ValueError):
    """Invalid or unreadable model configuration."""


def _arr(x, shape=None) -> np.ndarray:
    a = np.array(x, dtype=float)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


def rpy_matrix(rpy) -> np.ndarray:
    r, p, y = rpy
    return (
        axis_angle_matrix(np.array([0.0, 0, 1]), y)
        @ axis_angle_matrix(np.array([0.0, 1, 0]), p)
        @ axis_angle_matrix(np.array([1.0, 0, 0]), r)
    )


def cylinder_added_mass(radius: float, length: float, density: float = 1000.0) -> np.ndarray:
    """Slender-cylinder added mass about the cylinder centre, axis along x.

    Transverse translation gets the displaced-water mass, transverse
    rotation the same mass spread along the length; axial terms vanish.
    """
    if radius < 0 or length <= 0:
        raise ValueError("cylinder radius must be >= 0 and length > 0")
    m = density * np.pi * radius**2 * length
    rot = m * length**2 / 12.0
    return np.diag([0.0, rot, rot, 0.0, m, m])


def cylinder_added_mass_in_frame(radius, length, axis, density=1000.0) -> np.ndarray:
    """:func:`cylinder_added_mass` with the cylinder axis along ``axis`` (link axes)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    ex = np.array([1.0, 0.0, 0.0])
    v = np.cross(ex, axis)
    s, c = np.linalg.norm(v), float(ex @ axis)
    if s < 1e-12:
        R = np.eye(3) if c > 0 else np.diag([-1.0, -1.0, 1.0])
    else:
        R = axis_angle_matrix(v / s, np.arctan2(s, c))
    return rotate_inertia(cylinder_added_mass(radius, length, density), R)


@dataclass(frozen=True, eq=False)
class Joint:
    """Revolute joint; ``origin`` and ``rotation`` place it in the parent body frame."""

    name: str
    origin: np.ndarray
    rotation: np.ndarray
    axis: np.ndarray
    lower: float
    upper: float
    velocity_limit: float
    acceleration_limit: float
    torque_limit: float
    torque_rate_limit: float

    def __post_init__(self):
        object.__setattr__(self, "origin", _arr(self.origin, 3))
        object.__setattr__(self, "rotation", _arr(self.rotation, (3, 3)))
        axis = np.array(self.axis, dtype=float).reshape(3)
        object.__setattr__(self, "axis", _arr(axis / np.linalg.norm(axis)))
        if not self.lower < self.upper:
            raise ConfigError(f"joint {self.name}: lower limit must be below upper limit")
        for attr in ("velocity_limit", "acceleration_limit", "torque_limit", "torque_rate_limit"):
            v = getattr(self, attr)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(f"joint {self.name}: {attr} must be finite and positive")


@dataclass(frozen=True, eq=False)
class Link:
    name: str
    joint: Joint
    inertia: SpatialInertia
    # cylinder approximation used for added mass, buoyancy point and drag point
    radius: float
    length: float
    center: np.ndarray
    cylinder_axis: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _arr(self.center, 3))
        object.__setattr__(self, "cylinder_axis", _arr(self.cylinder_axis, 3))


@dataclass(frozen=True, eq=False)
class HydroParams:
    """Water-interaction coefficients.

    Body 0 is the vehicle, bodies 1..n the arm links. Link added-mass
    matrices are about each link's volumetric centre, in link axes.
    """

    vehicle_added_mass: np.ndarray
    vehicle_linear_drag: np.ndarray
    vehicle_quadratic_drag: np.ndarray
    link_quadratic_drag: np.ndarray
    link_added_mass: np.ndarray
    link_centers: np.ndarray
    buoyancy: np.ndarray
    buoyancy_centers: np.ndarray
    fluid_density: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "vehicle_added_mass", _arr(self.vehicle_added_mass, (6, 6)))
        object.__setattr__(self, "vehicle_linear_drag", _arr(self.vehicle_linear_drag, 6))
        object.__setattr__(self, "vehicle_quadratic_drag", _arr(self.vehicle_quadratic_drag, 6))
        object.__setattr__(self, "link_quadratic_drag", _arr(self.link_quadratic_drag).reshape(-1, 6))
        n = self.link_quadratic_drag.shape[0]
        object.__setattr__(self, "link_added_mass", _arr(self.link_added_mass, (n, 6, 6)))
        object.__setattr__(self, "link_centers", _arr(self.link_centers, (n, 3)))
        object.__setattr__(self, "buoyancy", _arr(self.buoyancy, n + 1))
        object.__setattr__(self, "buoyancy_centers", _arr(self.buoyancy_centers, (n + 1, 3)))
        self.check()

    @property
    def n_links(self) -> int:
        return self.link_quadratic_drag.shape[0]

    def check(self) -> None:
        MA = self.vehicle_added_mass
        if not np.allclose(MA, MA.T, atol=1e-10):
            raise ConfigError("vehicle added mass must be symmetric")
        if np.linalg.eigvalsh(MA).min() < -1e-10:
            raise ConfigError("vehicle added mass must be positive semidefinite")
        for A in self.link_added_mass:
            if not np.allclose(A, A.T, atol=1e-10):
                raise ConfigError("link added mass must be symmetric")
        for name in ("vehicle_linear_drag", "vehicle_quadratic_drag", "link_quadratic_drag", "buoyancy"):
            if np.any(getattr(self, name) < 0):
                raise ConfigError(f"{name} must be non-negative")

    def zeroed(self) -> HydroParams:
        """All drag, added mass and buoyancy set to zero (in-vacuum behaviour)."""
        return replace(
            self,
            vehicle_added_mass=np.zeros((6, 6)),
            vehicle_linear_drag=np.zeros(6),
            vehicle_quadratic_drag=np.zeros(6),
            link_quadratic_drag=np.zeros_like(self.link_quadratic_drag),
            link_added_mass=np.zeros_like(self.link_added_mass),
            buoyancy=np.zeros_like(self.buoyancy),
        )

    def to_dict(self) -> dict:
        return {
            "vehicle_added_mass": self.vehicle_added_mass.tolist(),
            "vehicle_linear_drag": self.vehicle_linear_drag.tolist(),
            "vehicle_quadratic_drag": self.vehicle_quadratic_drag.tolist(),
            "link_quadratic_drag": self.link_quadratic_drag.tolist(),
            "link_added_mass": self.link_added_mass.tolist(),
            "link_centers": self.link_centers.tolist(),
            "buoyancy": self.buoyancy.tolist(),
            "buoyancy_centers": self.buoyancy_centers.tolist(),
            "fluid_density": float(self.fluid_density),
        }

    @classmethod
    def from_dict(cls, d: dict) -> HydroParams:
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PidGains:
    kp: np.ndarray
    ki: np.ndarray
    kd: np.ndarray
    integral_limit: np.ndarray

    def __post_init__(self):
        for name in ("kp", "ki", "kd", "integral_limit"):
            object.__setattr__(self, name, _arr(getattr(self, name)).reshape(-1))


@dataclass(frozen=True, eq=False)
class ControlParams:
    joint: PidGains
    station: PidGains
    goal_velocity_fraction: float = 0.5
    time_scale_range: tuple[float, float] = (1.0, 3.0)
    min_duration: float = 0.5
    # extra base damping used only while searching for the passive equilibrium
    equilibrium_damping: np.ndarray = field(default_factory=lambda: np.zeros(6))
    station_radius: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "equilibrium_damping", _arr(self.equilibrium_damping, 6))
        object.__setattr__(self, "time_scale_range", tuple(float(x) for x in self.time_scale_range))


class ModelPack(NamedTuple):
    """Flat array view of a model consumed by the compiled kernels."""

    n: int
    joint_origin: np.ndarray
    joint_rot: np.ndarray
    joint_axis: np.ndarray
    inertia_rb: np.ndarray
    inertia_aug: np.ndarray
    mass: np.ndarray
    com: np.ndarray
    added_mass: np.ndarray
    hydro_center: np.ndarray
    lin_drag: np.ndarray
    quad_drag: np.ndarray
    buoyancy: np.ndarray
    cob: np.ndarray
    gravity: float


@dataclass(frozen=True, eq=False)
class VehicleArmModel:
    """Floating vehicle carrying a serial arm; body 0 is the vehicle."""

    vehicle: SpatialInertia
    links: tuple[Link, ...]
    hydro: HydroParams
    home: np.ndarray
    control: ControlParams
    gravity: float = 9.81
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "home", _arr(self.home, len(self.links)))
        if self.hydro.n_links != len(self.links):
            raise ConfigError("hydrodynamic parameters do not match the number of links")

    # -- accessors ---------------------------------------------------------
    @property
    def n_joints(self) -> int:
        return len(self.links)

    @property
    def n_dof(self) -> int:
        return 6 + self.n_joints

    def joint_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(link.joint, attr) for link in self.links], dtype=float)

    @property
    def lower(self) -> np.ndarray:
        return self.joint_array("lower")

    @property
    def upper(self) -> np.ndarray:
        return self.joint_array("upper")

    @property
    def velocity_limits(self) -> np.ndarray:
        return self.joint_array("velocity_limit")

    @property
    def acceleration_limits(self) -> np.ndarray:
        return self.joint_array("acceleration_limit")

    @property
    def torque_limits(self) -> np.ndarray:
        return self.joint_array("torque_limit")

    @property
    def torque_rate_limits(self) -> np.ndarray:
        return self.joint_array("torque_rate_limit")

    @property
    def masses(self) -> np.ndarray:
        return np.array([self.vehicle.mass] + [l.inertia.mass for l in self.links])

    def validate(self) -> VehicleArmModel:
        """Check the invariants a full vehicle-arm model must satisfy."""
        if self.n_joints != N_ARM_JOINTS:
            raise ConfigError(f"the arm must have exactly {N_ARM_JOINTS} joints, got {self.n_joints}")
        base = self.vehicle.rigid_matrix() + self.hydro.vehicle_added_mass
        if np.linalg.eigvalsh(base).min() <= 0:
            raise ConfigError("vehicle rigid + added inertia must be positive definite")
        if np.any(self.home < self.lower) or np.any(self.home > self.upper):
            raise ConfigError("home configuration lies outside the joint limits")
        return self

    # -- derived views -----------------------------------------------------
    @cached_property
    def pack(self) -> ModelPack:
        n = self.n_joints
        h = self.hydro
        inertia_rb = np.zeros((n + 1, 6, 6))
        added = np.zeros((n + 1, 6, 6))
        inertia_aug = np.zeros((n + 1, 6, 6))
        com = np.zeros((n + 1, 3))
        centers = np.zeros((n + 1, 3))
        lin = np.zeros((n + 1, 6))
        quad = np.zeros((n + 1, 6))
        bodies = [self.vehicle] + [l.inertia for l in self.links]
        for i, body in enumerate(bodies):
            inertia_rb[i] = body.rigid_matrix()
            com[i] = body.com
        added[0] = h.vehicle_added_mass
        lin[0] = h.vehicle_linear_drag
        quad[0] = h.vehicle_quadratic_drag
        inertia_aug[0] = inertia_rb[0] + added[0]
        for i in range(n):
            added[i + 1] = h.link_added_mass[i]
            centers[i + 1] = h.link_centers[i]
            quad[i + 1] = h.link_quadratic_drag[i]
            inertia_aug[i + 1] = inertia_rb[i + 1] + shift_inertia(added[i + 1], centers[i + 1])
        return ModelPack(
            n=n,
            joint_origin=np.array([l.joint.origin for l in self.links]).reshape(n, 3),
            joint_rot=np.array([l.joint.rotation for l in self.links]).reshape(n, 3, 3),
            joint_axis=np.array([l.joint.axis for l in self.links]).reshape(n, 3),
            inertia_rb=inertia_rb,
            inertia_aug=inertia_aug,
            mass=self.masses,
            com=com,
            added_mass=added,
            hydro_center=centers,
            lin_drag=lin,
            quad_drag=quad,
            buoyancy=np.array(h.buoyancy, dtype=float),
            cob=np.array(h.buoyancy_centers, dtype=float),
            gravity=float(self.gravity),
        )

    # -- variants ----------------------------------------------------------
    def with_hydro(self, hydro: HydroParams) -> VehicleArmModel:
        return replace(self, hydro=hydro)

    def without_hydrodynamics(self) -> VehicleArmModel:
        return replace(self, hydro=self.hydro.zeroed())

    def in_vacuum(self) -> VehicleArmModel:
        """No water and no gravity: the momentum-conserving free-floating system."""
        return replace(self, hydro=self.hydro.zeroed(), gravity=0.0)

    def with_payload(self, mass: float, point=None) -> VehicleArmModel:
        """Merge a point mass into the last link (default: at the gripper tip)."""
        if mass == 0:
            return self
        last = self.links[-1]
        if point is None:
            point = self.provenance.get("gripper_tip", [last.length, 0.0, 0.0])
        point = np.asarray(point, dtype=float)
        body = last.inertia
        m = body.mass + mass
        c = (body.mass * body.com + mass * point) / m
        # parallel-axis combination about the new centre of mass
        def shifted(mi, ci, Ii):
            d = ci - c
            return Ii + mi * (d @ d * np.eye(3) - np.outer(d, d))

        I = shifted(body.mass, body.com, body.inertia) + shifted(mass, point, np.zeros((3, 3)))
        new_last = replace(last, inertia=SpatialInertia(m, c, I))
        return replace(self, links=self.links[:-1] + (new_last,))

    # -- identity ----------------------------------------------------------
    def to_dict(self) -> dict:
        def pid(g: PidGains):
            return {
                "kp": g.kp.tolist(),
                "ki": g.ki.tolist(),
                "kd": g.kd.tolist(),
                "integral_limit": g.integral_limit.tolist(),
            }

        c = self.control
        return {
            "gravity": float(self.gravity),
            "vehicle": {
                "mass": self.vehicle.mass,
                "center_of_mass": self.vehicle.com.tolist(),
                "inertia": self.vehicle.inertia.tolist(),
            },
            "links": [
                {
                    "name": l.name,
                    "mass": l.inertia.mass,
                    "center_of_mass": l.inertia.com.tolist(),
                    "inertia": l.inertia.inertia.tolist(),
                    "radius": l.radius,
                    "length": l.length,
                    "center": l.center.tolist(),
                    "cylinder_axis": l.cylinder_axis.tolist(),
                    "joint": {
                        "name": l.joint.name,
                        "origin": l.joint.origin.tolist(),
                        "rotation": l.joint.rotation.tolist(),
                        "axis": l.joint.axis.tolist(),
                        "limits": [l.joint.lower, l.joint.upper],
                        "velocity_limit": l.joint.velocity_limit,
                        "acceleration_limit": l.joint.acceleration_limit,
                        "torque_limit": l.joint.torque_limit,
                        "torque_rate_limit": l.joint.torque_rate_limit,
                    },
                }
                for l in self.links
            ],
            "hydro": self.hydro.to_dict(),
            "home": self.home.tolist(),
            "control": {
                "joint_pid": pid(c.joint),
                "station_pid": pid(c.station),
                "goal_velocity_fraction": c.goal_velocity_fraction,
                "time_scale_range": list(c.time_scale_range),
                "min_duration": c.min_duration,
                "equilibrium_damping": c.equilibrium_damping.tolist(),
                "station_radius": c.station_radius,
            },
        }

    @cached_property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @cached_property
    def statics_fingerprint(self) -> str:
        """Hash of everything that fixes the static equilibrium (drag and added mass excluded)."""
        d = self.to_dict()
        h = d.pop("hydro")
        d["buoyancy"] = h["buoyancy"]
        d["buoyancy_centers"] = h["buoyancy_centers"]
        d["control"].pop("station_radius")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def _value(node):
    """Config leaves may be ``{value: ..., source: ...}`` to record provenance."""
    if isinstance(node, dict) and "value" in node:
        return node["value"]
    return node


def _strip(node):
    if isinstance(node, dict):
        if "value" in node and set(node) <= {"value", "source", "note"}:
            return _strip(node["value"])
        return {k: _strip(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_strip(v) for v in node]
    return node


def _collect_provenance(node, prefix="") -> dict:
    out = {}
    if isinstance(node, dict):
        if "value" in node and "source" in node:
            out[prefix] = node["source"]
        else:
            for k, v in node.items():
                out.update(_collect_provenance(v, f"{prefix}.{k}" if prefix else k))
    elif isinstance(node, list):
        for i, v in enumerate(node):
            out.update(_collect_provenance(v, f"{prefix}[{i}]"))
    return out


def _diag6(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    return np.diag(a) if a.shape == (6,) else a.reshape(6, 6)


def model_from_dict(raw: dict) -> VehicleArmModel:
    cfg = _strip(copy.deepcopy(raw))
    try:
        rho = float(cfg.get("fluid_density", 1000.0))
        g = float(cfg.get("gravity", 9.81))
        v = cfg["vehicle"]
        vehicle = SpatialInertia(v["mass"], v.get("center_of_mass", [0, 0, 0]), v["inertia"])
        links = []
        link_quad, link_added, centers, buoy, cobs = [], [], [], [v["buoyancy"]], [v["center_of_buoyancy"]]
        for lc in cfg["links"]:
            jc = lc["joint"]
            rot = jc.get("rotation")
            rot = np.asarray(rot, dtype=float) if rot is not None else rpy_matrix(jc.get("rpy", [0, 0, 0]))
            joint = Joint(
                name=jc.get("name", lc["name"]),
                origin=jc["origin"],
                rotation=rot,
                axis=jc["axis"],
                lower=float(jc["limits"][0]),
                upper=float(jc["limits"][1]),
                velocity_limit=float(jc["velocity_limit"]),
                acceleration_limit=float(jc["acceleration_limit"]),
                torque_limit=float(jc["torque_limit"]),
                torque_rate_limit=float(jc["torque_rate_limit"]),
            )
            inertia = SpatialInertia(lc["mass"], lc["center_of_mass"], lc["inertia"])
            axis = lc.get("cylinder_axis", [1, 0, 0])
            link = Link(lc["name"], joint, inertia, float(lc["radius"]), float(lc["length"]), lc["center"], axis)
            links.append(link)
            if "added_mass" in lc:
                link_added.append(_diag6(lc["added_mass"]))
            else:
                link_added.append(cylinder_added_mass_in_frame(link.radius, link.length, axis, rho))
            link_quad.append(lc.get("quadratic_drag", [0.0] * 6))
            centers.append(lc["center"])
            if "buoyancy" in lc:
                buoy.append(float(lc["buoyancy"]))
            else:
                buoy.append(rho * g * np.pi * link.radius**2 * link.length)
            cobs.append(lc.get("center_of_buoyancy", lc["center"]))
        hydro = HydroParams(
            vehicle_added_mass=_diag6(v["added_mass"]),
            vehicle_linear_drag=v["linear_drag"],
            vehicle_quadratic_drag=v["quadratic_drag"],
            link_quadratic_drag=np.array(link_quad, dtype=float).reshape(-1, 6),
            link_added_mass=np.array(link_added).reshape(-1, 6, 6),
            link_centers=np.array(centers, dtype=float).reshape(-1, 3),
            buoyancy=buoy,
            buoyancy_centers=cobs,
            fluid_density=rho,
        )
        c = cfg["control"]

        def gains(d, n):
            def vec(x):
                return np.broadcast_to(np.asarray(x, dtype=float), (n,)).copy()

            return PidGains(vec(d["kp"]), vec(d["ki"]), vec(d.get("kd", 0.0)), vec(d["integral_limit"]))

        control = ControlParams(
            joint=gains(c["joint_pid"], len(links)),
            station=gains(c["station_pid"], 3),
            goal_velocity_fraction=float(c.get("goal_velocity_fraction", 0.5)),
            time_scale_range=tuple(c.get("time_scale_range", (1.0, 3.0))),
            min_duration=float(c.get("min_duration", 0.5)),
            equilibrium_damping=c.get("equilibrium_damping", [0.0] * 6),
            station_radius=float(c.get("station_radius", 0.05)),
        )
        provenance = _collect_provenance(raw)
        if "gripper_tip" in cfg:
            provenance["gripper_tip"] = cfg["gripper_tip"]
        model = VehicleArmModel(
            vehicle=vehicle,
            links=tuple(links),
            hydro=hydro,
            home=cfg["home"],
            control=control,
            gravity=g,
            provenance=provenance,
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"malformed model config: {exc!r}") from exc
    return model


def load_model(path=None) -> VehicleArmModel:
    """Load a model config (YAML); ``None`` loads the packaged default."""
    if path is None:
        text = resources.files("uvms_pitch").joinpath("data/default_model.yaml").read_text()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"model config not found: {path}")
        text = path.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse model config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"model config {path} is not a mapping")
    model = model_from_dict(raw)
    if "payload" in raw:
        p = _strip(raw["payload"])
        model = model.with_payload(float(p.get("mass", 0.0)), p.get("point"))
    return model.validate()


def default_model() -> VehicleArmModel:
    return load_model(None)
