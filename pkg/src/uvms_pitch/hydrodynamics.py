"""Water-interaction wrenches on the vehicle and on each arm link.

The vehicle gets linear plus quadratic drag, added-mass Coriolis/centripetal
terms and buoyancy. Links get the same terms except linear drag, evaluated
at each link's volumetric centre. Weight is not included here: the
dynamics applies gravity to every rigid body. Added-mass inertia (the
``M_A @ acceleration`` part) lives in the augmented body inertias, see
:attr:`VehicleArmModel.pack`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from numba import njit

from .dynamics import SystemState, body_velocities, kinematics
from .model import HydroParams, VehicleArmModel, cylinder_added_mass
from .spatial import BODY, Pose, Twist, Wrench, cross3, cross_force, mat3T_vec, mat6_vec

__all__ = [
    "PERTURBATION_GROUPS",
    "PerturbationError",
    "PerturbationSpec",
    "coriolis_added",
    "cylinder_added_mass",
    "drag_vehicle",
    "link_wrenches",
    "perturb",
    "restoring",
    "vehicle_wrench",
]

PERTURBATION_GROUPS = (
    "vehicle-linear-drag",
    "vehicle-quadratic-drag",
    "manipulator-drag",
    "vehicle-added-mass",
    "manipulator-added-mass",
)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def body_hydro_wrench(M_A, lin, quad, center, buoyancy, cob, R, v):
    """Hydrodynamic wrench on one body about its origin, body axes.

    ``v`` is the body twist at the origin; drag and added-mass Coriolis act
    at ``center``; buoyancy acts at ``cob`` along world +z.
    """
    vc = v.copy()
    vc[3:] = v[3:] + cross3(v[:3], center)
    w = np.empty(6)
    for k in range(6):
        w[k] = -(lin[k] * vc[k] + quad[k] * vc[k] * abs(vc[k]))
    w -= cross_force(vc, mat6_vec(M_A, vc))
    # shift from the hydrodynamic centre to the body origin
    w[:3] += cross3(center, w[3:])
    up = np.zeros(3)
    up[2] = buoyancy
    Fb = mat3T_vec(R, up)
    w[:3] += cross3(cob, Fb)
    w[3:] += Fb
    return w


@njit(cache=True)
def hydro_wrenches_kernel(pack, R_w, v):
    n = pack.n
    out = np.empty((n + 1, 6))
    for b in range(n + 1):
        out[b] = body_hydro_wrench(
            pack.added_mass[b],
            pack.lin_drag[b],
            pack.quad_drag[b],
            pack.hydro_center[b],
            pack.buoyancy[b],
            pack.cob[b],
            R_w[b],
            v[b],
        )
    return out


# ---------------------------------------------------------------------------
# single-term operations
# ---------------------------------------------------------------------------


def coriolis_added(M_A, v: Twist) -> Wrench:
    """``-C_A(v) v`` for added-mass matrix ``M_A``; power neutral by construction."""
    nu = v.expect(BODY).vector()
    M_A = np.asarray(M_A, dtype=float).reshape(6, 6)
    return Wrench.from_vector(-cross_force(nu, M_A @ nu))


def drag_vehicle(D_lin, D_quad, v: Twist) -> Wrench:
    nu = v.expect(BODY).vector()
    D_lin = np.asarray(D_lin, dtype=float)
    D_quad = np.asarray(D_quad, dtype=float)
    return Wrench.from_vector(-(D_lin * nu + D_quad * nu * np.abs(nu)))


def restoring(pose: Pose, weight: float, buoyancy: float, r_g, r_b) -> Wrench:
    """Body-frame wrench of weight acting at ``r_g`` and buoyancy at ``r_b``."""
    R = pose.rotation
    f_g = R.T @ np.array([0.0, 0.0, -weight])
    f_b = R.T @ np.array([0.0, 0.0, buoyancy])
    torque = np.cross(np.asarray(r_g, float), f_g) + np.cross(np.asarray(r_b, float), f_b)
    return Wrench(torque, f_g + f_b)


def _all_wrenches(model: VehicleArmModel, state: SystemState) -> np.ndarray:
    pack = model.pack
    quat = np.array(state.pose.orientation)
    theta = np.array(state.q)
    E, R_w, _ = kinematics(pack, quat, theta)
    v = body_velocities(pack, E, state.twist.expect(BODY).vector(), np.array(state.qd))
    return hydro_wrenches_kernel(pack, R_w, v)


def vehicle_wrench(model: VehicleArmModel, state: SystemState) -> Wrench:
    """Drag, added-mass Coriolis and buoyancy on the vehicle (weight excluded)."""
    return Wrench.from_vector(_all_wrenches(model, state)[0])


def link_wrenches(model: VehicleArmModel, state: SystemState) -> list[Wrench]:
    """Per-link quadratic drag, added-mass Coriolis and buoyancy (no linear drag)."""
    w = _all_wrenches(model, state)
    return [Wrench.from_vector(w[i]) for i in range(1, model.n_joints + 1)]


# ---------------------------------------------------------------------------
# parameter perturbation
# ---------------------------------------------------------------------------


class PerturbationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    group: str
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.group not in PERTURBATION_GROUPS:
            raise ValueError(f"unknown perturbation group {self.group!r}; expected one of {PERTURBATION_GROUPS}")
        # zero is accepted as the no-op level
        if not 0.0 <= self.magnitude <= 1.0:
            raise ValueError("perturbation magnitude must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def _scale_symmetric(A: np.ndarray, rng, m: float) -> np.ndarray:
    iu = np.triu_indices(6)
    factors = 1.0 + rng.uniform(-m, m, size=len(iu[0]))
    out = np.zeros((6, 6))
    out[iu] = A[iu] * factors
    return np.triu(out) + np.triu(out, 1).T


def _is_pd(A: np.ndarray, strict: bool) -> bool:
    e = np.linalg.eigvalsh(A).min()
    return e > 0 if strict else e >= -1e-12


def perturb(params: HydroParams, spec: PerturbationSpec) -> HydroParams:
    """Multiply each coefficient of one group by ``1 + u``, ``u ~ U[-m, m]``."""
    m = spec.magnitude
    if m == 0.0:
        return params
    rng = np.random.default_rng(spec.seed)
    g = spec.group
    if g == "vehicle-linear-drag":
        return replace(params, vehicle_linear_drag=params.vehicle_linear_drag * (1 + rng.uniform(-m, m, 6)))
    if g == "vehicle-quadratic-drag":
        return replace(params, vehicle_quadratic_drag=params.vehicle_quadratic_drag * (1 + rng.uniform(-m, m, 6)))
    if g == "manipulator-drag":
        D = params.link_quadratic_drag
        return replace(params, link_quadratic_drag=D * (1 + rng.uniform(-m, m, D.shape)))
    if g == "vehicle-added-mass":
        A = params.vehicle_added_mass
        strict = _is_pd(A, strict=True)
        for _ in range(100):
            B = _scale_symmetric(A, rng, m)
            if _is_pd(B, strict):
                return replace(params, vehicle_added_mass=B)
        raise PerturbationError("could not draw a positive definite vehicle added mass in 100 attempts")
    # manipulator-added-mass
    mats = np.array([_scale_symmetric(A, rng, m) for A in params.link_added_mass]).reshape(params.link_added_mass.shape)
    return replace(params, link_added_mass=mats)


def perturb_model(model: VehicleArmModel, spec: PerturbationSpec) -> VehicleArmModel:
    return model.with_hydro(perturb(model.hydro, spec))
