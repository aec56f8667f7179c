"""Independent reference implementations used by the tests.

Nothing here imports the package's dynamics; each oracle is derived
from first principles so agreement is evidence, not tautology.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import sympy as sp

# -- planar double pendulum -------------------------------------------------
# Two links swinging about parallel y axes under gravity along world -z.
# A rotation phi about +y carries the link x axis to (cos phi, 0, -sin phi).
# Link 2 carries a rigidly attached third body (the wrist) at offset l2.


@lru_cache(maxsize=None)
def _pendulum_lambdas():
    p1, p2, w1, w2 = sp.symbols("p1 p2 w1 w2")
    m1, m2, m3, a1, a2, a3, l1, l2, I1, I2, I3, g = sp.symbols("m1 m2 m3 a1 a2 a3 l1 l2 I1 I2 I3 g")

    def d(phi):
        return sp.Matrix([sp.cos(phi), -sp.sin(phi)])  # (x, z)

    t = sp.symbols("t")
    f1, f2 = sp.Function("f1")(t), sp.Function("f2")(t)
    c1 = a1 * d(f1)
    j3 = l1 * d(f1)
    c2 = j3 + a2 * d(f1 + f2)
    c3 = j3 + (l2 + a3) * d(f1 + f2)
    T = 0
    V = 0
    for m, c, I, om in ((m1, c1, I1, f1.diff(t)), (m2, c2, I2, (f1 + f2).diff(t)), (m3, c3, I3, (f1 + f2).diff(t))):
        v = c.diff(t)
        T += sp.Rational(1, 2) * m * (v.T * v)[0] + sp.Rational(1, 2) * I * om**2
        V += m * g * c[1]
    L = T - V
    eqs = [sp.diff(L.diff(q.diff(t)), t) - L.diff(q) for q in (f1, f2)]
    acc = sp.symbols("acc1 acc2")
    subs = {f1.diff(t, 2): acc[0], f2.diff(t, 2): acc[1]}
    subs2 = {f1.diff(t): w1, f2.diff(t): w2}
    subs3 = {f1: p1, f2: p2}
    eqs = [e.subs(subs).subs(subs2).subs(subs3) for e in eqs]
    M = sp.Matrix([[sp.expand(e).coeff(a) for a in acc] for e in eqs])
    rest = sp.Matrix([sp.expand(e).subs({acc[0]: 0, acc[1]: 0}) for e in eqs])
    args = (p1, p2, w1, w2, m1, m2, m3, a1, a2, a3, l1, l2, I1, I2, I3, g)
    return sp.lambdify(args, sp.simplify(M), "numpy"), sp.lambdify(args, sp.simplify(rest), "numpy")


def double_pendulum_accel(q, qd, params, tau=(0.0, 0.0)):
    """Joint accelerations from the Euler-Lagrange equations M qdd + h = tau."""
    Mf, hf = _pendulum_lambdas()
    args = (q[0], q[1], qd[0], qd[1], *params)
    M = np.array(Mf(*args), dtype=float)
    h = np.array(hf(*args), dtype=float).reshape(2)
    return np.linalg.solve(M, np.asarray(tau, float) - h)


# -- restoring wrench, summed in the world frame ----------------------------


def restoring_world_oracle(R, weight, buoyancy, r_g, r_b):
    """Sum forces and moments in world axes about the body origin, then rotate to body."""
    F_g = np.array([0.0, 0.0, -weight])
    F_b = np.array([0.0, 0.0, buoyancy])
    arm_g = R @ np.asarray(r_g, float)
    arm_b = R @ np.asarray(r_b, float)
    M_world = np.cross(arm_g, F_g) + np.cross(arm_b, F_b)
    F_world = F_g + F_b
    return np.concatenate([R.T @ M_world, R.T @ F_world])


# -- added-mass Coriolis via explicit matrix assembly -----------------------


def skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=float)


def coriolis_added_oracle(M_A, nu):
    """-C_A(nu) nu with the textbook 6x6 block assembly (angular-first ordering)."""
    M_A = np.asarray(M_A, float)
    w, v = nu[:3], nu[3:]
    # products for an angular-first layout: top rows are moments, bottom forces
    a_w = M_A[:3, :3] @ w + M_A[:3, 3:] @ v  # angular momentum part
    a_v = M_A[3:, :3] @ w + M_A[3:, 3:] @ v  # linear momentum part
    C = np.zeros((6, 6))
    C[:3, :3] = -skew(a_w)
    C[:3, 3:] = -skew(a_v)
    C[3:, :3] = -skew(a_v)
    return -(C @ nu)


# -- GRU, one scalar at a time ----------------------------------------------


def gru_scalar_loop(W, U, b, X, h0):
    """Cho-style GRU, gate column blocks (z, r, n), reset applied to h before U."""
    H = len(h0)
    I = W.shape[0]
    h = [float(v) for v in h0]
    out = []

    def sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    for x in X:
        z = [sig(b[j] + sum(x[i] * W[i, j] for i in range(I)) + sum(h[i] * U[i, j] for i in range(H))) for j in range(H)]
        r = [sig(b[H + j] + sum(x[i] * W[i, H + j] for i in range(I)) + sum(h[i] * U[i, H + j] for i in range(H))) for j in range(H)]
        n = [
            np.tanh(b[2 * H + j] + sum(x[i] * W[i, 2 * H + j] for i in range(I)) + sum(r[i] * h[i] * U[i, 2 * H + j] for i in range(H)))
            for j in range(H)
        ]
        h = [(1.0 - z[j]) * h[j] + z[j] * n[j] for j in range(H)]
        out.append(list(h))
    return np.array(out)
