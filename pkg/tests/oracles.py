"""Straight-line reference implementations used by the tests.

These deliberately avoid the package's own helpers: plain ``math`` on Python
floats, explicit loops, and textbook formulas written out term by term.
"""

from __future__ import annotations

import math


def quat_to_matrix(q):
    w, x, y, z = q
    return [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]


def matmul(A, B):
    return [[sum(A[i][k] * B[k][j] for k in range(3)) for j in range(3)] for i in range(3)]


def transpose(A):
    return [[A[j][i] for j in range(3)] for i in range(3)]


def rotation_angle(q_goal, q_load):
    """Angle of ``R_goal R_load^T`` from the trace (axis-angle formula).

    The trace form loses precision near 0 and pi; near those ends the
    skew-symmetric part is used instead so the oracle stays at 1e-12 accuracy.
    """
    R = matmul(quat_to_matrix(q_goal), transpose(quat_to_matrix(q_load)))
    tr = R[0][0] + R[1][1] + R[2][2]
    c = max(-1.0, min(1.0, (tr - 1.0) / 2.0))
    s = 0.5 * math.sqrt((R[2][1] - R[1][2]) ** 2 + (R[0][2] - R[2][0]) ** 2 + (R[1][0] - R[0][1]) ** 2)
    return math.atan2(s, c)


def intersect(p, t, p0, n):
    denom = sum(n[i] * t[i] for i in range(3))
    if abs(denom) < 1e-6:
        return None
    s = sum(n[i] * (p0[i] - p[i]) for i in range(3)) / denom
    return [p[i] + s * t[i] for i in range(3)]


def downwash(mav_positions, mav_quats, p_load, q_load, parallel=10.0):
    n = [row[2] for row in quat_to_matrix(q_load)]
    best = math.inf
    for p, q in zip(mav_positions, mav_quats):
        z = [row[2] for row in quat_to_matrix(q)]
        hit = intersect(p, [-z[0], -z[1], -z[2]], p_load, n)
        d = parallel if hit is None else math.dist(hit, p_load)
        best = min(best, d)
    return best


def reward_terms(lam, pos_err, ori_err, down, action, last_action, rates, thrusts, thrust_max, n):
    """One sample of the six reward terms, unscaled by the time step."""
    l1, l2, l3, l4, l5, l6, l7, l8, l9 = lam
    act_sq = sum(((a - b) / n) ** 2 for a, b in zip(action, last_action))
    br = math.sqrt(sum((w / n) ** 2 for w in rates))
    return [
        l1 * math.exp(-l2 * pos_err),
        l3 * math.exp(-l4 * ori_err),
        l5 * (1.0 - math.exp(-l6 * down)),
        l7 * math.exp(-act_sq),
        l8 * math.exp(-br),
        l9 * math.exp(-max(t / thrust_max for t in thrusts)),
    ]


def acc_controller(a_ref, f_ext, m, g=9.81):
    v = [a_ref[0] - f_ext[0] / m, a_ref[1] - f_ext[1] / m, a_ref[2] + g - f_ext[2] / m]
    norm = math.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
    return [c / norm for c in v], m * norm


def gae(rewards, values, terminated, timeout, final_values, gamma, lam):
    """Scalar GAE for one trajectory stream, written as nested sums.

    Advantage at t is the sum over k >= t of (gamma lam)^(k-t) delta_k,
    stopping after the first step that ends an episode.
    """
    T = len(rewards)
    deltas = []
    for t in range(T):
        if terminated[t]:
            nv = 0.0
        elif timeout[t]:
            nv = final_values[t]
        else:
            nv = values[t + 1]
        deltas.append(rewards[t] + gamma * nv - values[t])
    adv = []
    for t in range(T):
        total, factor = 0.0, 1.0
        for k in range(t, T):
            total += factor * deltas[k]
            if terminated[k] or timeout[k]:
                break
            factor *= gamma * lam
        adv.append(total)
    return adv, [a + v for a, v in zip(adv, values[:T])]


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-12)
