"""Compiled inner loop of :func:`cablelift.physics.step`.

Plain numpy spends most of its time dispatching tiny ``(E, 3)`` operations in
the Gauss-Seidel sweep, so the per-environment substep loop is written as
scalar code and compiled with numba.  Vectors travel as float tuples.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


@njit(cache=True, inline="always")
def _rot(qw, qx, qy, qz, vx, vy, vz):
    tx, ty, tz = _cross(qx, qy, qz, vx, vy, vz)
    tx, ty, tz = 2.0 * tx, 2.0 * ty, 2.0 * tz
    cx, cy, cz = _cross(qx, qy, qz, tx, ty, tz)
    return vx + qw * tx + cx, vy + qw * ty + cy, vz + qw * tz + cz


@njit(cache=True, inline="always")
def _rot_inv(qw, qx, qy, qz, vx, vy, vz):
    return _rot(qw, -qx, -qy, -qz, vx, vy, vz)


@njit(cache=True)
def _increment_quat(quat, e, b, dx, dy, dz):
    """quat[e, b] <- normalize(q + 0.5 * [0, d] ⊗ q)."""
    qw, qx, qy, qz = quat[e, b, 0], quat[e, b, 1], quat[e, b, 2], quat[e, b, 3]
    nw = qw + 0.5 * (-dx * qx - dy * qy - dz * qz)
    nx = qx + 0.5 * (dx * qw + dy * qz - dz * qy)
    ny = qy + 0.5 * (-dx * qz + dy * qw + dz * qx)
    nz = qz + 0.5 * (dx * qy - dy * qx + dz * qw)
    s = 1.0 / math.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
    quat[e, b, 0] = nw * s
    quat[e, b, 1] = nx * s
    quat[e, b, 2] = ny * s
    quat[e, b, 3] = nz * s


@njit(cache=True)
def _apply_inv_inertia(quat, inv_inertia, e, b, vx, vy, vz):
    qw, qx, qy, qz = quat[e, b, 0], quat[e, b, 1], quat[e, b, 2], quat[e, b, 3]
    bx, by, bz = _rot_inv(qw, qx, qy, qz, vx, vy, vz)
    return _rot(qw, qx, qy, qz, inv_inertia[e, b, 0] * bx, inv_inertia[e, b, 1] * by, inv_inertia[e, b, 2] * bz)


@njit(cache=True)
def _anchor(pos, quat, rotational, e, b, lx, ly, lz):
    """World attachment point and its lever arm."""
    if rotational[b] and (lx != 0.0 or ly != 0.0 or lz != 0.0):
        rx, ry, rz = _rot(quat[e, b, 0], quat[e, b, 1], quat[e, b, 2], quat[e, b, 3], lx, ly, lz)
        return pos[e, b, 0] + rx, pos[e, b, 1] + ry, pos[e, b, 2] + rz, rx, ry, rz, True
    return pos[e, b, 0], pos[e, b, 1], pos[e, b, 2], 0.0, 0.0, 0.0, False


@njit(cache=True)
def _w_eff(quat, inv_mass, inv_inertia, e, b, has_arm, rx, ry, rz, nx, ny, nz):
    w = inv_mass[e, b]
    if has_arm:
        cx, cy, cz = _cross(rx, ry, rz, nx, ny, nz)
        ux, uy, uz = _rot_inv(quat[e, b, 0], quat[e, b, 1], quat[e, b, 2], quat[e, b, 3], cx, cy, cz)
        w += inv_inertia[e, b, 0] * ux * ux + inv_inertia[e, b, 1] * uy * uy + inv_inertia[e, b, 2] * uz * uz
    return w


@njit(cache=True)
def advance(
    pos, vel, quat, omega, inv_mass, inv_inertia, rotational, mav_bodies,
    rotor_speeds, cmds, failed, k_f, allocation, rotor_decay, drag, gravity,
    con_a, con_la, con_b, con_lb, con_len, iterations, dt, substeps,
    tension, specific_force, external_force,
):
    E, B = pos.shape[0], pos.shape[1]
    M = mav_bodies.shape[0]
    C = con_len.shape[0]
    p_prev = np.empty((B, 3))
    q_prev = np.empty((B, 4))
    v_start = np.empty((M, 3))
    force = np.zeros((B, 3))
    torque = np.zeros((B, 3))
    T = np.empty(4)
    gx, gy, gz = gravity[0], gravity[1], gravity[2]
    for e in range(E):
        for j in range(M):
            for k in range(3):
                v_start[j, k] = vel[e, mav_bodies[j], k]
        for k in range(C):
            tension[e, k] = 0.0
        for s in range(substeps):
            for b in range(B):
                for k in range(3):
                    force[b, k] = external_force[e, b, k]
                    torque[b, k] = 0.0
            for j in range(M):
                T0 = 0.0
                for r in range(4):
                    if failed[e, j]:
                        rotor_speeds[e, j, r] = 0.0
                    else:
                        c = cmds[e, j, r]
                        rotor_speeds[e, j, r] = c + (rotor_speeds[e, j, r] - c) * rotor_decay
                    T[r] = k_f * rotor_speeds[e, j, r] * rotor_speeds[e, j, r]
                    T0 += T[r]
                b = mav_bodies[j]
                zx, zy, zz = _rot(quat[e, b, 0], quat[e, b, 1], quat[e, b, 2], quat[e, b, 3], 0.0, 0.0, 1.0)
                force[b, 0] += T0 * zx
                force[b, 1] += T0 * zy
                force[b, 2] += T0 * zz
                for k in range(3):
                    acc = 0.0
                    for r in range(4):
                        acc += allocation[k + 1, r] * T[r]
                    torque[b, k] = acc

            for b in range(B):
                im = inv_mass[e, b]
                if im > 0.0:
                    vel[e, b, 0] += dt * (im * (force[b, 0] - drag * vel[e, b, 0]) + gx)
                    vel[e, b, 1] += dt * (im * (force[b, 1] - drag * vel[e, b, 1]) + gy)
                    vel[e, b, 2] += dt * (im * (force[b, 2] - drag * vel[e, b, 2]) + gz)
                # bodies pinned in this env carry zero inverse inertia
                if rotational[b] and inv_inertia[e, b, 0] > 0.0:
                    qw, qx, qy, qz = quat[e, b, 0], quat[e, b, 1], quat[e, b, 2], quat[e, b, 3]
                    wx, wy, wz = _rot_inv(qw, qx, qy, qz, omega[e, b, 0], omega[e, b, 1], omega[e, b, 2])
                    ix, iy, iz = inv_inertia[e, b, 0], inv_inertia[e, b, 1], inv_inertia[e, b, 2]
                    hx, hy, hz = wx / ix, wy / iy, wz / iz
                    gyx, gyy, gyz = _cross(wx, wy, wz, hx, hy, hz)
                    wx += dt * ix * (torque[b, 0] - gyx)
                    wy += dt * iy * (torque[b, 1] - gyy)
                    wz += dt * iz * (torque[b, 2] - gyz)
                    ox, oy, oz = _rot(qw, qx, qy, qz, wx, wy, wz)
                    omega[e, b, 0], omega[e, b, 1], omega[e, b, 2] = ox, oy, oz
                for k in range(3):
                    p_prev[b, k] = pos[e, b, k]
                    pos[e, b, k] += dt * vel[e, b, k]
                for k in range(4):
                    q_prev[b, k] = quat[e, b, k]
                if rotational[b]:
                    _increment_quat(quat, e, b, dt * omega[e, b, 0], dt * omega[e, b, 1], dt * omega[e, b, 2])

            for it in range(iterations):
                for c in range(C):
                    a, b = con_a[c], con_b[c]
                    pax, pay, paz, rax, ray, raz, arm_a = _anchor(
                        pos, quat, rotational, e, a, con_la[c, 0], con_la[c, 1], con_la[c, 2]
                    )
                    pbx, pby, pbz, rbx, rby, rbz, arm_b = _anchor(
                        pos, quat, rotational, e, b, con_lb[c, 0], con_lb[c, 1], con_lb[c, 2]
                    )
                    dx, dy, dz = pbx - pax, pby - pay, pbz - paz
                    dist = math.sqrt(dx * dx + dy * dy + dz * dz)
                    if dist < 1e-12:
                        continue
                    nx, ny, nz = dx / dist, dy / dist, dz / dist
                    wsum = _w_eff(quat, inv_mass, inv_inertia, e, a, arm_a, rax, ray, raz, nx, ny, nz)
                    wsum += _w_eff(quat, inv_mass, inv_inertia, e, b, arm_b, rbx, rby, rbz, nx, ny, nz)
                    if wsum <= 0.0:
                        continue
                    dl = -(dist - con_len[c]) / wsum
                    tension[e, c] -= dl / (dt * dt)
                    Px, Py, Pz = dl * nx, dl * ny, dl * nz
                    ima, imb = inv_mass[e, a], inv_mass[e, b]
                    pos[e, a, 0] -= ima * Px
                    pos[e, a, 1] -= ima * Py
                    pos[e, a, 2] -= ima * Pz
                    pos[e, b, 0] += imb * Px
                    pos[e, b, 1] += imb * Py
                    pos[e, b, 2] += imb * Pz
                    if arm_a:
                        cx, cy, cz = _cross(rax, ray, raz, -Px, -Py, -Pz)
                        tx, ty, tz = _apply_inv_inertia(quat, inv_inertia, e, a, cx, cy, cz)
                        _increment_quat(quat, e, a, tx, ty, tz)
                    if arm_b:
                        cx, cy, cz = _cross(rbx, rby, rbz, Px, Py, Pz)
                        tx, ty, tz = _apply_inv_inertia(quat, inv_inertia, e, b, cx, cy, cz)
                        _increment_quat(quat, e, b, tx, ty, tz)

            for b in range(B):
                if inv_mass[e, b] > 0.0:
                    for k in range(3):
                        vel[e, b, k] = (pos[e, b, k] - p_prev[b, k]) / dt
                if rotational[b]:
                    # omega from q ⊗ conj(q_prev), canonical sign
                    aw, ax, ay, az = quat[e, b, 0], quat[e, b, 1], quat[e, b, 2], quat[e, b, 3]
                    bw, bx, by, bz = q_prev[b, 0], -q_prev[b, 1], -q_prev[b, 2], -q_prev[b, 3]
                    dw = aw * bw - ax * bx - ay * by - az * bz
                    dx = aw * bx + ax * bw + ay * bz - az * by
                    dy = aw * by - ax * bz + ay * bw + az * bx
                    dz = aw * bz + ax * by - ay * bx + az * bw
                    sgn = -1.0 if dw < 0.0 else 1.0
                    omega[e, b, 0] = sgn * 2.0 * dx / dt
                    omega[e, b, 1] = sgn * 2.0 * dy / dt
                    omega[e, b, 2] = sgn * 2.0 * dz / dt

            for c in range(C):
                a, b = con_a[c], con_b[c]
                pax, pay, paz, rax, ray, raz, arm_a = _anchor(
                    pos, quat, rotational, e, a, con_la[c, 0], con_la[c, 1], con_la[c, 2]
                )
                pbx, pby, pbz, rbx, rby, rbz, arm_b = _anchor(
                    pos, quat, rotational, e, b, con_lb[c, 0], con_lb[c, 1], con_lb[c, 2]
                )
                dx, dy, dz = pbx - pax, pby - pay, pbz - paz
                dist = math.sqrt(dx * dx + dy * dy + dz * dz)
                if dist < 1e-12:
                    continue
                nx, ny, nz = dx / dist, dy / dist, dz / dist
                vax, vay, vaz = vel[e, a, 0], vel[e, a, 1], vel[e, a, 2]
                if arm_a:
                    cx, cy, cz = _cross(omega[e, a, 0], omega[e, a, 1], omega[e, a, 2], rax, ray, raz)
                    vax, vay, vaz = vax + cx, vay + cy, vaz + cz
                vbx, vby, vbz = vel[e, b, 0], vel[e, b, 1], vel[e, b, 2]
                if arm_b:
                    cx, cy, cz = _cross(omega[e, b, 0], omega[e, b, 1], omega[e, b, 2], rbx, rby, rbz)
                    vbx, vby, vbz = vbx + cx, vby + cy, vbz + cz
                vn = nx * (vbx - vax) + ny * (vby - vay) + nz * (vbz - vaz)
                wsum = _w_eff(quat, inv_mass, inv_inertia, e, a, arm_a, rax, ray, raz, nx, ny, nz)
                wsum += _w_eff(quat, inv_mass, inv_inertia, e, b, arm_b, rbx, rby, rbz, nx, ny, nz)
                if wsum <= 0.0:
                    continue
                jn = -vn / wsum
                Jx, Jy, Jz = jn * nx, jn * ny, jn * nz
                ima, imb = inv_mass[e, a], inv_mass[e, b]
                vel[e, a, 0] -= ima * Jx
                vel[e, a, 1] -= ima * Jy
                vel[e, a, 2] -= ima * Jz
                vel[e, b, 0] += imb * Jx
                vel[e, b, 1] += imb * Jy
                vel[e, b, 2] += imb * Jz
                if arm_a:
                    cx, cy, cz = _cross(rax, ray, raz, -Jx, -Jy, -Jz)
                    tx, ty, tz = _apply_inv_inertia(quat, inv_inertia, e, a, cx, cy, cz)
                    omega[e, a, 0] += tx
                    omega[e, a, 1] += ty
                    omega[e, a, 2] += tz
                if arm_b:
                    cx, cy, cz = _cross(rbx, rby, rbz, Jx, Jy, Jz)
                    tx, ty, tz = _apply_inv_inertia(quat, inv_inertia, e, b, cx, cy, cz)
                    omega[e, b, 0] += tx
                    omega[e, b, 1] += ty
                    omega[e, b, 2] += tz

        for c in range(C):
            tension[e, c] /= substeps
        for j in range(M):
            b = mav_bodies[j]
            for k in range(3):
                specific_force[e, j, k] = (vel[e, b, k] - v_start[j, k]) / (dt * substeps) - gravity[k]
