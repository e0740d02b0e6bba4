"""Fused loops for the hot part of the energy (one pass instead of dozens of array ops).

World vertices are ``R_t (base + offsets_t) + T_t``; from them the 2D
alignment and the temporal acceleration terms are summed with their
gradients, which are then chained back to base, offsets, head pose and cameras.
"""

from __future__ import annotations

import numpy as np
import torch
from numba import njit

from .geometry import EPS_DEPTH


@njit(cache=True)
def _add(total, comp, term):
    # Neumaier step; keeps long sums accurate enough for finite differences
    s = total + term
    if abs(total) >= abs(term):
        comp += (total - s) + term
    else:
        comp += (term - s) + total
    return s, comp


@njit(cache=True)
def _world(base, offsets, head_rot, head_trans):
    f, n = offsets.shape[0], offsets.shape[1]
    world = np.empty((f, n, 3))
    for t in range(f):
        r = head_rot[t]
        for i in range(n):
            lx = base[i, 0] + offsets[t, i, 0]
            ly = base[i, 1] + offsets[t, i, 1]
            lz = base[i, 2] + offsets[t, i, 2]
            for a in range(3):
                world[t, i, a] = r[a, 0] * lx + r[a, 1] * ly + r[a, 2] * lz + head_trans[t, a]
    return world


@njit(cache=True)
def _alignment(world, cam, frame, vertex, mu, w, cam_rot, cam_trans, focal, pp, want_grad):
    n_cam = cam_rot.shape[0]
    g_world = np.zeros(world.shape if want_grad else (0, 0, 3))
    g_rot = np.zeros((n_cam, 3, 3))
    g_trans = np.zeros((n_cam, 3))
    g_focal = np.zeros(n_cam)
    g_pp = np.zeros((n_cam, 2))
    energy = 0.0
    comp = 0.0
    n_invalid = 0
    for k in range(frame.shape[0]):
        j, t, i = cam[k], frame[k], vertex[k]
        vx, vy, vz = world[t, i, 0], world[t, i, 1], world[t, i, 2]
        px = cam_rot[j, 0, 0] * vx + cam_rot[j, 0, 1] * vy + cam_rot[j, 0, 2] * vz + cam_trans[j, 0]
        py = cam_rot[j, 1, 0] * vx + cam_rot[j, 1, 1] * vy + cam_rot[j, 1, 2] * vz + cam_trans[j, 1]
        pz = cam_rot[j, 2, 0] * vx + cam_rot[j, 2, 1] * vy + cam_rot[j, 2, 2] * vz + cam_trans[j, 2]
        if not pz > EPS_DEPTH:
            n_invalid += 1
            continue
        inv = 1.0 / pz
        qx, qy = px * inv, py * inv
        rx = focal[j] * qx + pp[j, 0] - mu[k, 0]
        ry = focal[j] * qy + pp[j, 1] - mu[k, 1]
        energy, comp = _add(energy, comp, w[k] * (rx * rx + ry * ry))
        if not want_grad:
            continue
        ax, ay = 2.0 * w[k] * rx, 2.0 * w[k] * ry
        g_focal[j] += ax * qx + ay * qy
        g_pp[j, 0] += ax
        g_pp[j, 1] += ay
        dx, dy = ax * focal[j] * inv, ay * focal[j] * inv
        dz = -(dx * qx + dy * qy)
        g_trans[j, 0] += dx
        g_trans[j, 1] += dy
        g_trans[j, 2] += dz
        g_rot[j, 0, 0] += dx * vx
        g_rot[j, 0, 1] += dx * vy
        g_rot[j, 0, 2] += dx * vz
        g_rot[j, 1, 0] += dy * vx
        g_rot[j, 1, 1] += dy * vy
        g_rot[j, 1, 2] += dy * vz
        g_rot[j, 2, 0] += dz * vx
        g_rot[j, 2, 1] += dz * vy
        g_rot[j, 2, 2] += dz * vz
        g_world[t, i, 0] += cam_rot[j, 0, 0] * dx + cam_rot[j, 1, 0] * dy + cam_rot[j, 2, 0] * dz
        g_world[t, i, 1] += cam_rot[j, 0, 1] * dx + cam_rot[j, 1, 1] * dy + cam_rot[j, 2, 1] * dz
        g_world[t, i, 2] += cam_rot[j, 0, 2] * dx + cam_rot[j, 1, 2] * dy + cam_rot[j, 2, 2] * dz
    return energy + comp, n_invalid, g_world, g_rot, g_trans, g_focal, g_pp


@njit(cache=True)
def _temporal(world, lam, want_grad):
    f, n = world.shape[0], world.shape[1]
    g_world = np.zeros(world.shape if want_grad else (0, 0, 3))
    energy = 0.0
    comp = 0.0
    for t in range(1, f - 1):
        for i in range(n):
            for a in range(3):
                acc = world[t - 1, i, a] - 2.0 * world[t, i, a] + world[t + 1, i, a]
                energy, comp = _add(energy, comp, acc * acc)
                if want_grad:
                    g = 2.0 * lam * acc
                    g_world[t - 1, i, a] += g
                    g_world[t, i, a] -= 2.0 * g
                    g_world[t + 1, i, a] += g
    return lam * (energy + comp), g_world


@njit(cache=True)
def _world_backward(base, offsets, head_rot, g_world):
    f, n = offsets.shape[0], offsets.shape[1]
    g_base = np.zeros((n, 3))
    g_off = np.empty((f, n, 3))
    g_rot = np.zeros((f, 3, 3))
    g_trans = np.zeros((f, 3))
    for t in range(f):
        r = head_rot[t]
        for i in range(n):
            l0 = base[i, 0] + offsets[t, i, 0]
            l1 = base[i, 1] + offsets[t, i, 1]
            l2 = base[i, 2] + offsets[t, i, 2]
            gw0, gw1, gw2 = g_world[t, i, 0], g_world[t, i, 1], g_world[t, i, 2]
            for c in range(3):
                gl = r[0, c] * gw0 + r[1, c] * gw1 + r[2, c] * gw2
                g_off[t, i, c] = gl
                g_base[i, c] += gl
            g_rot[t, 0, 0] += gw0 * l0
            g_rot[t, 0, 1] += gw0 * l1
            g_rot[t, 0, 2] += gw0 * l2
            g_rot[t, 1, 0] += gw1 * l0
            g_rot[t, 1, 1] += gw1 * l1
            g_rot[t, 1, 2] += gw1 * l2
            g_rot[t, 2, 0] += gw2 * l0
            g_rot[t, 2, 1] += gw2 * l1
            g_rot[t, 2, 2] += gw2 * l2
            g_trans[t, 0] += gw0
            g_trans[t, 1] += gw1
            g_trans[t, 2] += gw2
    return g_base, g_off, g_rot, g_trans


class Observed:
    """Observation arrays in the layout the kernels read."""

    def __init__(self, camera, frame, vertex, mu, w):
        self.camera = np.ascontiguousarray(camera, dtype=np.int32)
        self.frame = np.ascontiguousarray(frame, dtype=np.int32)
        self.vertex = np.ascontiguousarray(vertex, dtype=np.int32)
        self.mu = np.ascontiguousarray(mu, dtype=np.float64)
        self.w = np.ascontiguousarray(w, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.frame)


def _np(x: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(x.detach().numpy())


class WorldTerms(torch.autograd.Function):
    """(alignment, temporal, n_invalid) from base (N,3), offsets (F,N,3), head and camera pose.

    Alignment sums w_k |project_j(world[t_k, i_k]) - mu_k|^2; points at depth
    <= EPS_DEPTH contribute 0 and are counted. Temporal is
    lam * sum |x_{t-1} - 2 x_t + x_{t+1}|^2. Either term is skipped (returned
    as 0) when its flag is off.
    """

    @staticmethod
    def forward(ctx, base, offsets, head_rot, head_trans, cam_rot, cam_trans, focal, pp, obs, lam_temp, do_align, do_temp):
        want = any(ctx.needs_input_grad[:8])
        b, o, hr = _np(base), _np(offsets), _np(head_rot)
        world = _world(b, o, hr, _np(head_trans))
        n_cam = cam_rot.shape[0]
        e_align, n_invalid = 0.0, 0
        g_align = (np.zeros(world.shape), np.zeros((n_cam, 3, 3)), np.zeros((n_cam, 3)), np.zeros(n_cam), np.zeros((n_cam, 2)))
        if do_align and len(obs):
            e_align, n_invalid, *g_align = _alignment(
                world, obs.camera, obs.frame, obs.vertex, obs.mu, obs.w, _np(cam_rot), _np(cam_trans), _np(focal), _np(pp), want
            )
        e_temp, g_temp = 0.0, np.zeros(world.shape)
        if do_temp and world.shape[0] >= 3:
            e_temp, g_temp = _temporal(world, float(lam_temp), want)
        ctx.saved = (b, o, hr, g_align, g_temp)
        count = torch.tensor(n_invalid)
        ctx.mark_non_differentiable(count)
        return torch.tensor(e_align, dtype=torch.float64), torch.tensor(e_temp, dtype=torch.float64), count

    @staticmethod
    def backward(ctx, g_a, g_t, _):
        b, o, hr, (gw_a, gr, gt, gf, gp), gw_t = ctx.saved
        ga, gtm = float(g_a), float(g_t)
        g_world = ga * gw_a if gw_a.size else np.zeros(o.shape)
        if gw_t.size:
            g_world = g_world + gtm * gw_t
        g_base, g_off, g_hrot, g_htrans = _world_backward(b, o, hr, np.ascontiguousarray(g_world))
        as_t = torch.from_numpy
        return (
            as_t(g_base),
            as_t(g_off),
            as_t(g_hrot),
            as_t(g_htrans),
            as_t(ga * gr),
            as_t(ga * gt),
            as_t(ga * gf),
            as_t(ga * gp),
            None,
            None,
            None,
            None,
        )
