"""Numba kernels for the tiled forward render and the analytic backward pass.

All math is float64. The forward composites front-to-back per pixel with the
shared early-stop rule; the backward recomputes intersection geometry from
the stored per-pixel records, so the context only has to keep (gaussian,
omega, z, normal) per intersection.

Determinism: the forward parallelizes over tiles (disjoint pixel writes);
the backward parallelizes over a fixed number of pixel-row blocks with
per-block accumulators reduced in block order, so results do not depend on
the thread count.
"""
from __future__ import annotations

import numba as nb
import numpy as np
from numba import njit, prange

# 3-sigma footprint: a splat contributes only where u^2 + v^2 <= R2_MAX,
# i.e. gauss_value >= exp(-R2_MAX / 2).
R2_MAX = 9.0
# Compositing stops once transmittance drops below this.
T_EPS = 1e-4
# Rays nearly parallel to the splat plane produce no intersection.
DENOM_EPS = 1e-8

N_BACKWARD_BLOCKS = 8


@njit(cache=True, inline="always")
def _ray_for_pixel(px, py, fx, fy, cx, cy, R):
    """World-space unit direction through pixel center and 1/|d_cam|.

    The camera-space z of a point at ray parameter t is t * inv_len.
    """
    gx = (px + 0.5 - cx) / fx
    gy = (py + 0.5 - cy) / fy
    inv_len = 1.0 / np.sqrt(gx * gx + gy * gy + 1.0)
    dx = (R[0, 0] * gx + R[1, 0] * gy + R[2, 0]) * inv_len
    dy = (R[0, 1] * gx + R[1, 1] * gy + R[2, 1]) * inv_len
    dz = (R[0, 2] * gx + R[1, 2] * gy + R[2, 2]) * inv_len
    return dx, dy, dz, inv_len


@njit(cache=True, inline="always")
def _intersect_one(g, ox, oy, oz, dx, dy, dz, inv_len, near,
                   mu, tu, tv, nrm, s):
    """Ray-splat intersection. Returns (hit, t, z, u, v, g2, denom).

    g2 = u^2 + v^2; gauss_value = exp(-g2/2). Misses encode hit=False.
    """
    nx, ny, nz2 = nrm[g, 0], nrm[g, 1], nrm[g, 2]
    denom = dx * nx + dy * ny + dz * nz2
    if np.abs(denom) < DENOM_EPS:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, denom
    mx, my, mz = mu[g, 0], mu[g, 1], mu[g, 2]
    t = ((mx - ox) * nx + (my - oy) * ny + (mz - oz) * nz2) / denom
    z = t * inv_len
    if z <= near:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, denom
    wx = ox + t * dx - mx
    wy = oy + t * dy - my
    wz = oz + t * dz - mz
    u = (wx * tu[g, 0] + wy * tu[g, 1] + wz * tu[g, 2]) / s[g, 0]
    v = (wx * tv[g, 0] + wy * tv[g, 1] + wz * tv[g, 2]) / s[g, 1]
    g2 = u * u + v * v
    if g2 > R2_MAX:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, denom
    return True, t, z, u, v, g2, denom


@njit(cache=True, inline="always")
def _stable_sort_indices(zbuf, nh, order):
    """Ascending insertion sort of zbuf[:nh] into order (stable)."""
    for i in range(nh):
        key = zbuf[i]
        j = i - 1
        while j >= 0 and zbuf[order[j]] > key:
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = i


@njit(cache=True, parallel=True)
def forward_tiles(mu, tu, tv, nrm, s, opacity, col_rgb, col_seg,
                  tile_starts, pair_gauss, px_bbox,
                  n_tiles_x, n_tiles_y, tile_size, H, W,
                  R, ox, oy, oz, fx, fy, cx, cy, near,
                  bg_rgb, bg_seg, do_rgb, do_seg,
                  out_rgb, out_seg, out_depth, out_normal, out_alpha,
                  out_count):
    n_tiles = n_tiles_x * n_tiles_y
    for tid in prange(n_tiles):
        ty = tid // n_tiles_x
        tx = tid - ty * n_tiles_x
        a0 = tile_starts[tid]
        a1 = tile_starts[tid + 1]
        k = a1 - a0
        if k == 0:
            continue
        zbuf = np.empty(k, dtype=np.float64)
        gbuf = np.empty(k, dtype=np.int64)
        g2buf = np.empty(k, dtype=np.float64)
        dnbuf = np.empty(k, dtype=np.float64)
        order = np.empty(k, dtype=np.int64)
        y0 = ty * tile_size
        y1 = min(y0 + tile_size, H)
        x0 = tx * tile_size
        x1 = min(x0 + tile_size, W)
        for py in range(y0, y1):
            for px in range(x0, x1):
                dx, dy, dz, inv_len = _ray_for_pixel(px, py, fx, fy, cx, cy, R)
                nh = 0
                for j in range(a0, a1):
                    g = pair_gauss[j]
                    if (px < px_bbox[g, 0] or px > px_bbox[g, 1]
                            or py < px_bbox[g, 2] or py > px_bbox[g, 3]):
                        continue
                    hit, t, z, u, v, g2, denom = _intersect_one(
                        g, ox, oy, oz, dx, dy, dz, inv_len, near, mu, tu, tv, nrm, s)
                    if hit:
                        zbuf[nh] = z
                        gbuf[nh] = g
                        g2buf[nh] = g2
                        dnbuf[nh] = denom
                        nh += 1
                if nh == 0:
                    if do_rgb:
                        for c in range(3):
                            out_rgb[py, px, c] = bg_rgb[c]
                    if do_seg:
                        for c in range(3):
                            out_seg[py, px, c] = bg_seg[c]
                    continue
                _stable_sort_indices(zbuf, nh, order)
                trans = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                sr = 0.0
                sg = 0.0
                sb = 0.0
                acc_a = 0.0
                acc_d = 0.0
                nmx = 0.0
                nmy = 0.0
                nmz = 0.0
                cnt = 0
                for oi in range(nh):
                    if trans < T_EPS:
                        break
                    idx = order[oi]
                    g = gbuf[idx]
                    gv = np.exp(-0.5 * g2buf[idx])
                    a = opacity[g] * gv
                    w = a * trans
                    if do_rgb:
                        acc_r += w * col_rgb[g, 0]
                        acc_g += w * col_rgb[g, 1]
                        acc_b += w * col_rgb[g, 2]
                    if do_seg:
                        sr += w * col_seg[g, 0]
                        sg += w * col_seg[g, 1]
                        sb += w * col_seg[g, 2]
                    flip = -1.0 if dnbuf[idx] > 0.0 else 1.0
                    nmx += w * flip * nrm[g, 0]
                    nmy += w * flip * nrm[g, 1]
                    nmz += w * flip * nrm[g, 2]
                    acc_d += w * zbuf[idx]
                    acc_a += w
                    cnt += 1
                    trans *= 1.0 - a
                if do_rgb:
                    out_rgb[py, px, 0] = acc_r + (1.0 - acc_a) * bg_rgb[0]
                    out_rgb[py, px, 1] = acc_g + (1.0 - acc_a) * bg_rgb[1]
                    out_rgb[py, px, 2] = acc_b + (1.0 - acc_a) * bg_rgb[2]
                if do_seg:
                    out_seg[py, px, 0] = sr + (1.0 - acc_a) * bg_seg[0]
                    out_seg[py, px, 1] = sg + (1.0 - acc_a) * bg_seg[1]
                    out_seg[py, px, 2] = sb + (1.0 - acc_a) * bg_seg[2]
                out_alpha[py, px] = acc_a
                if acc_a > 0.0:
                    out_depth[py, px] = acc_d / acc_a
                nl = np.sqrt(nmx * nmx + nmy * nmy + nmz * nmz)
                if nl > 1e-12:
                    out_normal[py, px, 0] = nmx / nl
                    out_normal[py, px, 1] = nmy / nl
                    out_normal[py, px, 2] = nmz / nl
                out_count[py, px] = cnt


@njit(cache=True, parallel=True)
def fill_records(mu, tu, tv, nrm, s, opacity,
                 tile_starts, pair_gauss, px_bbox,
                 n_tiles_x, n_tiles_y, tile_size, H, W,
                 R, ox, oy, oz, fx, fy, cx, cy, near,
                 offsets, rec_gauss, rec_omega, rec_z, rec_normal):
    """Second forward pass: writes the per-pixel intersection records,
    sorted ascending in z, at the precomputed offsets."""
    n_tiles = n_tiles_x * n_tiles_y
    for tid in prange(n_tiles):
        ty = tid // n_tiles_x
        tx = tid - ty * n_tiles_x
        a0 = tile_starts[tid]
        a1 = tile_starts[tid + 1]
        k = a1 - a0
        if k == 0:
            continue
        zbuf = np.empty(k, dtype=np.float64)
        gbuf = np.empty(k, dtype=np.int64)
        g2buf = np.empty(k, dtype=np.float64)
        dnbuf = np.empty(k, dtype=np.float64)
        order = np.empty(k, dtype=np.int64)
        y0 = ty * tile_size
        y1 = min(y0 + tile_size, H)
        x0 = tx * tile_size
        x1 = min(x0 + tile_size, W)
        for py in range(y0, y1):
            for px in range(x0, x1):
                dx, dy, dz, inv_len = _ray_for_pixel(px, py, fx, fy, cx, cy, R)
                nh = 0
                for j in range(a0, a1):
                    g = pair_gauss[j]
                    if (px < px_bbox[g, 0] or px > px_bbox[g, 1]
                            or py < px_bbox[g, 2] or py > px_bbox[g, 3]):
                        continue
                    hit, t, z, u, v, g2, denom = _intersect_one(
                        g, ox, oy, oz, dx, dy, dz, inv_len, near, mu, tu, tv, nrm, s)
                    if hit:
                        zbuf[nh] = z
                        gbuf[nh] = g
                        g2buf[nh] = g2
                        dnbuf[nh] = denom
                        nh += 1
                if nh == 0:
                    continue
                _stable_sort_indices(zbuf, nh, order)
                base = offsets[py * W + px]
                trans = 1.0
                written = 0
                for oi in range(nh):
                    if trans < T_EPS:
                        break
                    idx = order[oi]
                    g = gbuf[idx]
                    gv = np.exp(-0.5 * g2buf[idx])
                    a = opacity[g] * gv
                    w = a * trans
                    r = base + written
                    rec_gauss[r] = g
                    rec_omega[r] = w
                    rec_z[r] = zbuf[idx]
                    flip = -1.0 if dnbuf[idx] > 0.0 else 1.0
                    rec_normal[r, 0] = flip * nrm[g, 0]
                    rec_normal[r, 1] = flip * nrm[g, 1]
                    rec_normal[r, 2] = flip * nrm[g, 2]
                    written += 1
                    trans *= 1.0 - a


@njit(cache=True, parallel=True)
def backward_records(mu, q_raw, tu, tv, nrm, s, opacity, col_rgb, col_seg, frozen,
                     offsets, rec_gauss, rec_omega, rec_z,
                     H, W, R, ox, oy, oz, fx, fy, cx, cy, bg_rgb, bg_seg,
                     grad_rgb, grad_seg, grad_depth, grad_normal, grad_alpha,
                     grad_omega_d, grad_z_d, grad_n_d,
                     has_rgb, has_seg, has_depth, has_normal, has_alpha,
                     has_omega_d, has_z_d, has_n_d,
                     max_per_pixel,
                     g_mu, g_q, g_s, g_opacity, g_color):
    """Transport image-space and per-intersection adjoints to splat
    parameters. Output buffers are (N_BACKWARD_BLOCKS, N, ...) partials."""
    rows_per_block = (H + N_BACKWARD_BLOCKS - 1) // N_BACKWARD_BLOCKS
    for blk in prange(N_BACKWARD_BLOCKS):
        y0 = blk * rows_per_block
        y1 = min(y0 + rows_per_block, H)
        if y0 >= y1:
            continue
        m = max_per_pixel
        b_t = np.empty(m, dtype=np.float64)       # transmittance before record
        b_a = np.empty(m, dtype=np.float64)       # opacity * gauss_value
        b_gw = np.empty(m, dtype=np.float64)      # dL/d omega
        b_gz = np.empty(m, dtype=np.float64)      # dL/d z
        b_gn = np.empty((m, 3), dtype=np.float64)  # dL/d stored normal
        b_u = np.empty(m, dtype=np.float64)
        b_v = np.empty(m, dtype=np.float64)
        b_w = np.empty((m, 3), dtype=np.float64)  # X - mu
        b_gv = np.empty(m, dtype=np.float64)      # gauss_value
        b_dn = np.empty(m, dtype=np.float64)      # d . n
        for py in range(y0, y1):
            for px in range(W):
                p = py * W + px
                r0 = offsets[p]
                r1 = offsets[p + 1]
                n_rec = r1 - r0
                if n_rec == 0:
                    continue
                dx, dy, dz, inv_len = _ray_for_pixel(px, py, fx, fy, cx, cy, R)

                # Recompute geometry and composited aggregates.
                trans = 1.0
                alpha = 0.0
                depth_num = 0.0
                mx3 = 0.0
                my3 = 0.0
                mz3 = 0.0
                for i in range(n_rec):
                    rec = r0 + i
                    g = rec_gauss[rec]
                    hit, t, z, u, v, g2, denom = _intersect_one(
                        g, ox, oy, oz, dx, dy, dz, inv_len, 0.0, mu, tu, tv, nrm, s)
                    # hit is guaranteed: the record was produced by the forward
                    # pass over the same immutable inputs.
                    gv = np.exp(-0.5 * g2) if hit else 0.0
                    a = opacity[g] * gv
                    b_t[i] = trans
                    b_a[i] = a
                    b_u[i] = u
                    b_v[i] = v
                    b_gv[i] = gv
                    b_dn[i] = denom
                    b_w[i, 0] = ox + t * dx - mu[g, 0]
                    b_w[i, 1] = oy + t * dy - mu[g, 1]
                    b_w[i, 2] = oz + t * dz - mu[g, 2]
                    trans *= 1.0 - a
                    w = rec_omega[rec]
                    alpha += w
                    depth_num += w * rec_z[rec]
                    flip = -1.0 if denom > 0.0 else 1.0
                    mx3 += w * flip * nrm[g, 0]
                    my3 += w * flip * nrm[g, 1]
                    mz3 += w * flip * nrm[g, 2]
                depth = depth_num / alpha if alpha > 0.0 else 0.0

                # Normalization jacobian of the composited normal image.
                dmx = 0.0
                dmy = 0.0
                dmz = 0.0
                if has_normal:
                    ml = np.sqrt(mx3 * mx3 + my3 * my3 + mz3 * mz3)
                    if ml > 1e-12:
                        nxh = mx3 / ml
                        nyh = my3 / ml
                        nzh = mz3 / ml
                        gnx = grad_normal[py, px, 0]
                        gny = grad_normal[py, px, 1]
                        gnz = grad_normal[py, px, 2]
                        dot = nxh * gnx + nyh * gny + nzh * gnz
                        dmx = (gnx - nxh * dot) / ml
                        dmy = (gny - nyh * dot) / ml
                        dmz = (gnz - nzh * dot) / ml

                # Per-record adjoints on omega / z / stored normal.
                for i in range(n_rec):
                    rec = r0 + i
                    g = rec_gauss[rec]
                    w = rec_omega[rec]
                    gw = 0.0
                    gz = 0.0
                    if has_alpha:
                        gw += grad_alpha[py, px]
                    if has_rgb:
                        gw += (grad_rgb[py, px, 0] * (col_rgb[g, 0] - bg_rgb[0])
                               + grad_rgb[py, px, 1] * (col_rgb[g, 1] - bg_rgb[1])
                               + grad_rgb[py, px, 2] * (col_rgb[g, 2] - bg_rgb[2]))
                    if has_seg:
                        gw += (grad_seg[py, px, 0] * (col_seg[g, 0] - bg_seg[0])
                               + grad_seg[py, px, 1] * (col_seg[g, 1] - bg_seg[1])
                               + grad_seg[py, px, 2] * (col_seg[g, 2] - bg_seg[2]))
                    if has_depth and alpha > 0.0:
                        gd = grad_depth[py, px]
                        gw += gd * (rec_z[rec] - depth) / alpha
                        gz += gd * w / alpha
                    flip = -1.0 if b_dn[i] > 0.0 else 1.0
                    gnx3 = 0.0
                    gny3 = 0.0
                    gnz3 = 0.0
                    if has_normal:
                        gw += (flip * nrm[g, 0] * dmx + flip * nrm[g, 1] * dmy
                               + flip * nrm[g, 2] * dmz)
                        gnx3 += w * dmx
                        gny3 += w * dmy
                        gnz3 += w * dmz
                    if has_omega_d:
                        gw += grad_omega_d[rec]
                    if has_z_d:
                        gz += grad_z_d[rec]
                    if has_n_d:
                        gnx3 += grad_n_d[rec, 0]
                        gny3 += grad_n_d[rec, 1]
                        gnz3 += grad_n_d[rec, 2]
                    b_gw[i] = gw
                    b_gz[i] = gz
                    b_gn[i, 0] = gnx3
                    b_gn[i, 1] = gny3
                    b_gn[i, 2] = gnz3
                    if has_rgb and frozen[g] == 0:
                        g_color[blk, g, 0] += w * grad_rgb[py, px, 0]
                        g_color[blk, g, 1] += w * grad_rgb[py, px, 1]
                        g_color[blk, g, 2] += w * grad_rgb[py, px, 2]

                # Compositing chain: dL/da_k = gw_k T_k - S_k / (1 - a_k),
                # S_k = sum_{i>k} gw_i omega_i.
                S = 0.0
                for i in range(n_rec - 1, -1, -1):
                    rec = r0 + i
                    g = rec_gauss[rec]
                    one_m = 1.0 - b_a[i]
                    if one_m < 1e-12:
                        one_m = 1e-12
                    da = b_gw[i] * b_t[i] - S / one_m
                    S += b_gw[i] * rec_omega[rec]

                    if frozen[g] != 0:
                        continue
                    gz = b_gz[i]
                    gn0 = b_gn[i, 0]
                    gn1 = b_gn[i, 1]
                    gn2 = b_gn[i, 2]

                    gv = b_gv[i]
                    u = b_u[i]
                    v = b_v[i]
                    denom = b_dn[i]
                    wx = b_w[i, 0]
                    wy = b_w[i, 1]
                    wz = b_w[i, 2]
                    flip = -1.0 if denom > 0.0 else 1.0

                    g_opacity[blk, g] += da * gv
                    gG = da * opacity[g]
                    gu = -u * gv * gG
                    gvv = -v * gv * gG
                    g_s[blk, g, 0] += gu * (-u / s[g, 0])
                    g_s[blk, g, 1] += gvv * (-v / s[g, 1])
                    gup = gu / s[g, 0]
                    gvp = gvv / s[g, 1]
                    # dL/d(X - mu)
                    gwx = gup * tu[g, 0] + gvp * tv[g, 0]
                    gwy = gup * tu[g, 1] + gvp * tv[g, 1]
                    gwz = gup * tu[g, 2] + gvp * tv[g, 2]
                    gt = dx * gwx + dy * gwy + dz * gwz
                    gt += gz * inv_len
                    # mu: direct -gw plus the t-chain.
                    coef = gt / denom
                    g_mu[blk, g, 0] += -gwx + coef * nrm[g, 0]
                    g_mu[blk, g, 1] += -gwy + coef * nrm[g, 1]
                    g_mu[blk, g, 2] += -gwz + coef * nrm[g, 2]
                    # plane-normal adjoint: t-chain plus flipped stored-normal adjoint
                    gpnx = -coef * wx + flip * gn0
                    gpny = -coef * wy + flip * gn1
                    gpnz = -coef * wz + flip * gn2
                    # tangent adjoints
                    gtux = gup * wx
                    gtuy = gup * wy
                    gtuz = gup * wz
                    gtvx = gvp * wx
                    gtvy = gvp * wy
                    gtvz = gvp * wz

                    # chain to the normalized quaternion
                    qn = np.sqrt(q_raw[g, 0] ** 2 + q_raw[g, 1] ** 2
                                 + q_raw[g, 2] ** 2 + q_raw[g, 3] ** 2)
                    qw = q_raw[g, 0] / qn
                    qx = q_raw[g, 1] / qn
                    qy = q_raw[g, 2] / qn
                    qz = q_raw[g, 3] / qn
                    gqw = 2.0 * (gtuy * qz - gtuz * qy - gtvx * qz + gtvz * qx
                                 + gpnx * qy - gpny * qx)
                    gqx = 2.0 * (gtuy * qy + gtuz * qz + gtvx * qy - 2.0 * gtvy * qx
                                 + gtvz * qw + gpnx * qz - gpny * qw - 2.0 * gpnz * qx)
                    gqy = 2.0 * (-2.0 * gtux * qy + gtuy * qx - gtuz * qw + gtvx * qx
                                 + gtvz * qz + gpnx * qw + gpny * qz - 2.0 * gpnz * qy)
                    gqz = 2.0 * (-2.0 * gtux * qz + gtuy * qw + gtuz * qx - gtvx * qw
                                 - 2.0 * gtvy * qz + gtvz * qy + gpnx * qx + gpny * qy)
                    dot = gqw * qw + gqx * qx + gqy * qy + gqz * qz
                    g_q[blk, g, 0] += (gqw - qw * dot) / qn
                    g_q[blk, g, 1] += (gqx - qx * dot) / qn
                    g_q[blk, g, 2] += (gqy - qy * dot) / qn
                    g_q[blk, g, 3] += (gqz - qz * dot) / qn
