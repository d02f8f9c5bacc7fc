"""Hot loops of the TDF / sensitivity pipeline.

Every kernel exists twice: a numba version (``_nb_*``) and a vectorised
numpy version (``_np_*``). The public names pick one according to
:mod:`mmc_multires._accel`. Both versions visit pairs in the same order
(component-major, x-fastest inside a support box) so results agree to
rounding.

A "pair" is one (background node, component) combination with the node
inside the component's support box.
"""

import math

import numpy as np

from ._accel import HAVE_NUMBA, njit

# Stand-in TDF value where the hyperelliptic width b(x') is not positive.
FAR_VOID = -1.0e30


# ----------------------------------------------------------------------------
# rotation (shared by 3D evaluation and partials)
# ----------------------------------------------------------------------------


@njit(cache=True)
def rotation_and_derivs(alpha, beta, theta):
    """Rotation matrix of the 3D component and its three angle derivatives.

    Cosines are taken as sqrt(1 - sin^2), i.e. non-negative.
    """
    sa = math.sin(alpha)
    sb = math.sin(beta)
    st = math.sin(theta)
    ca = math.sqrt(max(1.0 - sa * sa, 0.0))
    cb = math.sqrt(max(1.0 - sb * sb, 0.0))
    ct = math.sqrt(max(1.0 - st * st, 0.0))
    R = np.empty((3, 3))
    R[0, 0] = cb * ct
    R[0, 1] = -cb * st
    R[0, 2] = sb
    R[1, 0] = sa * sb * ct + ca * st
    R[1, 1] = -sa * sb * st + ca * ct
    R[1, 2] = -sa * cb
    R[2, 0] = -ca * sb * ct + sa * st
    R[2, 1] = ca * sb * st + sa * ct
    R[2, 2] = ca * cb
    dR = np.empty((3, 3, 3))
    # d/dalpha: (sa, ca) -> (ca, -sa)
    dR[0, 0, 0] = 0.0
    dR[0, 0, 1] = 0.0
    dR[0, 0, 2] = 0.0
    dR[0, 1, 0] = ca * sb * ct - sa * st
    dR[0, 1, 1] = -ca * sb * st - sa * ct
    dR[0, 1, 2] = -ca * cb
    dR[0, 2, 0] = sa * sb * ct + ca * st
    dR[0, 2, 1] = -sa * sb * st + ca * ct
    dR[0, 2, 2] = -sa * cb
    # d/dbeta: (sb, cb) -> (cb, -sb)
    dR[1, 0, 0] = -sb * ct
    dR[1, 0, 1] = sb * st
    dR[1, 0, 2] = cb
    dR[1, 1, 0] = sa * cb * ct
    dR[1, 1, 1] = -sa * cb * st
    dR[1, 1, 2] = sa * sb
    dR[1, 2, 0] = -ca * cb * ct
    dR[1, 2, 1] = ca * cb * st
    dR[1, 2, 2] = -ca * sb
    # d/dtheta: (st, ct) -> (ct, -st)
    dR[2, 0, 0] = -cb * st
    dR[2, 0, 1] = -cb * ct
    dR[2, 0, 2] = 0.0
    dR[2, 1, 0] = -sa * sb * st + ca * ct
    dR[2, 1, 1] = -sa * sb * ct - ca * st
    dR[2, 1, 2] = 0.0
    dR[2, 2, 0] = ca * sb * st + sa * ct
    dR[2, 2, 1] = ca * sb * ct - sa * st
    dR[2, 2, 2] = 0.0
    return R, dR


# ----------------------------------------------------------------------------
# pointwise TDF + partials (numba scalar helpers)
# ----------------------------------------------------------------------------


@njit(cache=True)
def _tdf2d_point(row, x, y, p):
    x0, y0, a, t1, t2, th = row[0], row[1], row[2], row[3], row[4], row[5]
    c = math.cos(th)
    s = math.sin(th)
    dx = x - x0
    dy = y - y0
    xp = c * dx + s * dy
    yp = -s * dx + c * dy
    b = 0.5 * (t1 + t2) + 0.5 * (t2 - t1) / a * xp
    if b <= 0.0:
        return FAR_VOID
    return 1.0 - (xp / a) ** p - (yp / b) ** p


@njit(cache=True)
def _tdf2d_partials_point(row, x, y, p, out):
    x0, y0, a, t1, t2, th = row[0], row[1], row[2], row[3], row[4], row[5]
    c = math.cos(th)
    s = math.sin(th)
    dx = x - x0
    dy = y - y0
    xp = c * dx + s * dy
    yp = -s * dx + c * dy
    slope = 0.5 * (t2 - t1) / a
    b = 0.5 * (t1 + t2) + slope * xp
    if b <= 0.0:
        for k in range(6):
            out[k] = 0.0
        return
    u = xp / a
    v = yp / b
    up1 = u ** (p - 1)
    vp1 = v ** (p - 1)
    # d phi / d b at fixed (x', y')
    dphi_db = p * vp1 * v / b
    dphi_dxp = -p * up1 / a + dphi_db * slope
    dphi_dyp = -p * vp1 / b
    out[0] = -c * dphi_dxp + s * dphi_dyp
    out[1] = -s * dphi_dxp - c * dphi_dyp
    out[2] = p * up1 * u / a - dphi_db * slope * xp / a
    out[3] = dphi_db * (0.5 - 0.5 * xp / a)
    out[4] = dphi_db * (0.5 + 0.5 * xp / a)
    out[5] = dphi_dxp * yp - dphi_dyp * xp


@njit(cache=True)
def _tdf3d_point(row, R, x, y, z, p):
    dx = x - row[0]
    dy = y - row[1]
    dz = z - row[2]
    xp = R[0, 0] * dx + R[0, 1] * dy + R[0, 2] * dz
    yp = R[1, 0] * dx + R[1, 1] * dy + R[1, 2] * dz
    zp = R[2, 0] * dx + R[2, 1] * dy + R[2, 2] * dz
    return 1.0 - (xp / row[3]) ** p - (yp / row[4]) ** p - (zp / row[5]) ** p


@njit(cache=True)
def _tdf3d_partials_point(row, R, dR, x, y, z, p, out):
    d = np.empty(3)
    d[0] = x - row[0]
    d[1] = y - row[1]
    d[2] = z - row[2]
    loc = np.empty(3)
    g = np.empty(3)
    for r in range(3):
        loc[r] = R[r, 0] * d[0] + R[r, 1] * d[1] + R[r, 2] * d[2]
        L = row[3 + r]
        w = loc[r] / L
        w5 = w ** (p - 1)
        g[r] = -p * w5 / L
        out[3 + r] = p * w5 * w / L
    for k in range(3):
        out[k] = -(R[0, k] * g[0] + R[1, k] * g[1] + R[2, k] * g[2])
    for ang in range(3):
        acc = 0.0
        for r in range(3):
            acc += g[r] * (dR[ang, r, 0] * d[0] + dR[ang, r, 1] * d[1] + dR[ang, r, 2] * d[2])
        out[6 + ang] = acc


# ----------------------------------------------------------------------------
# pair generation: evaluate every component on its support box
# ----------------------------------------------------------------------------


def _box_sizes(lo, hi):
    ext = np.maximum(hi - lo + 1, 0)
    return ext, np.prod(ext, axis=1)


@njit(cache=True)
def _nb_eval_boxes_2d(design, lo, hi, spacing, node_shape, p, total):
    nodes = np.empty(total, dtype=np.int64)
    comps = np.empty(total, dtype=np.int64)
    vals = np.empty(total)
    k = 0
    nxn = node_shape[0]
    for c in range(design.shape[0]):
        row = design[c]
        for j in range(lo[c, 1], hi[c, 1] + 1):
            y = j * spacing[1]
            for i in range(lo[c, 0], hi[c, 0] + 1):
                x = i * spacing[0]
                nodes[k] = i + nxn * j
                comps[k] = c
                vals[k] = _tdf2d_point(row, x, y, p)
                k += 1
    return nodes, comps, vals


@njit(cache=True)
def _nb_eval_boxes_3d(design, lo, hi, spacing, node_shape, p, total):
    nodes = np.empty(total, dtype=np.int64)
    comps = np.empty(total, dtype=np.int64)
    vals = np.empty(total)
    k = 0
    nxn = node_shape[0]
    nyn = node_shape[1]
    for c in range(design.shape[0]):
        row = design[c]
        R, _ = rotation_and_derivs(row[6], row[7], row[8])
        for kk in range(lo[c, 2], hi[c, 2] + 1):
            z = kk * spacing[2]
            for j in range(lo[c, 1], hi[c, 1] + 1):
                y = j * spacing[1]
                for i in range(lo[c, 0], hi[c, 0] + 1):
                    x = i * spacing[0]
                    nodes[k] = i + nxn * (j + nyn * kk)
                    comps[k] = c
                    vals[k] = _tdf3d_point(row, R, x, y, z, p)
                    k += 1
    return nodes, comps, vals


def _np_box_pairs(lo, hi, node_shape):
    """Node ids and component ids of all pairs, component-major."""
    ext, sizes = _box_sizes(lo, hi)
    total = int(sizes.sum())
    comps = np.repeat(np.arange(len(lo)), sizes)
    start = np.repeat(np.cumsum(sizes) - sizes, sizes)
    local = np.arange(total) - start
    dim = lo.shape[1]
    idx = np.empty((total, dim), dtype=np.int64)
    rem = local
    for a in range(dim):
        e = ext[comps, a]
        idx[:, a] = rem % e + lo[comps, a]
        rem = rem // e
    nodes = np.zeros(total, dtype=np.int64)
    stride = 1
    for a in range(dim):
        nodes += idx[:, a] * stride
        stride *= node_shape[a]
    return nodes, comps, idx


def np_tdf_2d(rows, x, y, p):
    """Vectorised 2D TDF; ``rows`` broadcasts against ``x``/``y``."""
    rows = np.asarray(rows, dtype=float)
    x0, y0, a, t1, t2, th = (rows[..., k] for k in range(6))
    c = np.cos(th)
    s = np.sin(th)
    dx = x - x0
    dy = y - y0
    xp = c * dx + s * dy
    yp = -s * dx + c * dy
    b = 0.5 * (t1 + t2) + 0.5 * (t2 - t1) / a * xp
    bad = b <= 0.0
    bsafe = np.where(bad, 1.0, b)
    phi = 1.0 - (xp / a) ** p - (yp / bsafe) ** p
    return np.where(bad, FAR_VOID, phi)


def np_rotations(angles):
    """Stack of (R, dR) for an ``(n, 3)`` array of angles."""
    angles = np.asarray(angles, dtype=float).reshape(-1, 3)
    sa, sb, st = (np.sin(angles[:, k]) for k in range(3))
    ca, cb, ct = (np.sqrt(np.maximum(1.0 - s * s, 0.0)) for s in (sa, sb, st))
    n = len(angles)
    R = np.empty((n, 3, 3))
    R[:, 0, 0] = cb * ct
    R[:, 0, 1] = -cb * st
    R[:, 0, 2] = sb
    R[:, 1, 0] = sa * sb * ct + ca * st
    R[:, 1, 1] = -sa * sb * st + ca * ct
    R[:, 1, 2] = -sa * cb
    R[:, 2, 0] = -ca * sb * ct + sa * st
    R[:, 2, 1] = ca * sb * st + sa * ct
    R[:, 2, 2] = ca * cb
    dR = np.zeros((n, 3, 3, 3))
    dR[:, 0, 1, 0] = ca * sb * ct - sa * st
    dR[:, 0, 1, 1] = -ca * sb * st - sa * ct
    dR[:, 0, 1, 2] = -ca * cb
    dR[:, 0, 2, 0] = sa * sb * ct + ca * st
    dR[:, 0, 2, 1] = -sa * sb * st + ca * ct
    dR[:, 0, 2, 2] = -sa * cb
    dR[:, 1, 0, 0] = -sb * ct
    dR[:, 1, 0, 1] = sb * st
    dR[:, 1, 0, 2] = cb
    dR[:, 1, 1, 0] = sa * cb * ct
    dR[:, 1, 1, 1] = -sa * cb * st
    dR[:, 1, 1, 2] = sa * sb
    dR[:, 1, 2, 0] = -ca * cb * ct
    dR[:, 1, 2, 1] = ca * cb * st
    dR[:, 1, 2, 2] = -ca * sb
    dR[:, 2, 0, 0] = -cb * st
    dR[:, 2, 0, 1] = -cb * ct
    dR[:, 2, 1, 0] = -sa * sb * st + ca * ct
    dR[:, 2, 1, 1] = -sa * sb * ct - ca * st
    dR[:, 2, 2, 0] = ca * sb * st + sa * ct
    dR[:, 2, 2, 1] = ca * sb * ct - sa * st
    return R, dR


def np_tdf_3d(rows, R, pts, p):
    """Vectorised 3D TDF for per-point ``rows`` (n, 9), ``R`` (n, 3, 3)."""
    loc = np.einsum("nij,nj->ni", R, pts - rows[:, :3])
    return 1.0 - ((loc / rows[:, 3:6]) ** p).sum(axis=1)


def _np_eval_boxes_2d(design, lo, hi, spacing, node_shape, p, total):
    nodes, comps, idx = _np_box_pairs(lo, hi, node_shape)
    x = idx[:, 0] * spacing[0]
    y = idx[:, 1] * spacing[1]
    vals = np_tdf_2d(design[comps], x, y, p)
    return nodes, comps, vals


def _np_eval_boxes_3d(design, lo, hi, spacing, node_shape, p, total):
    nodes, comps, idx = _np_box_pairs(lo, hi, node_shape)
    pts = idx * np.asarray(spacing)
    R, _ = np_rotations(design[:, 6:9])
    vals = np_tdf_3d(design[comps], R[comps], pts, p)
    return nodes, comps, vals


# ----------------------------------------------------------------------------
# K-S aggregation over pairs
# ----------------------------------------------------------------------------


@njit(cache=True)
def _nb_ks_pairs(nodes, vals, n_nodes, ks_l):
    phi_max = np.full(n_nodes, -np.inf)
    for k in range(nodes.size):
        n = nodes[k]
        if vals[k] > phi_max[n]:
            phi_max[n] = vals[k]
    sums = np.zeros(n_nodes)
    expo = np.empty(nodes.size)
    for k in range(nodes.size):
        n = nodes[k]
        e = math.exp(ks_l * (vals[k] - phi_max[n]))
        expo[k] = e
        sums[n] += e
    phi = np.full(n_nodes, -np.inf)
    for n in range(n_nodes):
        if sums[n] > 0.0:
            phi[n] = phi_max[n] + math.log(sums[n]) / ks_l
    weights = np.empty(nodes.size)
    for k in range(nodes.size):
        weights[k] = expo[k] / sums[nodes[k]]
    return phi, weights


def _np_ks_pairs(nodes, vals, n_nodes, ks_l):
    phi_max = np.full(n_nodes, -np.inf)
    np.maximum.at(phi_max, nodes, vals)
    expo = np.exp(ks_l * (vals - phi_max[nodes]))
    sums = np.bincount(nodes, weights=expo, minlength=n_nodes)
    phi = np.full(n_nodes, -np.inf)
    hit = sums > 0.0
    phi[hit] = phi_max[hit] + np.log(sums[hit]) / ks_l
    return phi, expo / sums[nodes]


# ----------------------------------------------------------------------------
# chain rule: nodal sensitivities -> design-variable gradients
# ----------------------------------------------------------------------------


@njit(cache=True)
def _nb_accumulate_2d(design, nodes, comps, weights, node_sens, spacing, node_shape, p):
    n_sens = node_sens.shape[0]
    grad = np.zeros((n_sens, design.shape[0], 6))
    part = np.empty(6)
    nxn = node_shape[0]
    for k in range(nodes.size):
        n = nodes[k]
        c = comps[k]
        i = n % nxn
        j = n // nxn
        _tdf2d_partials_point(design[c], i * spacing[0], j * spacing[1], p, part)
        for s in range(n_sens):
            f = node_sens[s, n] * weights[k]
            if f != 0.0:
                for q in range(6):
                    grad[s, c, q] += f * part[q]
    return grad


@njit(cache=True)
def _nb_accumulate_3d(design, nodes, comps, weights, node_sens, spacing, node_shape, p):
    n_sens = node_sens.shape[0]
    n_comp = design.shape[0]
    grad = np.zeros((n_sens, n_comp, 9))
    Rs = np.empty((n_comp, 3, 3))
    dRs = np.empty((n_comp, 3, 3, 3))
    for c in range(n_comp):
        R, dR = rotation_and_derivs(design[c, 6], design[c, 7], design[c, 8])
        Rs[c] = R
        dRs[c] = dR
    part = np.empty(9)
    nxn = node_shape[0]
    nyn = node_shape[1]
    for k in range(nodes.size):
        n = nodes[k]
        c = comps[k]
        i = n % nxn
        j = (n // nxn) % nyn
        kk = n // (nxn * nyn)
        _tdf3d_partials_point(
            design[c], Rs[c], dRs[c], i * spacing[0], j * spacing[1], kk * spacing[2], p, part
        )
        for s in range(n_sens):
            f = node_sens[s, n] * weights[k]
            if f != 0.0:
                for q in range(9):
                    grad[s, c, q] += f * part[q]
    return grad


def np_tdf_partials_2d(rows, x, y, p):
    """Vectorised partials, shape ``(..., 6)``; zero where b(x') <= 0."""
    rows = np.asarray(rows, dtype=float)
    x0, y0, a, t1, t2, th = (rows[..., k] for k in range(6))
    c = np.cos(th)
    s = np.sin(th)
    dx = x - x0
    dy = y - y0
    xp = c * dx + s * dy
    yp = -s * dx + c * dy
    slope = 0.5 * (t2 - t1) / a
    b = 0.5 * (t1 + t2) + slope * xp
    bad = b <= 0.0
    b = np.where(bad, 1.0, b)
    u = xp / a
    v = yp / b
    up1 = u ** (p - 1)
    vp1 = v ** (p - 1)
    dphi_db = p * vp1 * v / b
    dphi_dxp = -p * up1 / a + dphi_db * slope
    dphi_dyp = -p * vp1 / b
    out = np.stack(
        [
            -c * dphi_dxp + s * dphi_dyp,
            -s * dphi_dxp - c * dphi_dyp,
            p * up1 * u / a - dphi_db * slope * xp / a,
            dphi_db * (0.5 - 0.5 * xp / a),
            dphi_db * (0.5 + 0.5 * xp / a),
            dphi_dxp * yp - dphi_dyp * xp,
        ],
        axis=-1,
    )
    return np.where(bad[..., None], 0.0, out)


def np_tdf_partials_3d(rows, R, dR, pts, p):
    d = pts - rows[:, :3]
    loc = np.einsum("nij,nj->ni", R, d)
    L = rows[:, 3:6]
    w = loc / L
    w5 = w ** (p - 1)
    g = -p * w5 / L
    out = np.empty((len(rows), 9))
    out[:, 3:6] = p * w5 * w / L
    out[:, 0:3] = -np.einsum("nrk,nr->nk", R, g)
    out[:, 6:9] = np.einsum("nr,narj,nj->na", g, dR, d)
    return out


def _np_accumulate_2d(design, nodes, comps, weights, node_sens, spacing, node_shape, p):
    nxn = node_shape[0]
    x = (nodes % nxn) * spacing[0]
    y = (nodes // nxn) * spacing[1]
    part = np_tdf_partials_2d(design[comps], x, y, p)
    return _np_scatter(part, comps, weights, node_sens[:, nodes], design.shape)


def _np_accumulate_3d(design, nodes, comps, weights, node_sens, spacing, node_shape, p):
    nxn, nyn = node_shape[0], node_shape[1]
    pts = np.stack(
        [(nodes % nxn) * spacing[0], ((nodes // nxn) % nyn) * spacing[1],
         (nodes // (nxn * nyn)) * spacing[2]],
        axis=1,
    )
    R, dR = np_rotations(design[:, 6:9])
    part = np_tdf_partials_3d(design[comps], R[comps], dR[comps], pts, p)
    return _np_scatter(part, comps, weights, node_sens[:, nodes], design.shape)


def _np_scatter(part, comps, weights, sens_at_pairs, shape):
    n_comp, n_par = shape
    grad = np.zeros((len(sens_at_pairs), n_comp, n_par))
    for s, sp in enumerate(sens_at_pairs):
        f = sp * weights
        for q in range(n_par):
            grad[s, :, q] = np.bincount(comps, weights=f * part[:, q], minlength=n_comp)
    return grad


# ----------------------------------------------------------------------------
# dispatch
# ----------------------------------------------------------------------------

NUMPY_KERNELS = {
    "eval_boxes_2d": _np_eval_boxes_2d,
    "eval_boxes_3d": _np_eval_boxes_3d,
    "ks_pairs": _np_ks_pairs,
    "accumulate_2d": _np_accumulate_2d,
    "accumulate_3d": _np_accumulate_3d,
}

NUMBA_KERNELS = {
    "eval_boxes_2d": _nb_eval_boxes_2d,
    "eval_boxes_3d": _nb_eval_boxes_3d,
    "ks_pairs": _nb_ks_pairs,
    "accumulate_2d": _nb_accumulate_2d,
    "accumulate_3d": _nb_accumulate_3d,
}

KERNELS = NUMBA_KERNELS if HAVE_NUMBA else NUMPY_KERNELS
