"""Tile-based software rasterizer: one pass produces an RGB image, a
D-dimensional feature map, and an alpha map, all composited front-to-back
with shared weights. A brute-force per-pixel reference implements the same
contract for oracle comparisons, and an analytic backward pass yields
gradients for color, opacity, and the feature parameters (owned latents,
scaffold base features, weight offsets).

Numeric conventions (the scene-level contracts do not pin them, so they are
fixed here): near plane 0.01, alpha clamp 0.99, transmittance cutoff 1e-4,
+0.3 px^2 isotropic floor on the projected covariance, 16 px tiles, and a
hard 3-sigma support cutoff on each splat. The support cutoff is applied in
the alpha formula itself (not just in tile binning) so the output is
independent of tile size and matches the untiled reference exactly up to
floating-point association order.

Pixel (x, y) samples the continuous image point (x, y); the pinhole
projection u = fx X/Z + cx lives in the same coordinates as back-projection.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .scene import CameraModel, Gaussian3D, RenderBatch
from .se3 import quat_rotate, quat_to_matrix

NEAR_PLANE = 0.01
ALPHA_CLAMP = 0.99
TRANSMITTANCE_CUTOFF = 1e-4
COV2D_FLOOR = 0.3
TILE_SIZE = 16
SUPPORT_CHI2 = 9.0  # 3-sigma ellipse; alpha is exactly zero outside

THREADS_ENV = "SCAFFOLD4D_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    if raw.strip():
        return max(1, int(raw))
    return os.cpu_count() or 1


@dataclass
class SplatProjection:
    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) pixels^2, regularized
    depth: float


def _camera_arrays(camera: CameraModel):
    q = camera.pose.rotation.as_array()
    t = camera.pose.translation
    return q, t, quat_to_matrix(q[None])[0]


def project_batch(positions: np.ndarray, rotations: np.ndarray, scales: np.ndarray, camera: CameraModel):
    """Project all Gaussians; returns (valid, mean2d, conic, cov2d, depth, radius_px).

    cov2d = J W Sigma W^T J^T + floor, with Sigma = R diag(s^2) R^T, W the
    camera rotation, J the pinhole Jacobian at the camera-space mean. Culled
    entries (depth <= near plane) are marked invalid.
    """
    n = positions.shape[0]
    cam_q, cam_t, w_mat = _camera_arrays(camera)
    x_cam = quat_rotate(np.broadcast_to(cam_q, (n, 4)), positions) + cam_t
    depth = x_cam[:, 2]
    valid = depth > NEAR_PLANE
    z = np.where(valid, depth, 1.0)
    mean2d = np.stack(
        [camera.fx * x_cam[:, 0] / z + camera.cx, camera.fy * x_cam[:, 1] / z + camera.cy], axis=-1
    )
    rot = quat_to_matrix(rotations)
    m = rot * scales[:, None, :]
    sigma = np.einsum("nij,nkj->nik", m, m)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / z
    jac[:, 0, 2] = -camera.fx * x_cam[:, 0] / z**2
    jac[:, 1, 1] = camera.fy / z
    jac[:, 1, 2] = -camera.fy * x_cam[:, 1] / z**2
    t_mat = np.einsum("nij,jk->nik", jac, w_mat)
    cov2d = np.einsum("nij,njk,nlk->nil", t_mat, sigma, t_mat)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=-1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)
    return valid, mean2d, conic, cov2d, depth, radius


def project_gaussian(g: Gaussian3D, camera: CameraModel) -> SplatProjection | None:
    valid, mean2d, _, cov2d, depth, _ = project_batch(
        g.position[None], g.rotation.as_array()[None], g.scale[None], camera
    )
    if not valid[0]:
        return None
    return SplatProjection(mean2d[0], cov2d[0], float(depth[0]))


@dataclass
class TileRecord:
    """Per-tile forward state kept for the backward pass."""

    y0: int
    y1: int
    x0: int
    x1: int
    order: np.ndarray  # (G,) batch indices, front-to-back
    alpha: np.ndarray  # (G, P) post-clamp, zero outside support
    t_before: np.ndarray  # (G, P) transmittance before each splat
    t_final: np.ndarray  # (P,)


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    feature: np.ndarray  # (H, W, D)
    alpha: np.ndarray  # (H, W)
    tiles: list[TileRecord] | None
    batch: RenderBatch
    background: np.ndarray


def _splat_block(order, mean2d, conic, opacities, ys, xs):
    """Alpha / transmittance matrices for one pixel block, front-to-back."""
    py, px = np.meshgrid(ys, xs, indexing="ij")
    px = px.reshape(-1).astype(float)
    py = py.reshape(-1).astype(float)
    dx = px[None, :] - mean2d[order, 0:1]
    dy = py[None, :] - mean2d[order, 1:2]
    co = conic[order]
    power = -0.5 * (co[:, 0:1] * dx * dx + co[:, 2:3] * dy * dy) - co[:, 1:2] * dx * dy
    alpha = np.where(power >= -0.5 * SUPPORT_CHI2, opacities[order, None] * np.exp(power), 0.0)
    np.minimum(alpha, ALPHA_CLAMP, out=alpha)
    trans = np.cumprod(1.0 - alpha, axis=0)
    t_before = np.empty_like(trans)
    t_before[0] = 1.0
    t_before[1:] = trans[:-1]
    live = t_before >= TRANSMITTANCE_CUTOFF
    weights = alpha * t_before * live
    t_final = np.prod(1.0 - alpha * live, axis=0)
    return alpha, t_before, weights, t_final


def _composite(weights, t_final, order, values, background, n_color):
    out = weights.T @ values[order]
    out[:, :n_color] += t_final[:, None] * background
    return out, weights.sum(axis=0)


def rasterize(
    view: CameraModel,
    batch: RenderBatch,
    latent_dim: int,
    background=(0.0, 0.0, 0.0),
    tile_size: int = TILE_SIZE,
    workers: int | None = None,
    keep_contributions: bool = True,
) -> RenderOutput:
    """Front-to-back alpha compositing over depth-sorted splats, tiled.

    Per pixel: alpha_i = min(0.99, opacity_i * exp(-0.5 d^T cov2d^-1 d))
    inside the 3-sigma support (zero outside), values accumulate as
    sum_i v_i alpha_i prod_{j<i} (1 - alpha_j), traversal stops once the
    transmittance drops below 1e-4, and the background color (zero feature)
    receives the remaining transmittance.
    """
    h, w = view.height, view.width
    background = np.asarray(background, dtype=float).reshape(3)
    if batch.features.shape[0] and batch.features.shape[1] != latent_dim:
        raise ValueError(
            f"feature dimension mismatch: batch has {batch.features.shape[1]}, expected {latent_dim}"
        )
    rgb = np.tile(background, (h, w, 1))
    feature = np.zeros((h, w, latent_dim))
    alpha_map = np.zeros((h, w))

    n = len(batch)
    tiles_x = (w + tile_size - 1) // tile_size
    tiles_y = (h + tile_size - 1) // tile_size
    records: list[TileRecord | None] = [None] * (tiles_x * tiles_y)
    if n == 0:
        return RenderOutput(rgb, feature, alpha_map, [r for r in records if r], batch, background)

    valid, mean2d, conic, _, depth, radius = project_batch(
        batch.positions, batch.rotations, batch.scales, view
    )
    values = np.concatenate([batch.colors, batch.features], axis=1)

    bins: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    idx_valid = np.nonzero(valid)[0]
    x0 = np.clip(np.floor(mean2d[:, 0] - radius).astype(int), 0, w - 1)
    x1 = np.clip(np.ceil(mean2d[:, 0] + radius).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(mean2d[:, 1] - radius).astype(int), 0, h - 1)
    y1 = np.clip(np.ceil(mean2d[:, 1] + radius).astype(int), 0, h - 1)
    off_screen = (mean2d[:, 0] + radius < 0) | (mean2d[:, 0] - radius > w - 1) | (
        mean2d[:, 1] + radius < 0
    ) | (mean2d[:, 1] - radius > h - 1)
    for i in idx_valid:
        if off_screen[i]:
            continue
        for ty in range(y0[i] // tile_size, y1[i] // tile_size + 1):
            for tx in range(x0[i] // tile_size, x1[i] // tile_size + 1):
                bins[ty * tiles_x + tx].append(i)

    def run_tile(tid: int):
        members = bins[tid]
        if not members:
            return
        ty, tx = divmod(tid, tiles_x)
        py0, px0 = ty * tile_size, tx * tile_size
        py1, px1 = min(py0 + tile_size, h), min(px0 + tile_size, w)
        ys = np.arange(py0, py1)
        xs = np.arange(px0, px1)
        idx = np.asarray(members, dtype=np.int64)
        order = idx[np.lexsort((idx, depth[idx]))]
        alpha, t_before, weights, t_final = _splat_block(order, mean2d, conic, batch.opacities, ys, xs)
        out, asum = _composite(weights, t_final, order, values, background, 3)
        bh, bw = py1 - py0, px1 - px0
        rgb[py0:py1, px0:px1] = out[:, :3].reshape(bh, bw, 3)
        feature[py0:py1, px0:px1] = out[:, 3:].reshape(bh, bw, latent_dim)
        alpha_map[py0:py1, px0:px1] = asum.reshape(bh, bw)
        if keep_contributions:
            records[tid] = TileRecord(py0, py1, px0, px1, order, alpha, t_before, t_final)

    n_workers = worker_count() if workers is None else max(1, workers)
    busy = [t for t in range(tiles_x * tiles_y) if bins[t]]
    # Tiles write disjoint pixels and records land in tile order, so the
    # output is bitwise identical at any worker count; the pool only pays
    # for itself on larger images.
    if n_workers > 1 and len(busy) > 1 and h * w >= 16384:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(run_tile, busy))
    else:
        for tid in busy:
            run_tile(tid)

    tiles = [r for r in records if r is not None] if keep_contributions else None
    return RenderOutput(rgb, feature, alpha_map, tiles, batch, background)


def rasterize_reference(
    view: CameraModel,
    batch: RenderBatch,
    latent_dim: int,
    background=(0.0, 0.0, 0.0),
    band: int = 8,
) -> RenderOutput:
    """Oracle: identical compositing contract with one global depth sort and
    no tiling; every splat is evaluated against every pixel. Work proceeds in
    pixel-row bands purely to bound memory; splats whose 3-sigma support
    cannot reach a band are skipped there, which is exact (their alpha is
    zero on every pixel of the band) and preserves the global order. No
    contribution lists are kept."""
    h, w = view.height, view.width
    background = np.asarray(background, dtype=float).reshape(3)
    if batch.features.shape[0] and batch.features.shape[1] != latent_dim:
        raise ValueError(
            f"feature dimension mismatch: batch has {batch.features.shape[1]}, expected {latent_dim}"
        )
    rgb = np.tile(background, (h, w, 1))
    feature = np.zeros((h, w, latent_dim))
    alpha_map = np.zeros((h, w))
    n = len(batch)
    if n == 0:
        return RenderOutput(rgb, feature, alpha_map, None, batch, background)

    valid, mean2d, conic, _, depth, radius = project_batch(batch.positions, batch.rotations, batch.scales, view)
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return RenderOutput(rgb, feature, alpha_map, None, batch, background)
    order = idx[np.lexsort((idx, depth[idx]))]
    values = np.concatenate([batch.colors, batch.features], axis=1)
    xs = np.arange(w, dtype=float)

    for y0 in range(0, h, band):
        y1 = min(y0 + band, h)
        reach = (mean2d[order, 1] + radius[order] >= y0) & (mean2d[order, 1] - radius[order] <= y1 - 1)
        sub = order[reach]
        if sub.size == 0:
            continue
        ys = np.arange(y0, y1, dtype=float)
        py, px = np.meshgrid(ys, xs, indexing="ij")
        px = px.reshape(-1)
        py = py.reshape(-1)
        dx = px[None, :] - mean2d[sub, 0:1]
        dy = py[None, :] - mean2d[sub, 1:2]
        co = conic[sub]
        power = -0.5 * (co[:, 0:1] * dx * dx + co[:, 2:3] * dy * dy) - co[:, 1:2] * dx * dy
        alpha = np.where(power >= -0.5 * SUPPORT_CHI2, batch.opacities[sub, None] * np.exp(power), 0.0)
        np.minimum(alpha, ALPHA_CLAMP, out=alpha)
        trans = np.cumprod(1.0 - alpha, axis=0)
        t_before = np.empty_like(trans)
        t_before[0] = 1.0
        t_before[1:] = trans[:-1]
        live = t_before >= TRANSMITTANCE_CUTOFF
        weights = alpha * t_before * live
        t_final = np.prod(1.0 - alpha * live, axis=0)
        out = weights.T @ values[sub]
        out[:, :3] += t_final[:, None] * background
        rgb[y0:y1] = out[:, :3].reshape(y1 - y0, w, 3)
        feature[y0:y1] = out[:, 3:].reshape(y1 - y0, w, latent_dim)
        alpha_map[y0:y1] = weights.sum(axis=0).reshape(y1 - y0, w)
    return RenderOutput(rgb, feature, alpha_map, None, batch, background)


@dataclass
class RasterGrads:
    """Gradients of a scalar loss through the compositing equation.

    `feature` is w.r.t. each batch row's resolved feature vector; the routed
    fields split that into owned static latents, scaffold base features, and
    weight offsets (None when the batch carries no provenance).
    """

    color: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)
    feature: np.ndarray  # (N, D)
    owned_latent: np.ndarray | None = None  # (num_static, D)
    base_features: np.ndarray | None = None  # (M, D)
    weight_offsets: np.ndarray | None = None  # (num_dynamic, K)


def rasterize_backward(
    output: RenderOutput, grad_rgb: np.ndarray, grad_feature: np.ndarray | None
) -> RasterGrads:
    """Exact gradients of the compositing equation for color, opacity, and
    features. Position/covariance gradients are intentionally not produced;
    geometry is shaped by the scaffold losses, not the photometric path.
    """
    if output.tiles is None:
        raise ValueError("missing contribution lists; rerender with keep_contributions=True")
    batch = output.batch
    n = len(batch)
    d = batch.features.shape[1] if n else output.feature.shape[2]
    grad_rgb = np.asarray(grad_rgb, dtype=float)
    if grad_rgb.shape != output.rgb.shape:
        raise ValueError("grad_rgb shape mismatch")
    if grad_feature is None:
        grad_feature = np.zeros_like(output.feature)
    grad_feature = np.asarray(grad_feature, dtype=float)
    if grad_feature.shape != output.feature.shape:
        raise ValueError("grad_feature shape mismatch")

    grad_color = np.zeros((n, 3))
    grad_opacity = np.zeros(n)
    grad_feat = np.zeros((n, d))
    values = np.concatenate([batch.colors, batch.features], axis=1) if n else np.zeros((0, 3 + d))
    bg = output.background

    for rec in output.tiles:
        g_rgb = grad_rgb[rec.y0 : rec.y1, rec.x0 : rec.x1].reshape(-1, 3)
        g_feat = grad_feature[rec.y0 : rec.y1, rec.x0 : rec.x1].reshape(-1, d)
        g_vals = np.concatenate([g_rgb, g_feat], axis=1)  # (P, 3 + D)
        live = rec.t_before >= TRANSMITTANCE_CUTOFF
        weights = rec.alpha * rec.t_before * live
        gv = weights @ g_vals  # (G, 3 + D)
        # Tile orders are duplicate-free, so fancy-index accumulation is safe.
        grad_color[rec.order] += gv[:, :3]
        grad_feat[rec.order] += gv[:, 3:]

        v = values[rec.order] @ g_vals.T  # (G, P)
        vbg = g_rgb @ bg  # (P,)
        contrib = v * weights
        suffix = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib + vbg * rec.t_final
        grad_alpha = live * (v * rec.t_before - suffix / (1.0 - rec.alpha))
        dago = np.where(rec.alpha >= ALPHA_CLAMP, 0.0, rec.alpha) / batch.opacities[rec.order, None]
        grad_opacity[rec.order] += np.sum(grad_alpha * dago, axis=1)

    grads = RasterGrads(grad_color, grad_opacity, grad_feat)
    prov = batch.provenance
    if prov is not None:
        owned = np.zeros((prov.num_static, d))
        srows = np.nonzero(prov.static_index >= 0)[0]
        owned[prov.static_index[srows]] = grad_feat[srows]
        base = np.zeros_like(prov.base_features)
        k = prov.neighbor_nodes.shape[1]
        offsets = np.zeros((prov.num_dynamic, k))
        drows = np.nonzero(prov.dynamic_index >= 0)[0]
        if drows.size:
            nb = prov.neighbor_nodes[drows]  # (Nd, K)
            wts = prov.neighbor_weights[drows]
            gf = grad_feat[drows]  # (Nd, D)
            np.add.at(base, nb.reshape(-1), (wts[..., None] * gf[:, None, :]).reshape(-1, d))
            # d w_i / d offset_k = active_k (delta_ik - w_i) / sum  (uniform
            # fallback rows have inv_sum 0 and receive no offset gradient).
            gw = np.einsum("nd,nkd->nk", gf, prov.base_features[nb])
            inner = np.sum(wts * gw, axis=1, keepdims=True)
            g_off = prov.active[drows] * prov.inv_sum[drows, None] * (gw - inner)
            offsets[prov.dynamic_index[drows]] = g_off
        grads.owned_latent = owned
        grads.base_features = base
        grads.weight_offsets = offsets
    return grads


def rasterize_scene(scene, camera: CameraModel, tau: int, **kwargs) -> RenderOutput:
    from .scene import scene_batch

    return rasterize(camera, scene_batch(scene, tau), scene.latent_dim, **kwargs)
