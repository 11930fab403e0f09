"""Gaussian scene containers: static and dynamic sets, cameras, depth-map
back-projection, per-timestep warping and fusion into a render batch.

Sets are stored struct-of-arrays so warping and rasterization stay
vectorized; `Gaussian3D` is the per-element value type exposed by the
sequence protocol on the containers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scaffold import GaussianBinding, ScaffoldGraph, interp_weights_batch, nearest_node, warp_batch
from .se3 import Quaternion, SE3Pose, quat_mul, quat_rotate


@dataclass
class Gaussian3D:
    """One anisotropic Gaussian. `latent` is either an owned feature vector
    (static) or a GaussianBinding into the scaffold (dynamic)."""

    position: np.ndarray
    rotation: Quaternion
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    latent: np.ndarray | GaussianBinding
    source_timestep: int | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        if not 0.0 < self.opacity < 1.0:
            raise ValueError("opacity must lie strictly inside (0, 1)")
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be positive")


@dataclass
class CameraModel:
    """Pinhole camera; pose maps world points into the camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: SE3Pose = field(default_factory=SE3Pose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside image bounds")


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W) metric depths
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValueError("depth/validity shape mismatch")
        chosen = self.values[self.valid]
        if chosen.size and (not np.all(np.isfinite(chosen)) or np.any(chosen <= 0)):
            raise ValueError("valid depths must be finite and positive")


def backproject(depth: DepthMap, camera: CameraModel, mask: np.ndarray) -> np.ndarray:
    """World points for each selected pixel, row-major order. Pixel (u, v)
    with depth d lifts to d * ((u - cx)/fx, (v - cy)/fy, 1) in the camera
    frame and is carried to world space through the inverse camera pose.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.values.shape or mask.shape != (camera.height, camera.width):
        raise ValueError("mask/depth/camera dimensions disagree")
    pick = mask & depth.valid
    v_idx, u_idx = np.nonzero(pick)
    if v_idx.size == 0:
        return np.zeros((0, 3))
    d = depth.values[v_idx, u_idx]
    x = d * (u_idx - camera.cx) / camera.fx
    y = d * (v_idx - camera.cy) / camera.fy
    pts_cam = np.stack([x, y, d], axis=-1)
    inv = camera.pose.inverse()
    rot = np.broadcast_to(inv.rotation.as_array(), (pts_cam.shape[0], 4))
    return quat_rotate(rot, pts_cam) + inv.translation


class _SoaMixin:
    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class StaticSet(_SoaMixin):
    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    scales: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)
    latents: np.ndarray  # (N, D) owned features

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.positions[i].copy(),
            Quaternion.from_array(self.rotations[i]),
            self.scales[i].copy(),
            float(self.opacities[i]),
            self.colors[i].copy(),
            self.latents[i].copy(),
        )

    @staticmethod
    def empty(latent_dim: int) -> "StaticSet":
        return StaticSet(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
            np.zeros((0, latent_dim)),
        )

    def copy(self) -> "StaticSet":
        return StaticSet(*(a.copy() for a in (self.positions, self.rotations, self.scales,
                                              self.opacities, self.colors, self.latents)))


@dataclass
class DynamicSet(_SoaMixin):
    """Dynamic Gaussians at their source timestep; features come from the
    scaffold (weights over neighbor base features), never owned."""

    positions: np.ndarray  # (N, 3) at the source timestep
    rotations: np.ndarray  # (N, 4)
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    anchors: np.ndarray  # (N,) scaffold node index
    weight_offsets: np.ndarray  # (N, K) learnable
    neighbor_weights: np.ndarray  # (N, K) cache, refreshed from offsets
    source_timesteps: np.ndarray  # (N,)

    def __getitem__(self, i: int) -> Gaussian3D:
        binding = GaussianBinding(
            int(self.anchors[i]), self.neighbor_weights[i].copy(), self.weight_offsets[i].copy()
        )
        return Gaussian3D(
            self.positions[i].copy(),
            Quaternion.from_array(self.rotations[i]),
            self.scales[i].copy(),
            float(self.opacities[i]),
            self.colors[i].copy(),
            binding,
            source_timestep=int(self.source_timesteps[i]),
        )

    @staticmethod
    def empty(k: int) -> "DynamicSet":
        return DynamicSet(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
            np.zeros(0, dtype=np.int64), np.zeros((0, k)), np.zeros((0, k)),
            np.zeros(0, dtype=np.int64),
        )

    def copy(self) -> "DynamicSet":
        return DynamicSet(*(a.copy() for a in (
            self.positions, self.rotations, self.scales, self.opacities, self.colors,
            self.anchors, self.weight_offsets, self.neighbor_weights, self.source_timesteps)))


@dataclass
class GaussianScene:
    static: StaticSet
    dynamic: DynamicSet
    scaffold: ScaffoldGraph
    latent_dim: int

    def __len__(self) -> int:
        return len(self.static) + len(self.dynamic)

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.static.copy(), self.dynamic.copy(), self.scaffold.copy(), self.latent_dim)


@dataclass
class FeatureProvenance:
    """Gradient-routing record for the resolved features of a render batch.

    Row i of the batch is either static (owned latent at static_index[i]) or
    dynamic (convex combination of base features over neighbor_nodes[i]).
    `active` and `inv_sum` carry the weight-normalization Jacobian data.
    """

    static_index: np.ndarray  # (N,) index into the static set, -1 for dynamic rows
    dynamic_index: np.ndarray  # (N,) index into the dynamic set, -1 for static rows
    neighbor_nodes: np.ndarray  # (N, K), -1 rows for static
    neighbor_weights: np.ndarray  # (N, K)
    active: np.ndarray  # (N, K) bool
    inv_sum: np.ndarray  # (N,)
    base_features: np.ndarray  # (M, D) scaffold features referenced by dynamic rows
    num_static: int
    num_dynamic: int


@dataclass
class RenderBatch(_SoaMixin):
    """Resolved, render-ready Gaussians (sequence of Gaussian3D)."""

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    features: np.ndarray  # (N, D) materialized
    provenance: FeatureProvenance | None = None

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.positions[i].copy(),
            Quaternion.from_array(self.rotations[i]),
            self.scales[i].copy(),
            float(self.opacities[i]),
            self.colors[i].copy(),
            self.features[i].copy(),
        )

    @staticmethod
    def from_gaussians(gaussians: list[Gaussian3D]) -> "RenderBatch":
        if not gaussians:
            return RenderBatch(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                               np.zeros(0), np.zeros((0, 3)), np.zeros((0, 0)))
        feats = []
        for g in gaussians:
            if isinstance(g.latent, GaussianBinding):
                raise ValueError("render batch requires materialized features")
            feats.append(np.asarray(g.latent, dtype=float))
        return RenderBatch(
            np.stack([g.position for g in gaussians]),
            np.stack([g.rotation.as_array() for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.array([g.opacity for g in gaussians], dtype=float),
            np.stack([g.color for g in gaussians]),
            np.stack(feats),
        )


def bind_to_scaffold(
    positions: np.ndarray,
    source_timesteps: np.ndarray,
    graph: ScaffoldGraph,
    weight_offsets: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Anchor each position to its nearest node and compute neighbor weights."""
    n = positions.shape[0]
    anchors = np.empty(n, dtype=np.int64)
    for i in range(n):
        anchors[i] = nearest_node(positions[i], int(source_timesteps[i]), graph)
    if weight_offsets is None:
        weight_offsets = np.zeros((n, graph.k))
    weights, _, _ = interp_weights_batch(positions, source_timesteps, anchors, weight_offsets, graph)
    return anchors, weights


def refresh_bindings(scene: GaussianScene) -> None:
    """Recompute cached neighbor weights from current offsets (anchor fixed)."""
    dyn = scene.dynamic
    if len(dyn) == 0:
        return
    weights, _, _ = interp_weights_batch(
        dyn.positions, dyn.source_timesteps, dyn.anchors, dyn.weight_offsets, scene.scaffold
    )
    dyn.neighbor_weights = weights


def warp_dynamic(scene: GaussianScene, taup: int) -> RenderBatch:
    """Dynamic Gaussians carried to timestep taup with resolved features.

    Positions and rotations get the blended scaffold transform from each
    Gaussian's source timestep; scale, opacity, and color pass through.
    Source data is never mutated.
    """
    dyn = scene.dynamic
    graph = scene.scaffold
    if not 0 <= taup < graph.num_timesteps:
        raise ValueError(f"target timestep {taup} out of range")
    n = len(dyn)
    if n == 0:
        return RenderBatch(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
            np.zeros((0, scene.latent_dim)),
            provenance=_make_provenance(scene, np.zeros(0, dtype=np.int64), 0),
        )
    weights, active, inv_sum = interp_weights_batch(
        dyn.positions, dyn.source_timesteps, dyn.anchors, dyn.weight_offsets, graph
    )
    dyn.neighbor_weights = weights
    positions = np.empty_like(dyn.positions)
    rotations = np.empty_like(dyn.rotations)
    # One vectorized blend per distinct source timestep.
    for tau in np.unique(dyn.source_timesteps):
        sel = dyn.source_timesteps == tau
        q, t = warp_batch(graph, dyn.anchors[sel], weights[sel], int(tau), taup)
        positions[sel] = quat_rotate(q, dyn.positions[sel]) + t
        rotations[sel] = quat_mul(q, dyn.rotations[sel])
    nb = graph.edges[dyn.anchors]
    features = np.einsum("nk,nkd->nd", weights, graph.base_features[nb])
    prov = FeatureProvenance(
        static_index=np.full(n, -1, dtype=np.int64),
        dynamic_index=np.arange(n, dtype=np.int64),
        neighbor_nodes=nb,
        neighbor_weights=weights,
        active=active,
        inv_sum=inv_sum,
        base_features=graph.base_features,
        num_static=0,
        num_dynamic=n,
    )
    return RenderBatch(positions, rotations, dyn.scales.copy(), dyn.opacities.copy(),
                       dyn.colors.copy(), features, provenance=prov)


def _make_provenance(scene: GaussianScene, dynamic_rows: np.ndarray, n_dyn: int) -> FeatureProvenance:
    k = scene.scaffold.k
    return FeatureProvenance(
        static_index=np.full(0, -1, dtype=np.int64),
        dynamic_index=dynamic_rows,
        neighbor_nodes=np.zeros((0, k), dtype=np.int64),
        neighbor_weights=np.zeros((0, k)),
        active=np.zeros((0, k), dtype=bool),
        inv_sum=np.zeros(0),
        base_features=scene.scaffold.base_features,
        num_static=0,
        num_dynamic=n_dyn,
    )


def static_batch(static: StaticSet) -> RenderBatch:
    n = len(static)
    prov = FeatureProvenance(
        static_index=np.arange(n, dtype=np.int64),
        dynamic_index=np.full(n, -1, dtype=np.int64),
        neighbor_nodes=np.full((n, 0), -1, dtype=np.int64),
        neighbor_weights=np.zeros((n, 0)),
        active=np.zeros((n, 0), dtype=bool),
        inv_sum=np.zeros(n),
        base_features=np.zeros((0, static.latents.shape[1])),
        num_static=n,
        num_dynamic=0,
    )
    return RenderBatch(
        static.positions.copy(), static.rotations.copy(), static.scales.copy(),
        static.opacities.copy(), static.colors.copy(), static.latents.copy(), provenance=prov,
    )


def fuse(static: StaticSet | RenderBatch, warped: RenderBatch) -> RenderBatch:
    """Concatenate static Gaussians (first) with a warped dynamic batch."""
    sb = static if isinstance(static, RenderBatch) else static_batch(static)
    if len(sb) and len(warped) and sb.features.shape[1] != warped.features.shape[1]:
        raise ValueError("latent dimension mismatch between static and dynamic sets")
    ns, nd = len(sb), len(warped)
    if ns == 0:
        return warped
    if nd == 0:
        return sb
    pa, pb = sb.provenance, warped.provenance
    prov = None
    if pa is not None and pb is not None:
        k = max(pa.neighbor_nodes.shape[1], pb.neighbor_nodes.shape[1])

        def pad(a, fill):
            if a.shape[1] == k:
                return a
            out = np.full((a.shape[0], k), fill, dtype=a.dtype)
            out[:, : a.shape[1]] = a
            return out

        prov = FeatureProvenance(
            static_index=np.concatenate([pa.static_index, pb.static_index]),
            dynamic_index=np.concatenate([pa.dynamic_index, pb.dynamic_index]),
            neighbor_nodes=np.concatenate([pad(pa.neighbor_nodes, -1), pad(pb.neighbor_nodes, -1)]),
            neighbor_weights=np.concatenate([pad(pa.neighbor_weights, 0.0), pad(pb.neighbor_weights, 0.0)]),
            active=np.concatenate([pad(pa.active, False), pad(pb.active, False)]),
            inv_sum=np.concatenate([pa.inv_sum, pb.inv_sum]),
            base_features=pb.base_features if pb.base_features.size else pa.base_features,
            num_static=pa.num_static + pb.num_static,
            num_dynamic=pa.num_dynamic + pb.num_dynamic,
        )
    return RenderBatch(
        np.concatenate([sb.positions, warped.positions]),
        np.concatenate([sb.rotations, warped.rotations]),
        np.concatenate([sb.scales, warped.scales]),
        np.concatenate([sb.opacities, warped.opacities]),
        np.concatenate([sb.colors, warped.colors]),
        np.concatenate([sb.features, warped.features]),
        provenance=prov,
    )


def scene_batch(scene: GaussianScene, taup: int) -> RenderBatch:
    """Full render batch for timestep taup: static set fused with warped dynamics."""
    return fuse(scene.static, warp_dynamic(scene, taup))
