"""4D motion scaffold: trajectory nodes, KNN graph over trajectories,
interpolation weights, deformation queries, compact per-node base features,
and the geometric regularization losses with analytic gradients.

The graph stores node state as arrays (rotations (M, T, 4), translations
(M, T, 3)) so deformation queries over many Gaussians stay vectorized;
`TrajectoryNode` is the per-node value type used for construction and the
pairwise distance / KNN operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .se3 import (
    SE3Pose,
    Quaternion,
    WEIGHT_SUM_TOL,
    dqb,
    dqb_batch,
    pose_to_dq,
    relative_pose,
)

DEFAULT_K = 8


@dataclass
class TrajectoryNode:
    """One motion trajectory: a pose per timestep plus a control radius."""

    poses: list[SE3Pose]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("node radius must be positive")

    def translations(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])


def trajectory_distance(a: TrajectoryNode, b: TrajectoryNode) -> float:
    """Max over timesteps of the Euclidean distance between translations."""
    ta, tb = a.translations(), b.translations()
    if ta.shape != tb.shape:
        raise ValueError(f"trajectory length mismatch: {ta.shape[0]} vs {tb.shape[0]}")
    return float(np.max(np.linalg.norm(ta - tb, axis=-1)))


def build_knn(nodes: list[TrajectoryNode], k: int) -> np.ndarray:
    """(M, K) neighbor indices by smallest trajectory distance.

    Ties break toward the lower node index; self-edges excluded.
    """
    m = len(nodes)
    if k <= 0:
        raise ValueError("k must be positive")
    if k >= m:
        raise ValueError(f"k={k} must be smaller than node count {m}")
    trans = np.stack([n.translations() for n in nodes])  # (M, T, 3)
    diff = trans[:, None, :, :] - trans[None, :, :, :]
    dist = np.max(np.linalg.norm(diff, axis=-1), axis=-1)  # (M, M)
    np.fill_diagonal(dist, np.inf)
    idx = np.arange(m)
    edges = np.empty((m, k), dtype=np.int64)
    for i in range(m):
        order = np.lexsort((idx, dist[i]))
        edges[i] = order[:k]
    return edges


@dataclass
class GaussianBinding:
    """Attachment of one Gaussian to the scaffold: anchor node, cached
    neighbor weights, and learnable weight offsets."""

    anchor: int
    neighbor_weights: np.ndarray
    weight_offsets: np.ndarray

    def __post_init__(self):
        self.neighbor_weights = np.asarray(self.neighbor_weights, dtype=float)
        self.weight_offsets = np.asarray(self.weight_offsets, dtype=float)


@dataclass
class ScaffoldGraph:
    node_rotations: np.ndarray  # (M, T, 4) unit quaternions
    node_translations: np.ndarray  # (M, T, 3)
    radii: np.ndarray  # (M,)
    edges: np.ndarray  # (M, K)
    base_features: np.ndarray  # (M, D)

    def __post_init__(self):
        self.node_rotations = np.asarray(self.node_rotations, dtype=float)
        self.node_translations = np.asarray(self.node_translations, dtype=float)
        self.radii = np.asarray(self.radii, dtype=float)
        self.edges = np.asarray(self.edges, dtype=np.int64)
        self.base_features = np.asarray(self.base_features, dtype=float)
        self.validate()

    @property
    def num_nodes(self) -> int:
        return self.node_translations.shape[0]

    @property
    def num_timesteps(self) -> int:
        return self.node_translations.shape[1]

    @property
    def k(self) -> int:
        return self.edges.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.base_features.shape[1]

    def validate(self):
        m, t = self.node_translations.shape[:2]
        if self.node_rotations.shape != (m, t, 4):
            raise ValueError("node rotation array shape mismatch")
        if self.radii.shape != (m,):
            raise ValueError("radius array shape mismatch")
        if np.any(self.radii <= 0):
            raise ValueError("node radii must be positive")
        if self.edges.ndim != 2 or self.edges.shape[0] != m:
            raise ValueError("edge array shape mismatch")
        if self.base_features.shape[0] != m:
            raise ValueError("base feature row count must equal node count")
        if m:
            if np.any((self.edges < 0) | (self.edges >= m)):
                raise ValueError("edge index out of range")
            if np.any(self.edges == np.arange(m)[:, None]):
                raise ValueError("self-edges are not allowed")

    @staticmethod
    def from_nodes(nodes: list[TrajectoryNode], k: int, base_features: np.ndarray) -> "ScaffoldGraph":
        edges = build_knn(nodes, k)
        rot = np.stack([[p.rotation.as_array() for p in n.poses] for n in nodes])
        tr = np.stack([n.translations() for n in nodes])
        radii = np.array([n.radius for n in nodes], dtype=float)
        return ScaffoldGraph(rot, tr, radii, edges, np.asarray(base_features, dtype=float))

    def node(self, i: int) -> TrajectoryNode:
        poses = [
            SE3Pose(Quaternion.from_array(self.node_rotations[i, t]), self.node_translations[i, t].copy())
            for t in range(self.num_timesteps)
        ]
        return TrajectoryNode(poses, float(self.radii[i]))

    def node_pose(self, i: int, tau: int) -> SE3Pose:
        return SE3Pose(Quaternion.from_array(self.node_rotations[i, tau]), self.node_translations[i, tau].copy())

    def undirected_edge_pairs(self) -> np.ndarray:
        """(E, 2) unique undirected node pairs, sorted; used by the ARAP loss."""
        m = self.num_nodes
        src = np.repeat(np.arange(m), self.k)
        dst = self.edges.reshape(-1)
        lo = np.minimum(src, dst)
        hi = np.maximum(src, dst)
        pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
        return pairs

    def copy(self) -> "ScaffoldGraph":
        return ScaffoldGraph(
            self.node_rotations.copy(),
            self.node_translations.copy(),
            self.radii.copy(),
            self.edges.copy(),
            self.base_features.copy(),
        )


def nearest_node(x, tau: int, graph: ScaffoldGraph) -> int:
    """Index of the node whose translation at tau is nearest to x (ties -> lower index)."""
    if graph.num_nodes == 0:
        raise ValueError("nearest_node: empty graph")
    if not 0 <= tau < graph.num_timesteps:
        raise ValueError(f"timestep {tau} out of range")
    d = np.linalg.norm(graph.node_translations[:, tau] - np.asarray(x, dtype=float), axis=-1)
    return int(np.argmin(d))


def interp_weights(mu, tau: int, anchor: int, offsets, graph: ScaffoldGraph) -> np.ndarray:
    """Normalized interpolation weights over the anchor's K neighbors.

    raw_i = exp(-|mu - t_tau^(i)|^2 / (2 r_i)) + offset_i, clamped at 0 from
    below before normalizing. If every term clamps to 0 the weights fall back
    to uniform 1/K so the convex-combination invariant always holds.
    """
    w, _, _ = interp_weights_batch(
        np.asarray(mu, dtype=float)[None, :],
        np.full(1, tau, dtype=np.int64),
        np.full(1, anchor, dtype=np.int64),
        np.asarray(offsets, dtype=float)[None, :],
        graph,
    )
    return w[0]


def interp_weights_batch(
    mu: np.ndarray,
    taus: np.ndarray,
    anchors: np.ndarray,
    offsets: np.ndarray,
    graph: ScaffoldGraph,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized weights for N Gaussians.

    Returns (weights (N, K), active (N, K), inv_sum (N,)) where `active`
    marks terms that survived the clamp and `inv_sum` is 1/sum of clamped
    terms (0 on uniform-fallback rows). The two extras feed the offset
    gradient through the normalization Jacobian.
    """
    if np.any((taus < 0) | (taus >= graph.num_timesteps)):
        raise ValueError("timestep out of range")
    if np.any((anchors < 0) | (anchors >= graph.num_nodes)):
        raise ValueError("anchor index out of range")
    nb = graph.edges[anchors]  # (N, K)
    t_nb = graph.node_translations[nb, taus[:, None]]  # (N, K, 3)
    d2 = np.sum((mu[:, None, :] - t_nb) ** 2, axis=-1)
    raw = np.exp(-d2 / (2.0 * graph.radii[nb])) + offsets
    clamped = np.maximum(raw, 0.0)
    s = clamped.sum(axis=1)
    degenerate = s <= 0.0
    safe = np.where(degenerate, 1.0, s)
    weights = clamped / safe[:, None]
    if np.any(degenerate):
        weights[degenerate] = 1.0 / graph.k
    active = raw > 0.0
    inv_sum = np.where(degenerate, 0.0, 1.0 / safe)
    return weights, active, inv_sum


def relative_node_transforms(graph: ScaffoldGraph, tau: int, taup: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-node relative transform Q_taup . Q_tau^-1 as (quat (M, 4), trans (M, 3))."""
    for t in (tau, taup):
        if not 0 <= t < graph.num_timesteps:
            raise ValueError(f"timestep {t} out of range")
    return relative_pose(
        graph.node_rotations[:, taup],
        graph.node_translations[:, taup],
        graph.node_rotations[:, tau],
        graph.node_translations[:, tau],
    )


def warp_transform(mu, tau: int, taup: int, binding: GaussianBinding, graph: ScaffoldGraph) -> SE3Pose:
    """Blended relative transform carrying a Gaussian at mu from tau to taup."""
    nb = graph.edges[binding.anchor]
    rel_q, rel_t = relative_node_transforms(graph, tau, taup)
    transforms = [SE3Pose(Quaternion.from_array(rel_q[i]), rel_t[i]) for i in nb]
    return dqb(binding.neighbor_weights, transforms)


def warp_batch(
    graph: ScaffoldGraph,
    anchors: np.ndarray,
    weights: np.ndarray,
    tau: int,
    taup: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized warp transforms for N Gaussians sharing one (tau, taup) pair."""
    rel_q, rel_t = relative_node_transforms(graph, tau, taup)
    real, dual = pose_to_dq(rel_q, rel_t)
    nb = graph.edges[anchors]
    return dqb_batch(weights, real[nb], dual[nb])


def interp_feature(weights, neighbor_features) -> np.ndarray:
    """Convex combination of neighbor base features."""
    weights = np.asarray(weights, dtype=float)
    neighbor_features = np.asarray(neighbor_features, dtype=float)
    if weights.ndim != 1 or neighbor_features.ndim != 2 or weights.shape[0] != neighbor_features.shape[0]:
        raise ValueError("interp_feature: weights must match neighbor feature rows")
    if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError("interp_feature: weights must sum to 1")
    return weights @ neighbor_features


def arap_loss(graph: ScaffoldGraph) -> tuple[float, np.ndarray]:
    """Edge-length preservation between consecutive frames.

    loss = sum over undirected edges (i, j) and frames tau of
    (|t_tau^i - t_tau^j| - |t_{tau+1}^i - t_{tau+1}^j|)^2, with the analytic
    gradient w.r.t. node translations. Zero-length edges get a zero
    subgradient direction.
    """
    t = graph.node_translations
    if t.shape[1] < 2:
        raise ValueError("arap_loss requires at least 2 timesteps")
    pairs = graph.undirected_edge_pairs()
    grad = np.zeros_like(t)
    if pairs.size == 0:
        return 0.0, grad
    i, j = pairs[:, 0], pairs[:, 1]
    diff = t[i] - t[j]  # (E, T, 3)
    dist = np.linalg.norm(diff, axis=-1)  # (E, T)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[..., None] > 0.0, diff / np.where(dist[..., None] > 0.0, dist[..., None], 1.0), 0.0)
    delta = dist[:, :-1] - dist[:, 1:]  # (E, T-1)
    loss = float(np.sum(delta**2))
    # d loss / d t_tau^i gets +2 delta * unit_tau from the (tau, tau+1) term
    # and -2 delta * unit_tau from the (tau-1, tau) term.
    coeff = 2.0 * delta
    ge = np.zeros_like(diff)
    ge[:, :-1] += coeff[..., None] * unit[:, :-1]
    ge[:, 1:] -= coeff[..., None] * unit[:, 1:]
    np.add.at(grad, i, ge)
    np.add.at(grad, j, -ge)
    return loss, grad


def smoothness_losses(graph: ScaffoldGraph) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Velocity and acceleration penalties on node translations.

    velocity = sum |t_{tau+1} - t_tau|^2, acceleration = sum of squared
    second differences. Returns (velocity, acceleration, grad_v, grad_a).
    """
    t = graph.node_translations
    vel = t[:, 1:] - t[:, :-1]
    v_loss = float(np.sum(vel**2))
    grad_v = np.zeros_like(t)
    grad_v[:, 1:] += 2.0 * vel
    grad_v[:, :-1] -= 2.0 * vel

    grad_a = np.zeros_like(t)
    if t.shape[1] >= 3:
        acc = t[:, 2:] - 2.0 * t[:, 1:-1] + t[:, :-2]
        a_loss = float(np.sum(acc**2))
        grad_a[:, 2:] += 2.0 * acc
        grad_a[:, 1:-1] -= 4.0 * acc
        grad_a[:, :-2] += 2.0 * acc
    else:
        a_loss = 0.0
    return v_loss, a_loss, grad_v, grad_a
