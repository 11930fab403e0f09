"""Open-vocabulary scoring of Gaussians and pixels against label embeddings,
mask construction, edit application, and segmentation metrics.

Scores are softmaxed cosine similarities (no temperature). Per-Gaussian
features for scoring come from decoding each Gaussian's latent (owned or
scaffold-interpolated) directly in 3D, not from rendered maps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .distill import DecoderMLP, decoder_forward
from .scene import GaussianScene

UNIT_ROW_TOL = 1e-6


@dataclass
class LabelSet:
    labels: list[str]
    embeddings: np.ndarray  # (C, D_s), unit rows

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=float)
        if len(self.labels) != self.embeddings.shape[0]:
            raise ValueError("one embedding row per label required")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("label names must be unique")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_ROW_TOL):
            raise ValueError("embedding rows must be unit norm")

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown label {label!r}") from None

    def indices(self, labels) -> list[int]:
        if isinstance(labels, str):
            labels = [labels]
        return [self.index(l) for l in labels]


@dataclass
class ScoreMatrix:
    probs: np.ndarray  # (N, C) softmax rows
    degenerate_rows: np.ndarray  # (N,) True where the feature had zero norm
    label_set: LabelSet


def _cosine(features: np.ndarray, labels: LabelSet) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=float)
    norms = np.linalg.norm(features, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    return (features / safe[:, None]) @ labels.embeddings.T, zero


def score_gaussians(features: np.ndarray, labels: LabelSet) -> ScoreMatrix:
    """Row-softmaxed cosine similarities against every label.

    Zero-norm feature rows cannot be scored; they receive uniform 1/C and a
    warning flag.
    """
    cos, zero = _cosine(features, labels)
    if np.any(zero):
        warnings.warn(f"{int(zero.sum())} zero-norm feature rows scored as uniform", stacklevel=2)
    shifted = cos - cos.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    if np.any(zero):
        probs[zero] = 1.0 / len(labels)
    return ScoreMatrix(probs, zero, labels)


def gaussian_features(scene: GaussianScene, decoder: DecoderMLP) -> np.ndarray:
    """Task-space features for every Gaussian (static first, then dynamic),
    obtained by decoding latents directly in 3D."""
    nb = scene.scaffold.edges[scene.dynamic.anchors]
    dyn_latents = np.einsum("nk,nkd->nd", scene.dynamic.neighbor_weights,
                            scene.scaffold.base_features[nb]) if len(scene.dynamic) else \
        np.zeros((0, scene.latent_dim))
    latents = np.concatenate([scene.static.latents, dyn_latents], axis=0)
    return decoder_forward(decoder, latents)


def threshold_mask(scores: ScoreMatrix, labels_or_names, th: float) -> np.ndarray:
    """Gaussians whose probability for any target label reaches th."""
    cols = scores.label_set.indices(labels_or_names)
    return np.any(scores.probs[:, cols] >= th, axis=1)


def argmax_mask(scores: ScoreMatrix, labels_or_names) -> np.ndarray:
    """Gaussians whose highest-probability label is a target label."""
    cols = scores.label_set.indices(labels_or_names)
    best = np.argmax(scores.probs, axis=1)
    return np.isin(best, cols)


def hybrid_mask(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("mask shape mismatch")
    return a | b


@dataclass
class EditConfig:
    operation: str  # extract | delete | recolor
    targets: list[str]
    threshold: float = 0.5
    recolor: np.ndarray | None = None

    def __post_init__(self):
        if self.operation not in ("extract", "delete", "recolor"):
            raise ValueError(f"unknown edit operation {self.operation!r}")
        if not self.targets:
            raise ValueError("edit requires at least one target label")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.operation == "recolor":
            if self.recolor is None:
                raise ValueError("recolor requires a color")
            self.recolor = np.asarray(self.recolor, dtype=float).reshape(3)


def _subset_scene(scene: GaussianScene, keep: np.ndarray) -> GaussianScene:
    ns = len(scene.static)
    ks, kd = keep[:ns], keep[ns:]
    out = scene.copy()
    s, d = out.static, out.dynamic
    s.positions, s.rotations, s.scales = s.positions[ks], s.rotations[ks], s.scales[ks]
    s.opacities, s.colors, s.latents = s.opacities[ks], s.colors[ks], s.latents[ks]
    d.positions, d.rotations, d.scales = d.positions[kd], d.rotations[kd], d.scales[kd]
    d.opacities, d.colors = d.opacities[kd], d.colors[kd]
    d.anchors, d.weight_offsets = d.anchors[kd], d.weight_offsets[kd]
    d.neighbor_weights, d.source_timesteps = d.neighbor_weights[kd], d.source_timesteps[kd]
    return out


def apply_edit(scene: GaussianScene, mask: np.ndarray, config: EditConfig) -> GaussianScene:
    """Edited copy of the scene; the input is never modified.

    extract keeps only masked Gaussians, delete removes them, recolor
    replaces masked colors and leaves everything else untouched.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(scene),):
        raise ValueError(f"mask length {mask.shape} does not match scene size {len(scene)}")
    if config.operation == "extract":
        return _subset_scene(scene, mask)
    if config.operation == "delete":
        return _subset_scene(scene, ~mask)
    out = scene.copy()
    ns = len(scene.static)
    out.static.colors[mask[:ns]] = config.recolor
    out.dynamic.colors[mask[ns:]] = config.recolor
    return out


def segment_feature_map(feature_map: np.ndarray, labels: LabelSet) -> np.ndarray:
    """Per-pixel argmax of cosine scores (ties and zero features resolve to
    the lowest label index)."""
    h, w, _ = feature_map.shape
    cos, _ = _cosine(feature_map.reshape(h * w, -1), labels)
    return np.argmax(cos, axis=1).reshape(h, w)


def miou_accuracy(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[float, float]:
    """Mean IoU over classes present in gt, plus pixel accuracy."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("prediction/ground truth shape mismatch")
    ious = []
    for c in range(num_classes):
        gt_c = gt == c
        if not np.any(gt_c):
            continue
        pred_c = pred == c
        union = np.logical_or(gt_c, pred_c).sum()
        inter = np.logical_and(gt_c, pred_c).sum()
        ious.append(inter / union)
    accuracy = float(np.mean(pred == gt))
    return float(np.mean(ious)) if ious else 0.0, accuracy
