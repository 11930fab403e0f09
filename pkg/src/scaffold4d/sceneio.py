"""Scene persistence (versioned JSON), PPM image export, loss CSV export,
and PCA feature-map visualization.

Floats serialize through Python's repr (shortest exact decimal, at most 17
significant digits), so save/load round-trips are bitwise lossless.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .distill import DecoderMLP, TaskSpec
from .query import LabelSet
from .scaffold import ScaffoldGraph
from .scene import CameraModel, DynamicSet, GaussianScene, StaticSet
from .se3 import Quaternion, SE3Pose
from .worldgen import GroundTruth, OrbitSpec

SCHEMA_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent scene/config data."""


@dataclass
class SceneBundle:
    """Everything one scene file carries: the (possibly trained) scene, the
    per-task decoders, the query label set, the camera track, and optionally
    the synthetic ground truth it was generated from."""

    scene: GaussianScene
    decoders: dict[str, DecoderMLP]
    tasks: list[TaskSpec]
    label_set: LabelSet
    query_task: str
    cameras: list[CameraModel]
    background: tuple = (0.0, 0.0, 0.0)
    ground_truth: GroundTruth | None = None
    orbit: OrbitSpec | None = None


def _pose_list(pose: SE3Pose) -> list:
    q = pose.rotation
    t = pose.translation
    return [q.w, q.x, q.y, q.z, float(t[0]), float(t[1]), float(t[2])]


def _pose_from(vals) -> SE3Pose:
    return SE3Pose(Quaternion(*vals[:4]), np.asarray(vals[4:], dtype=float))


def _camera_dict(c: CameraModel) -> dict:
    return {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height, "pose": _pose_list(c.pose)}


def _camera_from(d) -> CameraModel:
    return CameraModel(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                       _pose_from(d["pose"]))


def _scene_dict(scene: GaussianScene) -> dict:
    s, d, g = scene.static, scene.dynamic, scene.scaffold
    return {
        "latent_dim": scene.latent_dim,
        "static": {
            "positions": s.positions.tolist(), "rotations": s.rotations.tolist(),
            "scales": s.scales.tolist(), "opacities": s.opacities.tolist(),
            "colors": s.colors.tolist(), "latents": s.latents.tolist(),
        },
        "dynamic": {
            "positions": d.positions.tolist(), "rotations": d.rotations.tolist(),
            "scales": d.scales.tolist(), "opacities": d.opacities.tolist(),
            "colors": d.colors.tolist(), "anchors": d.anchors.tolist(),
            "weight_offsets": d.weight_offsets.tolist(),
            "neighbor_weights": d.neighbor_weights.tolist(),
            "source_timesteps": d.source_timesteps.tolist(),
        },
        "scaffold": {
            "node_rotations": g.node_rotations.tolist(),
            "node_translations": g.node_translations.tolist(),
            "radii": g.radii.tolist(), "edges": g.edges.tolist(),
            "base_features": g.base_features.tolist(),
        },
    }


def _scene_from(doc: dict) -> GaussianScene:
    s, d, g = doc["static"], doc["dynamic"], doc["scaffold"]
    latent_dim = int(doc["latent_dim"])
    n_s = len(s["positions"])
    n_d = len(d["positions"])
    k = len(g["edges"][0]) if g["edges"] else 0
    static = StaticSet(
        np.asarray(s["positions"], dtype=float).reshape(n_s, 3),
        np.asarray(s["rotations"], dtype=float).reshape(n_s, 4),
        np.asarray(s["scales"], dtype=float).reshape(n_s, 3),
        np.asarray(s["opacities"], dtype=float).reshape(n_s),
        np.asarray(s["colors"], dtype=float).reshape(n_s, 3),
        np.asarray(s["latents"], dtype=float).reshape(n_s, latent_dim),
    )
    dynamic = DynamicSet(
        np.asarray(d["positions"], dtype=float).reshape(n_d, 3),
        np.asarray(d["rotations"], dtype=float).reshape(n_d, 4),
        np.asarray(d["scales"], dtype=float).reshape(n_d, 3),
        np.asarray(d["opacities"], dtype=float).reshape(n_d),
        np.asarray(d["colors"], dtype=float).reshape(n_d, 3),
        np.asarray(d["anchors"], dtype=np.int64).reshape(n_d),
        np.asarray(d["weight_offsets"], dtype=float).reshape(n_d, k),
        np.asarray(d["neighbor_weights"], dtype=float).reshape(n_d, k),
        np.asarray(d["source_timesteps"], dtype=np.int64).reshape(n_d),
    )
    scaffold = ScaffoldGraph(
        np.asarray(g["node_rotations"], dtype=float),
        np.asarray(g["node_translations"], dtype=float),
        np.asarray(g["radii"], dtype=float),
        np.asarray(g["edges"], dtype=np.int64),
        np.asarray(g["base_features"], dtype=float),
    )
    return GaussianScene(static, dynamic, scaffold, latent_dim)


def save_scene(path, bundle: SceneBundle) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "scene": _scene_dict(bundle.scene),
        "tasks": [
            {"name": t.name, "dim": t.dim, "height": t.height, "width": t.width, "resize": t.resize}
            for t in bundle.tasks
        ],
        "decoders": {
            name: {"weights": [w.tolist() for w in dec.weights],
                   "biases": [b.tolist() for b in dec.biases]}
            for name, dec in bundle.decoders.items()
        },
        "label_set": {"labels": bundle.label_set.labels,
                      "embeddings": bundle.label_set.embeddings.tolist()},
        "query_task": bundle.query_task,
        "cameras": [_camera_dict(c) for c in bundle.cameras],
        "background": [float(v) for v in bundle.background],
    }
    if bundle.orbit is not None:
        o = bundle.orbit
        doc["orbit"] = {"radius": o.radius, "height": o.height, "angle_start": o.angle_start,
                        "angle_end": o.angle_end, "focal": o.focal,
                        "look_at": [float(v) for v in o.look_at]}
    gt = bundle.ground_truth
    if gt is not None:
        doc["ground_truth"] = {
            "label_names": gt.label_names,
            "gaussian_labels": gt.gaussian_labels.tolist(),
            "embeddings": {name: e.tolist() for name, e in gt.embeddings.items()},
            "dynamic_label_indices": gt.dynamic_label_indices,
            "true_scene": _scene_dict(gt.true_scene),
        }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_scene(path) -> SceneBundle:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read scene file {path}: {exc}") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported scene schema version {doc.get('schema_version')!r}")
    try:
        scene = _scene_from(doc["scene"])
        tasks = [TaskSpec(t["name"], int(t["dim"]), int(t["height"]), int(t["width"]), t["resize"])
                 for t in doc["tasks"]]
        decoders = {
            name: DecoderMLP([np.asarray(w, dtype=float) for w in d["weights"]],
                             [np.asarray(b, dtype=float) for b in d["biases"]])
            for name, d in doc["decoders"].items()
        }
        label_set = LabelSet(doc["label_set"]["labels"],
                             np.asarray(doc["label_set"]["embeddings"], dtype=float))
        cameras = [_camera_from(c) for c in doc["cameras"]]
        background = tuple(doc.get("background", (0.0, 0.0, 0.0)))
        orbit = None
        if "orbit" in doc:
            o = doc["orbit"]
            orbit = OrbitSpec(o["radius"], o["height"], o["angle_start"], o["angle_end"],
                              o["focal"], tuple(o["look_at"]))
        gt = None
        if "ground_truth" in doc:
            gd = doc["ground_truth"]
            gt = GroundTruth(
                _scene_from(gd["true_scene"]),
                np.asarray(gd["gaussian_labels"], dtype=np.int64),
                list(gd["label_names"]),
                {name: np.asarray(e, dtype=float) for name, e in gd["embeddings"].items()},
                tasks, cameras, background, list(gd["dynamic_label_indices"]),
            )
        return SceneBundle(scene, decoders, tasks, label_set, doc["query_task"],
                           cameras, background, gt, orbit)
    except (KeyError, IndexError, TypeError) as exc:
        raise DataError(f"malformed scene file {path}: {exc!r}") from exc


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, maxval 255, rows top to bottom. Input floats in [0, 1]."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("write_ppm expects an (H, W, 3) image")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise DataError(f"{path} is not a binary PPM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        raw = fh.read(w * h * 3)
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(float) / maxval


# Fixed palette for indexed label images (repeats past 16 classes).
LABEL_PALETTE = np.array([
    (0.15, 0.15, 0.15), (0.9, 0.25, 0.2), (0.2, 0.7, 0.3), (0.25, 0.4, 0.9),
    (0.95, 0.8, 0.2), (0.7, 0.3, 0.8), (0.2, 0.8, 0.8), (0.95, 0.55, 0.15),
    (0.55, 0.35, 0.2), (0.8, 0.6, 0.8), (0.4, 0.5, 0.2), (0.3, 0.3, 0.7),
    (0.85, 0.45, 0.55), (0.45, 0.7, 0.6), (0.6, 0.6, 0.6), (0.95, 0.95, 0.9),
])


def label_image_rgb(labels: np.ndarray) -> np.ndarray:
    return LABEL_PALETTE[np.asarray(labels, dtype=int) % len(LABEL_PALETTE)]


def write_losses_csv(path, losses: list[dict]) -> None:
    keys: list[str] = []
    for row in losses:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(losses)


# ---------------------------------------------------------------------------
# PCA visualization
# ---------------------------------------------------------------------------


def pca_visualize(feature_map: np.ndarray, seed: int = 0) -> np.ndarray:
    """Three-component PCA image of a feature map.

    The PCA basis is fit on every third pixel vector (row-major) after mean
    centering, via covariance eigendecomposition; each component's sign is
    fixed so its largest-magnitude loading is positive. All pixels are then
    projected, each channel is clipped to its [1st, 99th] percentile and
    min-max normalized; a channel with no spread comes out all zeros. The
    seed is part of the interface for determinism bookkeeping; the
    eigendecomposition itself is deterministic and does not consume it.
    """
    fmap = np.asarray(feature_map, dtype=float)
    if fmap.ndim != 3 or fmap.shape[2] < 3:
        raise ValueError("pca_visualize expects (H, W, C) with C >= 3")
    h, w, c = fmap.shape
    flat = fmap.reshape(-1, c)
    sample = flat[::3]
    mean = sample.mean(axis=0)
    centered = sample - mean
    cov = centered.T @ centered / max(len(sample) - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    comps = eigvecs[:, ::-1][:, :3].T  # (3, C), descending eigenvalue
    for i in range(3):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    proj = (flat - mean) @ comps.T  # (HW, 3)
    out = np.zeros_like(proj)
    for ch in range(3):
        lo, hi = np.percentile(proj[:, ch], [1.0, 99.0])
        clipped = np.clip(proj[:, ch], lo, hi)
        span = clipped.max() - clipped.min()
        if span > 0:
            out[:, ch] = (clipped - clipped.min()) / span
    return out.reshape(h, w, 3)
