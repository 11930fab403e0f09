"""Feature distillation: per-task decoder MLPs with manual forward/backward,
photometric and feature losses, map resizing, a from-scratch Adam, and the
three-stage training loop (static appearance, scaffold geometry, joint
appearance + feature optimization).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rasterizer
from .scaffold import arap_loss, smoothness_losses
from .scene import CameraModel, GaussianScene, scene_batch, static_batch


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


# ---------------------------------------------------------------------------
# Decoder MLP
# ---------------------------------------------------------------------------


@dataclass
class DecoderMLP:
    """Three affine layers widening D -> 2D -> 4D -> out_dim, rectifier
    between layers, linear output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self._cache = None

    @staticmethod
    def create(latent_dim: int, out_dim: int, rng: np.random.Generator) -> "DecoderMLP":
        widths = [latent_dim, 2 * latent_dim, 4 * latent_dim, out_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return DecoderMLP(weights, biases)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def num_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "DecoderMLP":
        return DecoderMLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def decoder_forward(dec: DecoderMLP, latents: np.ndarray) -> np.ndarray:
    """Row-wise decode of an (N, D) latent matrix; caches activations on the
    decoder for the matching backward call."""
    latents = np.asarray(latents, dtype=float)
    if latents.ndim != 2 or latents.shape[1] != dec.weights[0].shape[0]:
        raise ValueError(
            f"decoder expects (N, {dec.weights[0].shape[0]}) input, got {latents.shape}"
        )
    acts = [latents]
    x = latents
    last = len(dec.weights) - 1
    for i, (w, b) in enumerate(zip(dec.weights, dec.biases)):
        x = x @ w + b
        if i < last:
            x = np.maximum(x, 0.0)
        acts.append(x)
    dec._cache = acts
    return x


def decoder_backward(dec: DecoderMLP, latents: np.ndarray, upstream: np.ndarray):
    """Reverse-mode gradients: ((weight grads, bias grads), input grads)."""
    if dec._cache is None:
        raise RuntimeError("decoder_backward: no cached forward activations")
    acts = dec._cache
    if acts[0].shape != latents.shape:
        raise RuntimeError("decoder_backward: cache does not match the given latents")
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != acts[-1].shape:
        raise ValueError("upstream gradient shape mismatch")
    grad_w = [None] * len(dec.weights)
    grad_b = [None] * len(dec.biases)
    g = upstream
    last = len(dec.weights) - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * (acts[i + 1] > 0.0)
        grad_w[i] = acts[i].T @ g
        grad_b[i] = g.sum(axis=0)
        g = g @ dec.weights[i].T
    return (grad_w, grad_b), g


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def feature_loss(decoded: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries, with its gradient."""
    decoded = np.asarray(decoded, dtype=float)
    target = np.asarray(target, dtype=float)
    if decoded.shape != target.shape:
        raise ValueError(f"shape mismatch: {decoded.shape} vs {target.shape}")
    diff = decoded - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def photometric_loss(rendered: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error with the sign subgradient (zero at ties)."""
    rendered = np.asarray(rendered, dtype=float)
    target = np.asarray(target, dtype=float)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    n = diff.size
    return float(np.sum(np.abs(diff)) / n), np.sign(diff) / n


def masked_photometric_loss(rendered, target, mask) -> tuple[float, np.ndarray]:
    """MAE restricted to masked pixels; gradient is dense (zero off-mask)."""
    diff = rendered - target
    m = np.asarray(mask, dtype=bool)
    if m.shape != diff.shape[:2]:
        raise ValueError("mask shape mismatch")
    count = int(m.sum()) * diff.shape[2]
    grad = np.zeros_like(diff)
    if count == 0:
        return 0.0, grad
    grad[m] = np.sign(diff[m]) / count
    return float(np.sum(np.abs(diff[m])) / count), grad


def masked_feature_loss(decoded, target, mask) -> tuple[float, np.ndarray]:
    diff = decoded - target
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum()) * diff.shape[2]
    grad = np.zeros_like(diff)
    if count == 0:
        return 0.0, grad
    grad[m] = 2.0 * diff[m] / count
    return float(np.sum(diff[m] ** 2) / count), grad


# ---------------------------------------------------------------------------
# Resizing (separable weight matrices; both methods preserve constants)
# ---------------------------------------------------------------------------


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    w = np.zeros((n_out, n_in))
    # Half-pixel-centered sampling, clamped at the borders.
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    w[np.arange(n_out), lo] += 1.0 - frac
    w[np.arange(n_out), hi] += frac
    return w


def _area_matrix(n_out: int, n_in: int) -> np.ndarray:
    # Exact fractional coverage of output cell i over input cells.
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        a, b = i * scale, (i + 1) * scale
        k0, k1 = int(np.floor(a)), int(np.ceil(b))
        for k in range(k0, min(k1, n_in)):
            w[i, k] = (min(b, k + 1) - max(a, k)) / scale
    return w


def _apply_separable(fmap: np.ndarray, my: np.ndarray, mx: np.ndarray) -> np.ndarray:
    """out[o, p, c] = sum_{h, w} my[o, h] mx[p, w] fmap[h, w, c] via two matmuls."""
    h, w, c = fmap.shape
    oh, ow = my.shape[0], mx.shape[0]
    rows = (my @ fmap.reshape(h, w * c)).reshape(oh, w, c)
    cols = mx @ rows.transpose(1, 0, 2).reshape(w, oh * c)
    return cols.reshape(ow, oh, c).transpose(1, 0, 2)


def _resize(fmap: np.ndarray, out_h: int, out_w: int, matrix_fn) -> np.ndarray:
    fmap = np.asarray(fmap, dtype=float)
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output dimensions must be positive")
    h, w = fmap.shape[:2]
    if (out_h, out_w) == (h, w):
        return fmap.copy()
    return _apply_separable(fmap, matrix_fn(out_h, h), matrix_fn(out_w, w))


def resize_bilinear(fmap: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return _resize(fmap, out_h, out_w, _bilinear_matrix)


def resize_area(fmap: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return _resize(fmap, out_h, out_w, _area_matrix)


def resize_backward(grad_out: np.ndarray, in_h: int, in_w: int, mode: str) -> np.ndarray:
    """Adjoint of the separable resize: routes output-space gradients back to
    the input grid."""
    grad_out = np.asarray(grad_out, dtype=float)
    out_h, out_w = grad_out.shape[:2]
    if (out_h, out_w) == (in_h, in_w):
        return grad_out.copy()
    fn = _bilinear_matrix if mode == "bilinear" else _area_matrix
    my = fn(out_h, in_h)
    mx = fn(out_w, in_w)
    return _apply_separable(grad_out, my.T, mx.T)


def resize_map(fmap, out_h, out_w, mode: str) -> np.ndarray:
    if mode == "bilinear":
        return resize_bilinear(fmap, out_h, out_w)
    if mode == "area":
        return resize_area(fmap, out_h, out_w)
    raise ValueError(f"unknown resize mode {mode!r}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_param(param: np.ndarray, lr: float) -> "AdamState":
        return AdamState(np.zeros_like(param, dtype=float), np.zeros_like(param, dtype=float), lr=lr)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Bias-corrected adaptive-moment update; mutates state, returns new params."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape:
        raise ValueError("gradient shape mismatch")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TaskSpec:
    """One distillation head: name, target feature dim, target map resolution,
    and the resize mode used to align rendered maps with targets."""

    name: str
    dim: int
    height: int
    width: int
    resize: str = "bilinear"


@dataclass
class TrainConfig:
    static_iterations: int = 400
    geometric_iterations: int = 500
    dynamic_iterations: int = 1000
    lr_colors: float = 1e-2
    lr_opacity: float = 1e-2
    lr_features: float = 1e-2
    lr_decoder: float = 1e-3
    lr_scaffold: float = 1e-3
    lr_offsets: float = 1e-3
    weight_photometric: float = 1.0
    weight_feature: float = 1.0
    weight_arap: float = 1.0
    weight_velocity: float = 0.1
    weight_acceleration: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    tasks: list | None = None  # task names to supervise; None = all scene tasks

    def validate(self):
        for name in ("static_iterations", "geometric_iterations", "dynamic_iterations"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in (
            "weight_photometric", "weight_feature", "weight_arap",
            "weight_velocity", "weight_acceleration",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def select_tasks(self, available: list[TaskSpec]) -> list[TaskSpec]:
        if self.tasks is None:
            return list(available)
        by_name = {t.name: t for t in available}
        missing = [n for n in self.tasks if n not in by_name]
        if missing:
            raise ValueError(f"unknown task names in config: {missing}")
        return [by_name[n] for n in self.tasks]


@dataclass
class TrainTargets:
    """Per-frame supervision: RGB frames, per-task feature maps at target
    resolution, and static-region masks for the first stage."""

    rgb: list[np.ndarray]
    features: dict[str, list[np.ndarray]]  # task name -> per-frame maps
    static_masks: list[np.ndarray]


@dataclass
class TrainResult:
    losses: list[dict]

    def series(self, stage: str, key: str) -> np.ndarray:
        return np.array([row[key] for row in self.losses if row["stage"] == stage])


OPACITY_MIN = 1e-3
OPACITY_MAX = 1.0 - 1e-3


def _check_finite(stage: str, it: int, **values):
    for name, val in values.items():
        if not np.isfinite(val):
            raise NumericalError(f"non-finite {name} loss at {stage} iteration {it}: {val!r}")


def _feature_pass(output, decoders, tasks, targets, frame, weight, mask_by_task=None):
    """Decode the rendered latent map per task, compare against targets, and
    return (total loss, upstream gradient on the rendered latent map).

    The rendered map is resized to the target resolution before decoding, so
    the decode cost tracks the target grid and the resize adjoint feeds the
    latent-map gradient.
    """
    h, w, d = output.feature.shape
    grad_latent = np.zeros_like(output.feature)
    total = 0.0
    for task in tasks:
        dec = decoders[task.name]
        latent_small = resize_map(output.feature, task.height, task.width, task.resize)
        flat = latent_small.reshape(-1, d)
        decoded = decoder_forward(dec, flat).reshape(task.height, task.width, task.dim)
        target = targets.features[task.name][frame]
        if mask_by_task is None:
            loss, grad_dec = feature_loss(decoded, target)
        else:
            loss, grad_dec = masked_feature_loss(decoded, target, mask_by_task[task.name])
        total += loss
        (gw, gb), g_in = decoder_backward(dec, flat, weight * grad_dec.reshape(-1, task.dim))
        task._grad_w, task._grad_b = gw, gb  # stashed for the caller's update step
        grad_latent += resize_backward(g_in.reshape(task.height, task.width, d), h, w, task.resize)
    return total, grad_latent


def train(
    scene: GaussianScene,
    scaffold,
    decoders: dict[str, DecoderMLP],
    tasks: list[TaskSpec],
    cameras: list[CameraModel],
    targets: TrainTargets,
    cfg: TrainConfig,
) -> TrainResult:
    """Three-stage optimization, in place on `scene`, `scaffold`, `decoders`.

    Stage 1 fits static Gaussian color/opacity/latents against static pixels;
    stage 2 relaxes scaffold translations under the geometric losses; stage 3
    jointly optimizes appearance, owned latents, base features, weight
    offsets, and decoders under photometric + feature losses on full frames.
    """
    cfg.validate()
    if scaffold is not scene.scaffold:
        raise ValueError("scaffold must be the scene's scaffold")
    tasks = cfg.select_tasks(tasks)
    num_frames = len(cameras)
    if len(targets.rgb) != num_frames:
        raise ValueError("one target RGB frame per camera is required")
    for task in tasks:
        if task.name not in decoders:
            raise ValueError(f"missing decoder for task {task.name!r}")
        if task.name not in targets.features:
            raise ValueError(f"missing targets for task {task.name!r}")
    losses: list[dict] = []
    bg = cfg.background

    # --- stage 1: static appearance/latents on static pixels ---------------
    static = scene.static
    opt = {
        "colors": AdamState.for_param(static.colors, cfg.lr_colors),
        "opacities": AdamState.for_param(static.opacities, cfg.lr_opacity),
        "latents": AdamState.for_param(static.latents, cfg.lr_features),
    }
    task_masks_cache = {}
    for it in range(cfg.static_iterations):
        frame = it % num_frames
        mask = targets.static_masks[frame]
        if frame not in task_masks_cache:
            task_masks_cache[frame] = {
                t.name: resize_map(mask[..., None].astype(float), t.height, t.width, t.resize)[..., 0] >= 0.999
                for t in tasks
            }
        out = rasterizer.rasterize(cameras[frame], static_batch(static), scene.latent_dim, background=bg)
        ploss, grad_rgb = masked_photometric_loss(out.rgb, targets.rgb[frame], mask)
        floss, grad_latent = _feature_pass(out, decoders, tasks, targets, frame,
                                           cfg.weight_feature, task_masks_cache[frame])
        _check_finite("static", it, photometric=ploss, feature=floss)
        grads = rasterizer.rasterize_backward(out, cfg.weight_photometric * grad_rgb, grad_latent)
        static.colors = np.clip(adam_step(opt["colors"], static.colors, grads.color), 0.0, 1.0)
        static.opacities = np.clip(
            adam_step(opt["opacities"], static.opacities, grads.opacity), OPACITY_MIN, OPACITY_MAX
        )
        static.latents = adam_step(opt["latents"], static.latents, grads.owned_latent)
        losses.append({"stage": "static", "iteration": it, "photometric": ploss, "feature": floss,
                       "total": cfg.weight_photometric * ploss + cfg.weight_feature * floss})

    # --- stage 2: scaffold translations under geometric losses -------------
    opt_nodes = AdamState.for_param(scaffold.node_translations, cfg.lr_scaffold)
    for it in range(cfg.geometric_iterations):
        a_loss, a_grad = arap_loss(scaffold)
        v_loss, acc_loss, v_grad, acc_grad = smoothness_losses(scaffold)
        _check_finite("geometric", it, arap=a_loss, velocity=v_loss, acceleration=acc_loss)
        grad = cfg.weight_arap * a_grad + cfg.weight_velocity * v_grad + cfg.weight_acceleration * acc_grad
        scaffold.node_translations = adam_step(opt_nodes, scaffold.node_translations, grad)
        losses.append({"stage": "geometric", "iteration": it, "arap": a_loss, "velocity": v_loss,
                       "acceleration": acc_loss,
                       "total": cfg.weight_arap * a_loss + cfg.weight_velocity * v_loss
                       + cfg.weight_acceleration * acc_loss})

    # --- stage 3: joint photometric + feature optimization ------------------
    dyn = scene.dynamic
    opt3 = {
        "s_colors": AdamState.for_param(static.colors, cfg.lr_colors),
        "s_opacities": AdamState.for_param(static.opacities, cfg.lr_opacity),
        "s_latents": AdamState.for_param(static.latents, cfg.lr_features),
        "d_colors": AdamState.for_param(dyn.colors, cfg.lr_colors),
        "d_opacities": AdamState.for_param(dyn.opacities, cfg.lr_opacity),
        "base": AdamState.for_param(scaffold.base_features, cfg.lr_features),
        "offsets": AdamState.for_param(dyn.weight_offsets, cfg.lr_offsets),
    }
    opt_dec = {
        t.name: (
            [AdamState.for_param(w, cfg.lr_decoder) for w in decoders[t.name].weights],
            [AdamState.for_param(b, cfg.lr_decoder) for b in decoders[t.name].biases],
        )
        for t in tasks
    }
    ns = len(static)
    for it in range(cfg.dynamic_iterations):
        frame = it % num_frames
        batch = scene_batch(scene, frame)
        out = rasterizer.rasterize(cameras[frame], batch, scene.latent_dim, background=bg)
        ploss, grad_rgb = photometric_loss(out.rgb, targets.rgb[frame])
        floss, grad_latent = _feature_pass(out, decoders, tasks, targets, frame, cfg.weight_feature)
        _check_finite("dynamic", it, photometric=ploss, feature=floss)
        grads = rasterizer.rasterize_backward(out, cfg.weight_photometric * grad_rgb, grad_latent)

        static.colors = np.clip(adam_step(opt3["s_colors"], static.colors, grads.color[:ns]), 0.0, 1.0)
        static.opacities = np.clip(
            adam_step(opt3["s_opacities"], static.opacities, grads.opacity[:ns]), OPACITY_MIN, OPACITY_MAX
        )
        static.latents = adam_step(opt3["s_latents"], static.latents, grads.owned_latent)
        dyn.colors = np.clip(adam_step(opt3["d_colors"], dyn.colors, grads.color[ns:]), 0.0, 1.0)
        dyn.opacities = np.clip(
            adam_step(opt3["d_opacities"], dyn.opacities, grads.opacity[ns:]), OPACITY_MIN, OPACITY_MAX
        )
        scaffold.base_features = adam_step(opt3["base"], scaffold.base_features, grads.base_features)
        dyn.weight_offsets = adam_step(opt3["offsets"], dyn.weight_offsets, grads.weight_offsets)
        for task in tasks:
            dec = decoders[task.name]
            sw, sb = opt_dec[task.name]
            dec.weights = [adam_step(s, w, g) for s, w, g in zip(sw, dec.weights, task._grad_w)]
            dec.biases = [adam_step(s, b, g) for s, b, g in zip(sb, dec.biases, task._grad_b)]
        losses.append({"stage": "dynamic", "iteration": it, "photometric": ploss, "feature": floss,
                       "total": cfg.weight_photometric * ploss + cfg.weight_feature * floss})
    return TrainResult(losses)
