"""Command-line surface: scene generation, training, rendering, semantic
segmentation, direct and agent-driven editing, and the storage/timing/
encoder-count benchmark.

Exit codes: 0 success, 1 usage error (bad flags or unparseable prompt),
2 data error (missing/malformed files), 3 numerical failure. Diagnostics go
to stderr. Worker count for the rasterizer comes from SCAFFOLD4D_THREADS.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import rasterizer
from .agent import AgentError, IouScorer, PromptError, run_agent
from .distill import (
    DecoderMLP,
    NumericalError,
    TaskSpec,
    TrainConfig,
    decoder_forward,
    train,
)
from .query import (
    EditConfig,
    apply_edit,
    argmax_mask,
    gaussian_features,
    hybrid_mask,
    miou_accuracy,
    score_gaussians,
    segment_feature_map,
    threshold_mask,
)
from .scene import scene_batch
from .sceneio import (
    DataError,
    SceneBundle,
    label_image_rgb,
    load_scene,
    pca_visualize,
    save_scene,
    write_losses_csv,
    write_ppm,
)
from .worldgen import (
    GroundTruth,
    build_training_targets,
    generate,
    orbit_camera,
    spec_from_dict,
    synth_encoder,
)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_decoders(latent_dim: int, tasks: list[TaskSpec], seed: int) -> dict[str, DecoderMLP]:
    return {
        t.name: DecoderMLP.create(latent_dim, t.dim, np.random.default_rng([seed, i, 7733]))
        for i, t in enumerate(tasks)
    }


def generate_bundle(spec) -> SceneBundle:
    from .query import LabelSet

    scene, _, gt, cameras = generate(spec)
    decoders = make_decoders(spec.latent_dim, spec.tasks, spec.seed)
    query_task = spec.tasks[0].name
    label_set = LabelSet(gt.label_names, gt.embeddings[query_task])
    return SceneBundle(scene, decoders, list(spec.tasks), label_set, query_task,
                       cameras, spec.background_color, gt, spec.orbit)


def _resolve_view(bundle: SceneBundle, frame: int, view: str):
    if not 0 <= frame < len(bundle.cameras):
        raise DataError(f"frame {frame} outside camera track of length {len(bundle.cameras)}")
    if view == "input":
        return bundle.cameras[frame]
    if view.startswith("orbit:"):
        if bundle.orbit is None:
            raise DataError("scene file carries no orbit parameters; only --view input is available")
        try:
            angle = float(view.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad orbit angle in {view!r}") from None
        cam = bundle.cameras[frame]
        return orbit_camera(bundle.orbit, angle, cam.width, cam.height)
    raise UsageError(f"unknown view {view!r}; expected 'input' or 'orbit:<radians>'")


def _require_gt(bundle: SceneBundle, why: str) -> GroundTruth:
    if bundle.ground_truth is None:
        raise DataError(f"scene file has no ground-truth block; {why}")
    return bundle.ground_truth


def _render_latent(bundle: SceneBundle, camera, frame: int):
    batch = scene_batch(bundle.scene, frame)
    return rasterizer.rasterize(camera, batch, bundle.scene.latent_dim,
                                background=bundle.background, keep_contributions=False)


def _segment_map(bundle: SceneBundle, camera, frame: int):
    out = _render_latent(bundle, camera, frame)
    dec = bundle.decoders[bundle.query_task]
    h, w, d = out.feature.shape
    decoded = decoder_forward(dec, out.feature.reshape(-1, d)).reshape(h, w, -1)
    return segment_feature_map(decoded, bundle.label_set), out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args):
    try:
        with open(args.spec) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read spec {args.spec}: {exc}") from exc
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = spec_from_dict(doc)
    bundle = generate_bundle(spec)
    save_scene(args.out, bundle)
    print(f"wrote {args.out}: {len(bundle.scene)} gaussians, "
          f"{bundle.scene.scaffold.num_nodes} scaffold nodes, {len(bundle.cameras)} frames")
    return 0


def cmd_train(args):
    bundle = load_scene(args.scene)
    gt = _require_gt(bundle, "training targets are derived from it")
    cfg_doc = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg_doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(cfg_doc) - known
    if unknown:
        raise DataError(f"unknown train config keys: {sorted(unknown)}")
    cfg = TrainConfig(**cfg_doc)
    cfg.background = tuple(bundle.background)
    try:
        cfg.validate()
        cfg.select_tasks(bundle.tasks)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    targets = build_training_targets(gt)
    result = train(bundle.scene, bundle.scene.scaffold, bundle.decoders, bundle.tasks,
                   bundle.cameras, targets, cfg)
    save_scene(args.out, bundle)
    if args.log:
        write_losses_csv(args.log, result.losses)
    done = {s: sum(1 for r in result.losses if r["stage"] == s)
            for s in ("static", "geometric", "dynamic")}
    print(f"wrote {args.out}; iterations {done}")
    return 0


def cmd_render(args):
    if not args.rgb and not args.feat_pca:
        raise UsageError("render needs --rgb and/or --feat-pca")
    bundle = load_scene(args.scene)
    camera = _resolve_view(bundle, args.frame, args.view)
    out = _render_latent(bundle, camera, args.frame)
    if args.rgb:
        write_ppm(args.rgb, out.rgb)
    if args.feat_pca:
        write_ppm(args.feat_pca, pca_visualize(out.feature, seed=args.seed or 0))
    return 0


def cmd_segment(args):
    bundle = load_scene(args.scene)
    camera = _resolve_view(bundle, args.frame, args.view)
    labels, _ = _segment_map(bundle, camera, args.frame)
    write_ppm(args.out, label_image_rgb(labels))
    if args.metrics:
        metrics = {"ground_truth": False}
        if bundle.ground_truth is not None:
            gt = bundle.ground_truth
            ref_cam = None if args.view == "input" else camera
            gt_labels = gt.label_image(args.frame, ref_cam)
            miou, acc = miou_accuracy(labels, gt_labels, len(gt.label_names))
            metrics = {"ground_truth": True, "miou": miou, "accuracy": acc}
        with open(args.metrics, "w") as fh:
            json.dump(metrics, fh)
    return 0


def _mask_for(bundle: SceneBundle, targets: list[str], threshold: float):
    feats = gaussian_features(bundle.scene, bundle.decoders[bundle.query_task])
    scores = score_gaussians(feats, bundle.label_set)
    return hybrid_mask(threshold_mask(scores, targets, threshold), argmax_mask(scores, targets))


def cmd_edit(args):
    bundle = load_scene(args.scene)
    color = None
    if args.op == "recolor":
        from .agent import COLOR_TABLE, _COLOR_ALIASES

        if not args.color:
            raise UsageError("recolor requires --color")
        name = _COLOR_ALIASES.get(args.color.lower(), args.color.lower())
        if name not in COLOR_TABLE:
            raise UsageError(f"unknown color {args.color!r}")
        color = COLOR_TABLE[name]
    for label in args.label:
        if label not in bundle.label_set.labels:
            raise DataError(f"label {label!r} not in scene label set {bundle.label_set.labels}")
    mask = _mask_for(bundle, args.label, args.threshold)
    config = EditConfig(args.op, list(args.label), args.threshold, color)
    bundle.scene = apply_edit(bundle.scene, mask, config)
    save_scene(args.out, bundle)
    print(f"{args.op} on {args.label}: {int(mask.sum())} of {len(mask)} gaussians selected")
    return 0


def cmd_agent_edit(args):
    bundle = load_scene(args.scene)
    scorer_kind = "iou"
    if args.scorer_config:
        try:
            with open(args.scorer_config) as fh:
                scorer_doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read scorer config: {exc}") from exc
        scorer_kind = scorer_doc.get("type", "iou")
        if scorer_kind == "external":
            # The endpoint string is opaque; no external client ships here.
            raise DataError(
                f"external scorer at {scorer_doc.get('endpoint')!r} is not available in this build"
            )
        if scorer_kind != "iou":
            raise DataError(f"unknown scorer type {scorer_kind!r}")
    gt = _require_gt(bundle, "the IoU scorer needs ground-truth masks")
    config, renders, trace = run_agent(
        bundle.scene, bundle.decoders, bundle.label_set, bundle.query_task,
        args.prompt, IouScorer(gt), bundle.cameras, bundle.background,
    )
    mask = _mask_for(bundle, config.targets, config.threshold)
    bundle.scene = apply_edit(bundle.scene, mask, config)
    save_scene(args.out, bundle)
    with open(args.trace, "w") as fh:
        json.dump(trace.to_dict(), fh)
    if args.renders_dir:
        import os

        os.makedirs(args.renders_dir, exist_ok=True)
        for i, img in enumerate(renders):
            write_ppm(f"{args.renders_dir}/frame_{i:03d}.ppm", img)
    print(f"agent chose {config.operation} on {config.targets} at threshold {config.threshold}")
    return 0


def cmd_bench(args):
    bundle = load_scene(args.scene)
    scene = bundle.scene
    n_total = len(scene)
    n_dyn = len(scene.dynamic)
    m = scene.scaffold.num_nodes
    d = scene.latent_dim
    fsize = 8  # float64 storage
    decoder_bytes = sum(dec.num_params() for dec in bundle.decoders.values()) * fsize
    unified_model_bytes = (
        scene.static.latents.size + scene.scaffold.base_features.size
        + scene.dynamic.weight_offsets.size
    ) * fsize + decoder_bytes
    naive_dim = 512
    report = {
        "gaussians": n_total,
        "dynamic_gaussians": n_dyn,
        "scaffold_nodes": m,
        "latent_dim": d,
        "storage": {
            "compact_feature_bytes": m * d * fsize,
            "dynamic_per_gaussian_unified_bytes": n_dyn * d * fsize,
            "unified_model_bytes": unified_model_bytes,
            "naive_per_gaussian_512_bytes": n_total * naive_dim * fsize,
            "gaussian_node_ratio": (n_dyn / m) if m else None,
        },
    }
    batch = scene_batch(scene, 0)
    cam = bundle.cameras[0]
    t0 = time.perf_counter()
    rasterizer.rasterize(cam, batch, d, background=bundle.background, keep_contributions=False)
    t_tiled = time.perf_counter() - t0
    t0 = time.perf_counter()
    rasterizer.rasterize_reference(cam, batch, d, background=bundle.background)
    t_ref = time.perf_counter() - t0
    report["timing_ms"] = {"tiled": t_tiled * 1000.0, "reference": t_ref * 1000.0}

    if bundle.ground_truth is not None:
        gt = bundle.ground_truth
        frames = range(len(bundle.cameras))
        gt.reset_encoder_counts()
        for f in frames:
            _segment_map(bundle, bundle.cameras[f], f)
        feature_calls = dict(gt.encoder_calls)
        gt.reset_encoder_counts()
        for f in frames:
            batch_f = scene_batch(scene, f)
            slim = rasterizer.rasterize(bundle.cameras[f], batch_f, d,
                                        background=bundle.background, keep_contributions=False)
            fmap = synth_encoder(gt, f, bundle.query_task)  # encoder runs on the rendered view
            segment_feature_map(fmap, bundle.label_set)
            del slim
        rgb_calls = dict(gt.encoder_calls)
        gt.reset_encoder_counts()
        report["encoder_invocations"] = {
            "feature_path": feature_calls,
            "rgb_path": rgb_calls,
            "frames": len(bundle.cameras),
        }
    with open(args.report, "w") as fh:
        json.dump(report, fh)
    print(json.dumps(report["storage"]))
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="scaffold4d", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scene with ground truth")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="run the staged optimization")
    t.add_argument("--scene", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render RGB and/or a PCA feature image")
    r.add_argument("--scene", required=True)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--view", default="input")
    r.add_argument("--rgb", default=None)
    r.add_argument("--feat-pca", dest="feat_pca", default=None)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=cmd_render)

    s = sub.add_parser("segment", help="semantic segmentation from the feature field")
    s.add_argument("--scene", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--view", default="input")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", default=None)
    s.set_defaults(fn=cmd_segment)

    e = sub.add_parser("edit", help="apply one edit at a fixed threshold")
    e.add_argument("--scene", required=True)
    e.add_argument("--op", required=True, choices=["extract", "delete", "recolor"])
    e.add_argument("--label", action="append", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--color", default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_edit)

    a = sub.add_parser("agent-edit", help="candidate-search edit from a language prompt")
    a.add_argument("--scene", required=True)
    a.add_argument("--prompt", required=True)
    a.add_argument("--trace", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--renders-dir", default=None)
    a.add_argument("--scorer-config", default=None)
    a.set_defaults(fn=cmd_agent_edit)

    b = sub.add_parser("bench", help="storage/timing/encoder-count report")
    b.add_argument("--scene", required=True)
    b.add_argument("--report", required=True)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (UsageError, PromptError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, AgentError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
