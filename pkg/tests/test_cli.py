import json

import numpy as np
import pytest

from scaffold4d.cli import main
from scaffold4d.sceneio import load_scene, read_ppm


def write_spec(path, seed=11):
    spec = {
        "seed": seed, "frames": 3, "width": 40, "height": 40, "latent_dim": 6,
        "k": 2, "nodes_per_object": 4,
        "orbit": {"radius": 14.0, "height": 3.0},
        "objects": [
            {"primitive": "sphere", "label": "apple", "color": [0.8, 0.2, 0.2], "count": 50,
             "size": 1.2, "track": {"type": "linear", "start": [-2, 0, 0], "end": [1, 0.4, 0]}},
            {"primitive": "box", "label": "crate", "color": [0.2, 0.7, 0.3], "count": 50,
             "size": [0.9, 0.9, 0.9], "track": {"type": "static", "position": [1.8, 0.4, -1]}},
        ],
        "tasks": [{"name": "main", "dim": 6, "height": 40, "width": 40}],
    }
    path.write_text(json.dumps(spec))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    write_spec(spec)
    scene = root / "scene.json"
    assert main(["gen", "--spec", str(spec), "--out", str(scene)]) == 0
    return root, spec, scene


class TestGen:
    def test_deterministic_output_bytes(self, workdir, tmp_path):
        root, spec, scene = workdir
        other = tmp_path / "again.json"
        assert main(["gen", "--spec", str(spec), "--out", str(other)]) == 0
        assert other.read_bytes() == scene.read_bytes()

    def test_seed_flag_overrides(self, workdir, tmp_path):
        root, spec, scene = workdir
        other = tmp_path / "seeded.json"
        assert main(["gen", "--spec", str(spec), "--seed", "99", "--out", str(other)]) == 0
        assert other.read_bytes() != scene.read_bytes()

    def test_missing_spec_is_data_error(self, tmp_path):
        assert main(["gen", "--spec", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "x.json")]) == 2


class TestTrainRenderPipeline:
    def test_zero_iteration_train_then_render_matches_oracle(self, workdir, tmp_path):
        root, spec, scene = workdir
        cfg = tmp_path / "train0.json"
        cfg.write_text(json.dumps({"static_iterations": 0, "geometric_iterations": 0,
                                   "dynamic_iterations": 0}))
        trained = tmp_path / "trained.json"
        assert main(["train", "--scene", str(scene), "--config", str(cfg),
                     "--out", str(trained)]) == 0
        rgb = tmp_path / "out.ppm"
        assert main(["render", "--scene", str(trained), "--frame", "0",
                     "--rgb", str(rgb)]) == 0

        # Against a direct oracle render of the generated scene.
        from scaffold4d.rasterizer import rasterize_reference
        from scaffold4d.scene import scene_batch

        bundle = load_scene(scene)
        ref = rasterize_reference(bundle.cameras[0], scene_batch(bundle.scene, 0),
                                  bundle.scene.latent_dim, background=bundle.background)
        got = read_ppm(rgb)
        assert np.max(np.abs(got - np.clip(ref.rgb, 0, 1))) <= 0.5 / 255.0 + 1e-9

    def test_train_writes_log(self, workdir, tmp_path):
        root, spec, scene = workdir
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"static_iterations": 2, "geometric_iterations": 2,
                                   "dynamic_iterations": 2}))
        trained = tmp_path / "trained.json"
        log = tmp_path / "losses.csv"
        assert main(["train", "--scene", str(scene), "--config", str(cfg),
                     "--out", str(trained), "--log", str(log)]) == 0
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 7  # header + 6 rows

    def test_unknown_config_key_is_data_error(self, workdir, tmp_path):
        root, spec, scene = workdir
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"bogus_knob": 3}))
        assert main(["train", "--scene", str(scene), "--config", str(cfg),
                     "--out", str(tmp_path / "x.json")]) == 2

    def test_render_determinism_and_pca(self, workdir, tmp_path):
        root, spec, scene = workdir
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        pa, pb = tmp_path / "pa.ppm", tmp_path / "pb.ppm"
        for rgb, pca in ((a, pa), (b, pb)):
            assert main(["render", "--scene", str(scene), "--frame", "1",
                         "--rgb", str(rgb), "--feat-pca", str(pca)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert pa.read_bytes() == pb.read_bytes()

    def test_orbit_view(self, workdir, tmp_path):
        root, spec, scene = workdir
        out = tmp_path / "orbit.ppm"
        assert main(["render", "--scene", str(scene), "--frame", "0",
                     "--view", "orbit:0.21", "--rgb", str(out)]) == 0
        assert out.exists()

    def test_render_requires_an_output(self, workdir):
        root, spec, scene = workdir
        assert main(["render", "--scene", str(scene), "--frame", "0"]) == 1


class TestSegment:
    def test_oracle_fed_upper_bound(self, workdir, tmp_path):
        # Segmenting the ground-truth feature map itself scores near-perfect.
        root, spec, scene = workdir
        bundle = load_scene(scene)
        gt = bundle.ground_truth
        from scaffold4d.query import miou_accuracy, segment_feature_map

        pred = segment_feature_map(gt.feature_map(0, "main"), bundle.label_set)
        miou, _ = miou_accuracy(pred, gt.label_image(0), len(gt.label_names))
        assert miou >= 0.95

    def test_segment_command_writes_outputs(self, workdir, tmp_path):
        root, spec, scene = workdir
        out = tmp_path / "labels.ppm"
        metrics = tmp_path / "metrics.json"
        assert main(["segment", "--scene", str(scene), "--frame", "0",
                     "--out", str(out), "--metrics", str(metrics)]) == 0
        doc = json.loads(metrics.read_text())
        assert doc["ground_truth"] is True
        assert 0.0 <= doc["miou"] <= 1.0
        img = read_ppm(out)
        assert img.shape == (40, 40, 3)


class TestEditCommands:
    def test_direct_edit(self, workdir, tmp_path):
        root, spec, scene = workdir
        out = tmp_path / "edited.json"
        assert main(["edit", "--scene", str(scene), "--op", "delete", "--label", "apple",
                     "--threshold", "0.6", "--out", str(out)]) == 0
        edited = load_scene(out)
        assert len(edited.scene) <= len(load_scene(scene).scene)

    def test_edit_unknown_label(self, workdir, tmp_path):
        root, spec, scene = workdir
        assert main(["edit", "--scene", str(scene), "--op", "delete", "--label", "zebra",
                     "--out", str(tmp_path / "x.json")]) == 2

    def test_recolor_requires_color(self, workdir, tmp_path):
        root, spec, scene = workdir
        assert main(["edit", "--scene", str(scene), "--op", "recolor", "--label", "apple",
                     "--out", str(tmp_path / "x.json")]) == 1

    def test_agent_edit_trace_deterministic(self, workdir, tmp_path):
        root, spec, scene = workdir
        t1, t2 = tmp_path / "t1.json", tmp_path / "t2.json"
        o1, o2 = tmp_path / "o1.json", tmp_path / "o2.json"
        for trace, out in ((t1, o1), (t2, o2)):
            assert main(["agent-edit", "--scene", str(scene), "--prompt", "Delete the apple",
                         "--trace", str(trace), "--out", str(out)]) == 0
        assert t1.read_bytes() == t2.read_bytes()
        assert o1.read_bytes() == o2.read_bytes()
        doc = json.loads(t1.read_text())
        assert len(doc["candidates"]) == 5
        assert doc["winner_id"] in range(5)

    def test_agent_edit_bad_prompt_is_usage_error(self, workdir, tmp_path):
        root, spec, scene = workdir
        assert main(["agent-edit", "--scene", str(scene), "--prompt", "launch the rocket",
                     "--trace", str(tmp_path / "t.json"), "--out", str(tmp_path / "o.json")]) == 1

    def test_external_scorer_rejected(self, workdir, tmp_path):
        root, spec, scene = workdir
        sc = tmp_path / "scorer.json"
        sc.write_text(json.dumps({"type": "external", "endpoint": "http://example.invalid"}))
        assert main(["agent-edit", "--scene", str(scene), "--prompt", "Delete the apple",
                     "--scorer-config", str(sc),
                     "--trace", str(tmp_path / "t.json"), "--out", str(tmp_path / "o.json")]) == 2


class TestBench:
    def test_report_contents(self, workdir, tmp_path):
        root, spec, scene = workdir
        report = tmp_path / "bench.json"
        assert main(["bench", "--scene", str(scene), "--report", str(report)]) == 0
        doc = json.loads(report.read_text())
        st = doc["storage"]
        assert st["compact_feature_bytes"] == 8 * 6 * 8  # M * D * float64
        assert st["dynamic_per_gaussian_unified_bytes"] == 100 * 6 * 8
        assert doc["timing_ms"]["tiled"] > 0
        enc = doc["encoder_invocations"]
        assert enc["feature_path"]["main"] == 0
        assert enc["rgb_path"]["main"] == enc["frames"]


class TestExitCodes:
    def test_usage_error_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_data_error_missing_scene(self, tmp_path):
        assert main(["render", "--scene", str(tmp_path / "no.json"), "--frame", "0",
                     "--rgb", str(tmp_path / "x.ppm")]) == 2

    def test_numerical_failure_exit_code(self, workdir, tmp_path):
        # A NaN smuggled into a Gaussian color turns the photometric loss
        # non-finite; train must abort with exit code 3.
        root, spec, scene = workdir
        doc = json.loads(scene.read_text())
        doc["scene"]["dynamic"]["colors"] = [[float("nan"), 0.5, 0.5]
                                             for _ in doc["scene"]["dynamic"]["colors"]]
        broken = tmp_path / "broken.json"
        broken.write_text(json.dumps(doc))
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"static_iterations": 0, "geometric_iterations": 0,
                                   "dynamic_iterations": 1}))
        assert main(["train", "--scene", str(broken), "--config", str(cfg),
                     "--out", str(tmp_path / "x.json")]) == 3

    def test_train_task_subset(self, workdir, tmp_path):
        root, spec, scene = workdir
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"static_iterations": 0, "geometric_iterations": 0,
                                   "dynamic_iterations": 1, "tasks": ["main"]}))
        assert main(["train", "--scene", str(scene), "--config", str(cfg),
                     "--out", str(tmp_path / "t.json")]) == 0
        cfg.write_text(json.dumps({"dynamic_iterations": 1, "tasks": ["nope"]}))
        rc = main(["train", "--scene", str(scene), "--config", str(cfg),
                   "--out", str(tmp_path / "t2.json")])
        assert rc == 2
