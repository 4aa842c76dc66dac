import json

import numpy as np
import pytest

from crossalign.cli import main
from crossalign.streams import load_match_output, parse_stream


def run_cli(*argv) -> int:
    return main(list(argv))


def scene_config_payload(**overrides):
    payload = {
        "person_count": 3,
        "duration_frames": 8,
        "camera_count": 1,
        "pixel_noise_sigma": 0.0,
        "dropout_rate": 0.0,
        "seed": 5,
    }
    payload.update(overrides)
    return payload


@pytest.fixture()
def scene_dir(tmp_path):
    config = tmp_path / "scene.json"
    config.write_text(json.dumps(scene_config_payload()))
    out = tmp_path / "scene"
    assert run_cli("simulate", "--config", str(config), "--out", str(out)) == 0
    return out


class TestSimulate:
    def test_outputs_are_byte_identical_across_runs(self, tmp_path):
        config = tmp_path / "scene.json"
        config.write_text(json.dumps(scene_config_payload(camera_count=2, pixel_noise_sigma=1.5)))
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_cli("simulate", "--config", str(config), "--out", str(out1)) == 0
        assert run_cli(
            "simulate", "--config", str(config), "--out", str(out2), "--threads", "4"
        ) == 0
        for name in ("lidar.jsonl", "camera_00.jsonl", "camera_01.jsonl", "truth.jsonl"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_file_fanout_matches_camera_count(self, tmp_path):
        config = tmp_path / "scene.json"
        config.write_text(
            json.dumps(scene_config_payload(person_count=4, camera_count=4, duration_frames=4))
        )
        out = tmp_path / "scene"
        assert run_cli("simulate", "--config", str(config), "--out", str(out)) == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == [
            "camera_00.jsonl",
            "camera_01.jsonl",
            "camera_02.jsonl",
            "camera_03.jsonl",
            "lidar.jsonl",
            "truth.jsonl",
        ]

    def test_invalid_config_exits_2(self, tmp_path):
        config = tmp_path / "scene.json"
        config.write_text(json.dumps(scene_config_payload(dropout_rate=1.5)))
        assert run_cli("simulate", "--config", str(config), "--out", str(tmp_path / "x")) == 2

    def test_unknown_field_exits_2(self, tmp_path):
        config = tmp_path / "scene.json"
        config.write_text(json.dumps(scene_config_payload(extra_field=1)))
        assert run_cli("simulate", "--config", str(config), "--out", str(tmp_path / "x")) == 2

    def test_seed_override_changes_output(self, tmp_path):
        config = tmp_path / "scene.json"
        config.write_text(json.dumps(scene_config_payload()))
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run_cli("simulate", "--config", str(config), "--out", str(out1))
        run_cli("simulate", "--config", str(config), "--out", str(out2), "--seed", "99")
        assert (out1 / "lidar.jsonl").read_bytes() != (out2 / "lidar.jsonl").read_bytes()


class TestMatch:
    def test_match_recovers_truth_correspondence(self, scene_dir, tmp_path):
        out = tmp_path / "match"
        assert (
            run_cli(
                "match",
                "--lidar",
                str(scene_dir / "lidar.jsonl"),
                "--camera",
                str(scene_dir / "camera_00.jsonl"),
                "--out",
                str(out),
            )
            == 0
        )
        outputs = sorted(out.iterdir())
        assert len(outputs) == 1
        doc = load_match_output(outputs[0])
        truth_header = json.loads(
            (scene_dir / "truth.jsonl").read_text().splitlines()[0]
        )
        expected = {tuple(pair) for pair in truth_header["correspondence"][0]}
        assert set(doc.pairs) == expected
        assert doc.payload["config"]["delta"] == 100.0
        assert doc.payload["strategy"] == "P&T&K"

    def test_match_is_deterministic_across_threads(self, tmp_path):
        config = tmp_path / "scene.json"
        config.write_text(
            json.dumps(
                scene_config_payload(person_count=4, camera_count=3, pixel_noise_sigma=1.0)
            )
        )
        scene = tmp_path / "scene"
        run_cli("simulate", "--config", str(config), "--out", str(scene))
        cameras = sorted(str(p) for p in scene.glob("camera_*.jsonl"))
        args = ["match", "--lidar", str(scene / "lidar.jsonl")]
        for cam in cameras:
            args += ["--camera", cam]
        out1, out2 = tmp_path / "m1", tmp_path / "m2"
        assert run_cli(*args, "--out", str(out1), "--threads", "1") == 0
        assert run_cli(*args, "--out", str(out2), "--threads", "3") == 0
        files1 = sorted(out1.iterdir())
        files2 = sorted(out2.iterdir())
        assert [f.name for f in files1] == [f.name for f in files2]
        for f1, f2 in zip(files1, files2):
            assert f1.read_bytes() == f2.read_bytes()

    def test_multiple_cameras_fan_out(self, tmp_path):
        config = tmp_path / "scene.json"
        config.write_text(json.dumps(scene_config_payload(camera_count=4, duration_frames=6)))
        scene = tmp_path / "scene"
        run_cli("simulate", "--config", str(config), "--out", str(scene))
        args = ["match", "--lidar", str(scene / "lidar.jsonl")]
        for cam in sorted(scene.glob("camera_*.jsonl")):
            args += ["--camera", str(cam)]
        out = tmp_path / "match"
        assert run_cli(*args, "--out", str(out)) == 0
        assert len(list(out.iterdir())) == 4

    def test_alternate_mode_runs(self, scene_dir, tmp_path):
        out = tmp_path / "match_pose"
        assert (
            run_cli(
                "match",
                "--lidar",
                str(scene_dir / "lidar.jsonl"),
                "--camera",
                str(scene_dir / "camera_00.jsonl"),
                "--mode",
                "P&T",
                "--out",
                str(out),
            )
            == 0
        )
        doc = load_match_output(next(iter(sorted(out.iterdir()))))
        assert doc.payload["strategy"] == "P&T"

    def test_empty_camera_stream_warns_but_succeeds(self, scene_dir, tmp_path):
        lidar_lines = (scene_dir / "lidar.jsonl").read_text().splitlines()
        cam_lines = (scene_dir / "camera_00.jsonl").read_text().splitlines()
        empty_cam = tmp_path / "empty_cam.jsonl"
        header = cam_lines[0]
        records = [json.loads(line) for line in cam_lines[1:]]
        for record in records:
            record["persons"] = []
        empty_cam.write_text(
            "\n".join([header] + [json.dumps(r, sort_keys=True) for r in records]) + "\n"
        )
        out = tmp_path / "match_empty"
        code = run_cli(
            "match",
            "--lidar",
            str(scene_dir / "lidar.jsonl"),
            "--camera",
            str(empty_cam),
            "--out",
            str(out),
        )
        assert code == 0
        doc = load_match_output(next(iter(sorted(out.iterdir()))))
        assert doc.pairs == []

    def test_wrong_kind_exits_2(self, scene_dir, tmp_path):
        code = run_cli(
            "match",
            "--lidar",
            str(scene_dir / "camera_00.jsonl"),
            "--camera",
            str(scene_dir / "camera_00.jsonl"),
            "--out",
            str(tmp_path / "x"),
        )
        assert code == 2


class TestRefine:
    @pytest.fixture()
    def noisy_scene(self, tmp_path):
        config = tmp_path / "scene.json"
        config.write_text(
            json.dumps(
                scene_config_payload(
                    person_count=3,
                    camera_count=2,
                    duration_frames=6,
                    joint3d_noise_sigma=0.05,
                    seed=13,
                )
            )
        )
        out = tmp_path / "scene"
        assert run_cli("simulate", "--config", str(config), "--out", str(out)) == 0
        return out

    def _run_match(self, scene_dir, out):
        args = ["match", "--lidar", str(scene_dir / "lidar.jsonl")]
        for cam in sorted(scene_dir.glob("camera_*.jsonl")):
            args += ["--camera", str(cam)]
        assert run_cli(*args, "--out", str(out)) == 0
        return sorted(out.iterdir())

    def test_refine_reduces_error_against_truth(self, noisy_scene, tmp_path):
        matches = self._run_match(noisy_scene, tmp_path / "match")
        refined_path = tmp_path / "refined.jsonl"
        args = ["refine", "--lidar", str(noisy_scene / "lidar.jsonl")]
        for m in matches:
            args += ["--match", str(m)]
        assert run_cli(*args, "--out", str(refined_path)) == 0

        truth_lines = (noisy_scene / "truth.jsonl").read_text().splitlines()
        truth_joints = {
            json.loads(line)["frame"]: np.asarray(json.loads(line)["joints"])
            for line in truth_lines[1:]
        }
        original = parse_stream(noisy_scene / "lidar.jsonl")
        refined = parse_stream(refined_path)
        before, after = [], []
        for p, (orig, new) in enumerate(zip(original.tracks, refined.tracks)):
            for t in range(6):
                truth = truth_joints[t][p]
                before.append(np.linalg.norm(orig.joints[t] - truth, axis=1).mean())
                after.append(np.linalg.norm(new.joints[t] - truth, axis=1).mean())
        assert np.mean(after) < np.mean(before)

    def test_unmatched_person_passes_through(self, noisy_scene, tmp_path):
        matches = self._run_match(noisy_scene, tmp_path / "match")
        # Strip every pair from the first match output: those cameras then
        # contribute nothing and refinement must be the identity.
        doc = json.loads(matches[0].read_text())
        doc["pairs"] = []
        doc["unmatched3d"] = [0, 1, 2]
        doc["unmatched2d"] = sorted(
            set(p["idx2d"] for p in json.loads(matches[1].read_text())["pairs"])
        ) if len(matches) > 1 else []
        stripped = tmp_path / "stripped.json"
        stripped.write_text(json.dumps(doc, sort_keys=True))

        refined_path = tmp_path / "refined_identity.jsonl"
        assert (
            run_cli(
                "refine",
                "--lidar",
                str(noisy_scene / "lidar.jsonl"),
                "--match",
                str(stripped),
                "--out",
                str(refined_path),
            )
            == 0
        )
        original = parse_stream(noisy_scene / "lidar.jsonl")
        refined = parse_stream(refined_path)
        for orig, new in zip(original.tracks, refined.tracks):
            assert np.array_equal(orig.joints[orig.valid], new.joints[new.valid])

    def test_hash_mismatch_exits_2(self, noisy_scene, tmp_path):
        matches = self._run_match(noisy_scene, tmp_path / "match")
        doc = json.loads(matches[0].read_text())
        doc["skeleton_hash"] = "different"
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc, sort_keys=True))
        code = run_cli(
            "refine",
            "--lidar",
            str(noisy_scene / "lidar.jsonl"),
            "--match",
            str(bad),
            "--out",
            str(tmp_path / "never.jsonl"),
        )
        assert code == 2


class TestBench:
    def test_bench_smoke(self, tmp_path):
        spec = tmp_path / "bench.json"
        spec.write_text(
            json.dumps(
                {
                    "modes": ["P&T"],
                    "person_counts": [2],
                    "pixel_noise_sigmas": [0.0],
                    "synchronized": [False],
                    "seeds": [1],
                    "duration_frames": 4,
                }
            )
        )
        out = tmp_path / "report.csv"
        assert run_cli("bench", "--spec", str(spec), "--out", str(out)) == 0
        assert out.exists()
        text = out.read_text()
        assert text.startswith("# crossalign-bench-report")

    def test_empty_modes_exit_2(self, tmp_path):
        spec = tmp_path / "bench.json"
        spec.write_text(json.dumps({"modes": [], "person_counts": [2]}))
        assert run_cli("bench", "--spec", str(spec), "--out", str(tmp_path / "r.csv")) == 2


class TestUsage:
    def test_version_runs(self, capsys):
        assert run_cli("version") == 0
        out = capsys.readouterr().out
        assert "crossalign" in out

    def test_missing_subcommand_is_usage_error(self):
        assert run_cli() == 1

    def test_unknown_flag_is_usage_error(self):
        assert run_cli("simulate", "--nope") == 1

    def test_missing_file_is_data_error(self, tmp_path):
        assert (
            run_cli(
                "simulate", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")
            )
            == 2
        )
