"""Tests for scripts/hyperslam.py.

Covers:
- usage: --help exits 0, missing command exits 1
- input errors exit 1 with an [hyperslam] ERROR line (missing dataset,
  stereo mode, unknown config key)
- synth → render round trip through the written files
- run and train write trajectory.txt, map.hpm, report.json, camera.yaml
- the script runs as a subprocess
"""

import json
import subprocess
import sys
from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).parent.parent
SCRIPT = REPO_ROOT / "scripts" / "hyperslam.py"
sys.path.insert(0, str(REPO_ROOT / "scripts"))

from dataset_loaders import read_tum_trajectory  # noqa: E402
from hyperslam import EXIT_ERROR, EXIT_OK, main  # noqa: E402

SCENE = """\
n_primitives: 40
n_frames: 3
width: 64
height: 48
orbit_arc_deg: 20.0
seed: 1
"""


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


@pytest.fixture
def synth_dir(tmp_path: Path) -> Path:
    scene = tmp_path / "scene.yaml"
    scene.write_text(SCENE, encoding="utf-8")
    out = tmp_path / "seq"
    assert main(["synth", "--scene", str(scene), "--out", str(out), "--quiet"]) == EXIT_OK
    return out


def run_args(dataset: Path, out: Path, *extra: str) -> list[str]:
    return ["run", "--dataset", str(dataset), "--format", "synthetic", "--out", str(out), "--quiet", *extra]


# ---------------------------------------------------------------------------
# Usage and errors
# ---------------------------------------------------------------------------


class TestUsage:
    def test_help(self, capsys) -> None:
        assert main(["--help"]) == EXIT_OK
        assert "synth" in capsys.readouterr().out

    def test_missing_command(self) -> None:
        assert main([]) == EXIT_ERROR

    def test_bad_format_choice(self, tmp_path: Path) -> None:
        assert main(["run", "--dataset", str(tmp_path), "--format", "kitti", "--out", str(tmp_path)]) == EXIT_ERROR


class TestInputErrors:
    def test_missing_dataset(self, tmp_path: Path, capsys) -> None:
        code = main(["run", "--dataset", str(tmp_path / "absent"), "--format", "tum", "--out", str(tmp_path / "o")])
        assert code == EXIT_ERROR
        assert "[hyperslam] ERROR: MissingManifest" in capsys.readouterr().err

    def test_stereo_rejected(self, tmp_path: Path, capsys) -> None:
        code = main(run_args(tmp_path, tmp_path / "o", "--set", "mode=stereo"))
        assert code == EXIT_ERROR
        assert "stereo" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path: Path) -> None:
        assert main(run_args(tmp_path, tmp_path / "o", "--set", "gp_level=2")) == EXIT_ERROR

    def test_render_without_camera(self, tmp_path: Path) -> None:
        (tmp_path / "map.hpm").write_bytes(b"HPM1" + bytes(8))
        (tmp_path / "traj.txt").write_text("0 0 0 0 0 0 0 1\n", encoding="utf-8")
        args = ["render", "--map", str(tmp_path / "map.hpm"), "--pose", str(tmp_path / "traj.txt"),
                "--out", str(tmp_path / "r")]
        assert main(args) == EXIT_ERROR


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


class TestCommands:
    def test_synth_then_render(self, synth_dir: Path, tmp_path: Path, capsys) -> None:
        capsys.readouterr()
        args = ["render", "--map", str(synth_dir / "scene.hpm"), "--pose", str(synth_dir / "groundtruth.txt"),
                "--out", str(tmp_path / "renders")]
        assert main(args) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["renders"] == 3 and summary["primitives"] == 40
        assert sorted(p.name for p in (tmp_path / "renders").iterdir()) == ["000000.ppm", "000001.ppm", "000002.ppm"]

    def test_run_writes_outputs(self, synth_dir: Path, tmp_path: Path, capsys) -> None:
        capsys.readouterr()
        out = tmp_path / "run"
        code = main(run_args(synth_dir, out, "--set", "max_frames=1", "--set", "final_iters=1",
                             "--set", "seed_with_ground_truth=true", "--threads", "1", "--seed", "3"))
        assert code == EXIT_OK
        printed = json.loads(capsys.readouterr().out)
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert printed == report
        assert report["n_frames"] == 1 and report["n_keyframes"] == 1 and report["tracking_lost"] is False
        assert report["ate_rmse"] == pytest.approx(0.0, abs=1e-9)
        for name in ("trajectory.txt", "map.hpm", "camera.yaml"):
            assert (out / name).is_file()
        assert len(read_tum_trajectory(out / "trajectory.txt")) == 1

    def test_run_logs_progress_unless_quiet(self, synth_dir: Path, tmp_path: Path, capsys) -> None:
        capsys.readouterr()
        args = ["run", "--dataset", str(synth_dir), "--format", "synthetic", "--out", str(tmp_path / "v"),
                "--set", "max_frames=1", "--set", "final_iters=1", "--set", "seed_with_ground_truth=true"]
        assert main(args) == EXIT_OK
        assert "[slam_runner]" in capsys.readouterr().err
        assert main([*args[:6], str(tmp_path / "q"), *args[7:], "--quiet"]) == EXIT_OK
        assert "[slam_runner]" not in capsys.readouterr().err

    def test_train_writes_outputs(self, synth_dir: Path, tmp_path: Path) -> None:
        out = tmp_path / "train"
        args = ["train", "--dataset", str(synth_dir), "--format", "synthetic", "--out", str(out),
                "--random", "5", "--iters", "1", "--quiet"]
        assert main(args) == EXIT_OK
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert report["n_keyframes"] == 1 and report["n_frames"] == 3
        assert (out / "map.hpm").stat().st_size == report["model_size_bytes"]


class TestSubprocess:
    def test_help_via_interpreter(self) -> None:
        result = subprocess.run([sys.executable, str(SCRIPT), "--help"], capture_output=True, text=True)
        assert result.returncode == 0
        assert "render" in result.stdout
