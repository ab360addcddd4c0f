"""Command-line interface tests: determinism, artifact composition,
exit codes and machine-readable logging."""

import json
from pathlib import Path

import numpy as np
import pytest

from poselift.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from poselift.geometry import axis_angle_matrix, geodesic_distance, spherical_to_pose
from poselift.io import read_depth_map, read_manifest

Z_AXIS = np.array([0.0, 0.0, 1.0])


def tree_bytes(root: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Small CLI-generated dataset shared by the read-only tests."""
    root = tmp_path_factory.mktemp("ds") / "set"
    code = main(
        ["synth", "--out", str(root), "--seed", "13", "--n-refs", "6",
         "--n-queries", "3"]
    )
    assert code == EXIT_OK
    return root


class TestSynth:
    def test_seeded_runs_byte_identical(self, tmp_path, capsys):
        args = ["--seed", "7", "--n-refs", "3", "--n-queries", "2"]
        assert main(["synth", "--out", str(tmp_path / "a")] + args) == EXIT_OK
        assert main(["synth", "--out", str(tmp_path / "b")] + args) == EXIT_OK
        ta, tb = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert sorted(ta) == sorted(tb) and len(ta) > 5
        for name in ta:
            assert ta[name] == tb[name], name
        out = capsys.readouterr().out.splitlines()
        assert out[-1].endswith("manifest.json")

    def test_rejects_bad_flags(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--seed", "-1"]) == EXIT_CONFIG
        assert main(["synth", "--out", str(tmp_path), "--n-refs", "0"]) == EXIT_CONFIG
        assert main(
            ["synth", "--out", str(tmp_path), "--noise-sd", "-0.5"]
        ) == EXIT_CONFIG


class TestPipelineComposition:
    def test_pipeline_equals_match_refine_eval(self, dataset, tmp_path, capsys):
        manifest = str(dataset / "manifest.json")
        piped = tmp_path / "piped"
        staged = tmp_path / "staged"
        common = ["--manifest", manifest, "--jobs", "1", "--k", "40"]
        assert main(["pipeline"] + common + ["--out", str(piped)]) == EXIT_OK
        assert main(["match"] + common + ["--out", str(staged)]) == EXIT_OK
        assert main(["refine"] + common + ["--out", str(staged)]) == EXIT_OK
        assert main(
            ["eval", "--manifest", manifest, "--jobs", "1", "--out", str(staged)]
        ) == EXIT_OK
        tp, ts = tree_bytes(piped), tree_bytes(staged)
        assert sorted(tp) == sorted(ts)
        for name in tp:
            assert tp[name] == ts[name], name

    def test_artifact_structure_and_overwrite(self, dataset, tmp_path):
        manifest = str(dataset / "manifest.json")
        out = tmp_path / "r"
        args = ["match", "--manifest", manifest, "--out", str(out),
                "--query", "query_001", "--jobs", "1", "--k", "25"]
        assert main(args) == EXIT_OK
        files = sorted(p.name for p in out.iterdir())
        assert files == ["match_query_001.json"]
        doc = json.loads((out / "match_query_001.json").read_text())
        assert doc["k"] == 25 and len(doc["matches"]) == 25
        assert doc["best_view_id"].startswith("ref_")
        assert set(doc["matches"][0]) == {
            "query_px", "ref_px", "query_cell", "ref_cell", "cyc_dist",
        }
        dists = [m["cyc_dist"] for m in doc["matches"]]
        assert dists == sorted(dists)
        first = (out / "match_query_001.json").read_bytes()
        assert main(args) == EXIT_OK
        assert (out / "match_query_001.json").read_bytes() == first

    def test_refine_consumes_existing_match_artifact(self, dataset, tmp_path):
        manifest = str(dataset / "manifest.json")
        out = tmp_path / "r"
        base = ["--manifest", manifest, "--out", str(out), "--jobs", "1",
                "--query", "query_000"]
        assert main(["match"] + base + ["--k", "30"]) == EXIT_OK
        match_bytes = (out / "match_query_000.json").read_bytes()
        assert main(["refine"] + base + ["--iters", "50"]) == EXIT_OK
        # the existing match artifact is reused, not recomputed
        assert (out / "match_query_000.json").read_bytes() == match_bytes
        doc = json.loads((out / "refine_query_000.json").read_text())
        assert doc["iterations_run"] <= 50
        assert doc["n_correspondences"] > 0
        R = np.array(doc["pose"]["rotation"])
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)

    def test_default_out_is_results_subdir(self, dataset):
        manifest = str(dataset / "manifest.json")
        assert main(
            ["match", "--manifest", manifest, "--query", "query_002", "--jobs", "1"]
        ) == EXIT_OK
        assert (dataset / "results" / "match_query_002.json").is_file()


class TestEval:
    def test_hand_written_records_worked_example(self, dataset, tmp_path, capsys):
        # refine artifacts at 10, 20 and 40 degrees from ground truth:
        # median 20, acc.15 = 1/3, acc.30 = 2/3
        manifest = read_manifest(dataset / "manifest.json")
        out = tmp_path / "r"
        out.mkdir()
        for q, err in zip(manifest.queries, (10.0, 20.0, 40.0)):
            est = q.pose.rotation @ axis_angle_matrix(Z_AXIS, np.radians(err))
            doc = {
                "query_id": q.view_id,
                "best_view_index": 0,
                "best_view_id": "ref_000",
                "pose": {
                    "rotation": [[float(v) for v in row] for row in est],
                    "translation": [0.0, 0.0, 2.5],
                },
                "best_loss": 1.0,
                "best_iteration": 1,
                "iterations_run": 7,
                "converged": True,
                "n_correspondences": 50,
            }
            (out / f"refine_{q.view_id}.json").write_text(json.dumps(doc))
        assert main(
            ["eval", "--manifest", str(dataset / "manifest.json"),
             "--out", str(out), "--jobs", "1"]
        ) == EXIT_OK

        results = json.loads((out / "results.json").read_text())
        assert results["pooled"]["median_err_deg"] == pytest.approx(20.0, abs=1e-9)
        assert results["pooled"]["acc"]["15"] == pytest.approx(1.0 / 3.0)
        assert results["pooled"]["acc"]["30"] == pytest.approx(2.0 / 3.0)
        assert {r["query_id"] for r in results["records"]} == {
            q.view_id for q in manifest.queries
        }

        stdout = capsys.readouterr().out
        lines = [l for l in stdout.splitlines() if l.strip()]
        assert lines[0].split() == ["category", "n", "med.err", "acc.15", "acc.30"]
        assert lines[-1].split() == ["all", "3", "20.00", "0.333", "0.667"]
        table = (out / "results.txt").read_text().splitlines()
        assert table[0].split() == lines[0].split()
        assert table[-1].split() == lines[-1].split()

    def test_eval_without_artifacts_is_data_error(self, dataset, tmp_path, capsys):
        assert main(
            ["eval", "--manifest", str(dataset / "manifest.json"),
             "--out", str(tmp_path / "empty"), "--jobs", "1"]
        ) == EXIT_DATA
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["exit_code"] == EXIT_DATA
        assert "error" in err and "message" in err

    def test_custom_thresholds(self, dataset, tmp_path, capsys):
        manifest = read_manifest(dataset / "manifest.json")
        out = tmp_path / "r"
        out.mkdir()
        for q in manifest.queries:
            doc = {
                "query_id": q.view_id, "best_view_index": 0,
                "pose": {
                    "rotation": [[float(v) for v in row] for row in q.pose.rotation],
                    "translation": [0.0, 0.0, 2.5],
                },
                "iterations_run": 1,
            }
            (out / f"refine_{q.view_id}.json").write_text(json.dumps(doc))
        assert main(
            ["eval", "--manifest", str(dataset / "manifest.json"), "--out", str(out),
             "--jobs", "1", "--thresholds", "5", "10", "20"]
        ) == EXIT_OK
        results = json.loads((out / "results.json").read_text())
        assert results["thresholds"] == [5.0, 10.0, 20.0]
        assert results["pooled"]["acc"] == {"5": 1.0, "10": 1.0, "20": 1.0}


class TestExitCodes:
    def test_config_errors(self, dataset, tmp_path, capsys):
        manifest = str(dataset / "manifest.json")
        cases = [
            ["match", "--manifest", manifest, "--k", "0"],
            ["match", "--manifest", manifest, "--jobs", "0"],
            ["match", "--manifest", manifest, "--query", "nope"],
            ["refine", "--manifest", manifest, "--iters", "0"],
            ["refine", "--manifest", manifest, "--lr", "-1"],
            ["eval", "--manifest", manifest, "--thresholds", "30", "15"],
            ["pipeline", "--manifest", manifest, "--thresholds", "-5"],
        ]
        for argv in cases:
            assert main(argv + ["--out", str(tmp_path)]) == EXIT_CONFIG, argv
            err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
            assert err["exit_code"] == EXIT_CONFIG

    def test_data_errors(self, tmp_path, capsys):
        missing = str(tmp_path / "nope" / "manifest.json")
        assert main(["match", "--manifest", missing]) == EXIT_DATA
        bad = tmp_path / "manifest.json"
        bad.write_text("{}")
        assert main(["match", "--manifest", str(bad)]) == EXIT_DATA
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["exit_code"] == EXIT_DATA

    def test_numeric_error_from_divergent_refinement(self, dataset, tmp_path, capsys):
        # hand-build a match artifact whose correspondences all pull the
        # camera backwards; a huge learning rate then throws the object
        # behind the camera and the penalty exceeds the divergence bound
        manifest = read_manifest(dataset / "manifest.json")
        ref = manifest.references[0]
        depth = read_depth_map(manifest.resolve(ref.depth_file))
        ys, xs = np.nonzero(depth.values > 0)
        quad = (xs > 70) & (ys > 70) & (xs < 110) & (ys < 110)
        xs, ys = xs[quad][:20], ys[quad][:20]
        assert len(xs) >= 10
        pose = spherical_to_pose(ref.camera)
        out = tmp_path / "r"
        out.mkdir()
        doc = {
            "query_id": "query_000",
            "best_view_index": 0,
            "best_view_id": ref.view_id,
            "k": len(xs),
            "metric": "cosine",
            "cumulative_cyc_dist": 0.0,
            "coarse_pose": {
                "rotation": [[float(v) for v in row] for row in pose.rotation],
                "translation": [float(v) for v in pose.translation],
            },
            "matches": [
                {
                    "query_px": [125.0, 125.0],
                    "ref_px": [float(x), float(y)],
                    "query_cell": [0, 0],
                    "ref_cell": [0, 0],
                    "cyc_dist": 0.0,
                }
                for x, y in zip(xs, ys)
            ],
        }
        (out / "match_query_000.json").write_text(json.dumps(doc))
        code = main(
            ["refine", "--manifest", str(dataset / "manifest.json"),
             "--out", str(out), "--query", "query_000", "--lr", "1e9", "--jobs", "1"]
        )
        assert code == EXIT_NUMERIC
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["exit_code"] == EXIT_NUMERIC
        assert err["error"] == "DivergenceError"

    def test_out_of_range_best_view_is_data_error(self, dataset, tmp_path, capsys):
        out = tmp_path / "r"
        out.mkdir()
        doc = {
            "query_id": "query_000", "best_view_index": 99,
            "coarse_pose": {
                "rotation": [[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]],
                "translation": [0.0, 0.0, 2.5],
            },
            "matches": [],
        }
        (out / "match_query_000.json").write_text(json.dumps(doc))
        assert main(
            ["refine", "--manifest", str(dataset / "manifest.json"),
             "--out", str(out), "--query", "query_000", "--jobs", "1"]
        ) == EXIT_DATA
        capsys.readouterr()


class TestLogging:
    def test_json_log_lines_parse(self, dataset, tmp_path, capsys):
        assert main(
            ["match", "--manifest", str(dataset / "manifest.json"),
             "--out", str(tmp_path / "r"), "--query", "query_000",
             "--jobs", "1", "--log-json"]
        ) == EXIT_OK
        err_lines = [l for l in capsys.readouterr().err.splitlines() if l.strip()]
        assert err_lines
        for line in err_lines:
            payload = json.loads(line)
            assert payload["level"] == "info"
            assert "event" in payload

    def test_plain_logs_are_not_json(self, dataset, tmp_path, capsys):
        assert main(
            ["match", "--manifest", str(dataset / "manifest.json"),
             "--out", str(tmp_path / "r"), "--query", "query_000", "--jobs", "1"]
        ) == EXIT_OK
        err_lines = [l for l in capsys.readouterr().err.splitlines() if l.strip()]
        assert any(l.startswith("info:") for l in err_lines)
