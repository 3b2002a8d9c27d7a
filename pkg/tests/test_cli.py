import json
from pathlib import Path

import numpy as np
import pytest

from auricle import cli
from auricle.report import emit_roc_svg


def run_cli(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_synth")
    rc = run_cli("synth", "--subjects", 6, "--collections", 2, "--samples", 2,
                 "--seed", 3, "--out-dir", out)
    assert rc == 0
    return out


class TestSynthCommand:
    def test_manifest_has_all_sessions(self, tmp_path):
        rc = run_cli("synth", "--subjects", 3, "--collections", 6, "--samples", 1,
                     "--seed", 42, "--out-dir", tmp_path)
        assert rc == 0
        lines = (tmp_path / "manifest.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 3 * 6
        sessions = {line.split(",")[1] for line in lines[1:]}
        assert sessions == {"1", "2", "3", "4", "5", "6"}

    def test_rerun_identical_bytes(self, tmp_path):
        for sub in ("a", "b"):
            rc = run_cli("synth", "--subjects", 2, "--collections", 1, "--samples", 1,
                         "--seed", 5, "--out-dir", tmp_path / sub)
            assert rc == 0
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_zero_subjects_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("synth", "--subjects", 0, "--out-dir", "/tmp/x")
        assert exc.value.code == 2


class TestRunCommand:
    def test_end_to_end_report(self, synth_dir, tmp_path):
        out = tmp_path / "run1"
        rc = run_cli("run", "--manifest", synth_dir / "manifest.csv",
                     "--out-dir", out, "--backend", "builtin", "--no-tsne",
                     "--seed", 1)
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["schema"] == 1
        assert "0" in report["per_gap"]
        assert report["config"]["target_far"] == 0.02
        assert (out / "scores.csv").exists()
        assert list(out.glob("roc_*.svg"))
        protos = [e["protocol"] for e in report["experiments"]]
        assert "within-1" in protos and "cross-1-2" in protos

    def test_rerun_byte_identical(self, synth_dir, tmp_path):
        out = tmp_path / "same"
        args = ("run", "--manifest", synth_dir / "manifest.csv",
                "--out-dir", out, "--backend", "builtin", "--no-tsne",
                "--seed", 7)
        assert run_cli(*args) == 0
        first = (out / "report.json").read_bytes()
        assert run_cli(*args) == 0
        assert (out / "report.json").read_bytes() == first

    def test_no_backend_rejected_before_work(self, synth_dir, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "manifest": str(synth_dir / "manifest.csv"),
            "out_dir": str(tmp_path / "out"),
            "backends": [],
        }))
        rc = run_cli("run", "--config", cfg)
        assert rc == 1
        assert "backend" in capsys.readouterr().err

    def test_config_file_overrides_flags(self, synth_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"target_far": 0.5, "tsne_enabled": False}))
        out = tmp_path / "out"
        rc = run_cli("run", "--manifest", synth_dir / "manifest.csv",
                     "--out-dir", out, "--backend", "builtin",
                     "--target-far", "0.01", "--config", cfg)
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["target_far"] == 0.5

    def test_missing_manifest_is_stage_error(self, tmp_path, capsys):
        rc = run_cli("run", "--manifest", tmp_path / "nope.csv",
                     "--out-dir", tmp_path / "o", "--backend", "builtin")
        assert rc == 1
        assert "[ingest]" in capsys.readouterr().err

    def test_selection_provenance_recorded(self, synth_dir, tmp_path):
        out = tmp_path / "prov"
        rc = run_cli("run", "--manifest", synth_dir / "manifest.csv",
                     "--out-dir", out, "--backend", "builtin", "--no-tsne",
                     "--enroll-session", 1)
        assert rc == 0
        meta = json.loads((out / "indices_builtin.json").read_text())
        assert meta["backend"] == "builtin"
        assert all(k.split("/")[1] == "1" for k in meta["fitted_on"])
        idx = meta["indices"]
        assert idx == sorted(idx)

    def test_tsne_pipeline_runs(self, synth_dir, tmp_path):
        out = tmp_path / "tsne"
        rc = run_cli("run", "--manifest", synth_dir / "manifest.csv",
                     "--out-dir", out, "--backend", "builtin",
                     "--tsne-perplexity", 3, "--tsne-iters", 260, "--seed", 2)
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert any("joint t-SNE" in n for n in report["notes"])


class TestPreprocessCommand:
    def test_writes_layout(self, synth_dir, tmp_path):
        out = tmp_path / "crops"
        rc = run_cli("preprocess", "--manifest", synth_dir / "manifest.csv",
                     "--out-dir", out)
        assert rc == 0
        pngs = list(out.rglob("*.png"))
        assert len(pngs) == 24
        sample = pngs[0].relative_to(out)
        assert sample.parts[0].startswith("S")
        assert sample.parts[1] in {"1", "2"}


class TestEmbedEvaluateCommands:
    def test_embed_then_evaluate(self, synth_dir, tmp_path):
        store_dir = tmp_path / "stores"
        rc = run_cli("embed", "--manifest", synth_dir / "manifest.csv",
                     "--out-dir", store_dir, "--backend", "builtin")
        assert rc == 0
        store = store_dir / "embeddings_builtin.bin"
        assert store.exists()
        out = tmp_path / "eval"
        rc = run_cli("evaluate", "--manifest", synth_dir / "manifest.csv",
                     "--store", store, "--out-dir", out, "--no-tsne")
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["per_gap"]


class TestReportCommand:
    def test_re_render(self, synth_dir, tmp_path):
        out = tmp_path / "orig"
        run_cli("run", "--manifest", synth_dir / "manifest.csv",
                "--out-dir", out, "--backend", "builtin", "--no-tsne")
        svgs = sorted(p.name for p in out.glob("roc_*.svg"))
        render_dir = tmp_path / "re"
        rc = run_cli("report", "--report", out / "report.json", "--out-dir", render_dir)
        assert rc == 0
        assert sorted(p.name for p in render_dir.glob("roc_*.svg")) == svgs
        for name in svgs:
            assert (render_dir / name).read_bytes() == (out / name).read_bytes()


class TestRocSvg:
    def test_perfect_curve_has_corner_vertex(self, tmp_path):
        points = [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
        path = tmp_path / "roc.svg"
        emit_roc_svg(points, 0.0, path)
        text = path.read_text()
        # (far=0, tar=1) maps to the top-left plot corner (48.00, 48.00)
        assert "48.00,48.00" in text
        assert "<svg" in text and "polyline" in text

    def test_deterministic_bytes(self, tmp_path):
        points = [(0.0, 0.0), (0.25, 0.8), (1.0, 1.0)]
        emit_roc_svg(points, 0.2, tmp_path / "a.svg")
        emit_roc_svg(points, 0.2, tmp_path / "b.svg")
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()

    def test_single_point_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="degenerate curve"):
            emit_roc_svg([(0.0, 0.0)], 0.0, tmp_path / "x.svg")
