"""Acceptance suite: one test per criterion, printed pass/fail per line."""

import functools
import json
import shutil
import subprocess
import time
from pathlib import Path

import numpy as np
import pytest

from auricle import cli, dataset, embed, evaluate, preprocess, project


def criterion(name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"[acceptance] {name}: FAIL")
                raise
            print(f"[acceptance] {name}: PASS")
            return result

        return wrapper

    return deco


@criterion("paper-number reproducibility statement")
def test_paper_numbers_not_reproduced_here():
    # The published headline numbers come from a private longitudinal child
    # dataset and a licensed adult dataset with trained heads; neither is
    # available at desk scale, so this suite substitutes the property-based
    # criteria below instead of chasing those figures.
    assert True


def random_score_set(rng):
    n_gen = int(rng.integers(1, 101))
    n_imp = int(rng.integers(1, 101))
    if rng.random() < 0.5:
        gen = rng.uniform(0, 10, n_gen)
        imp = rng.uniform(2, 12, n_imp)
    else:  # quantized distances exercise ties
        gen = np.round(rng.uniform(0, 10, n_gen), 1)
        imp = np.round(rng.uniform(2, 12, n_imp), 1)
    trials = [evaluate.Trial(f"g{i}/1/a", f"g{i}/2/b", True, 0, 9.0, "gt8")
              for i in range(n_gen)]
    trials += [evaluate.Trial(f"x{i}/1/a", f"y{i}/2/b", False, 0, 9.0, "gt8")
               for i in range(n_imp)]
    return evaluate.ScoreSet(trials, np.concatenate([gen, imp]))


def oracle_calibrate(imp, target):
    best = None
    for v in np.unique(imp):
        if np.count_nonzero(imp <= v) / imp.size <= target:
            best = float(v)
    return best


def oracle_rates(gen, imp, tau):
    if tau is None:
        return 0, len(gen), 0, len(imp)
    ta = sum(1 for d in gen if d <= tau)
    fa = sum(1 for d in imp if d <= tau)
    return ta, len(gen) - ta, fa, len(imp) - fa


TARGETS = (0.0, 0.01, 0.02, 0.05, 0.1, 0.5, 1.0)


@criterion("metrics oracle equivalence (1000 sets, exact, <10s)")
def test_metrics_match_bruteforce_oracle():
    rng = np.random.default_rng(2024)
    start = time.monotonic()
    for i in range(1000):
        scores = random_score_set(rng)
        target = TARGETS[i % len(TARGETS)]
        genuine = scores.genuine_mask
        gen = scores.distances[genuine]
        imp = scores.distances[~genuine]

        tau = evaluate.calibrate_threshold(scores, target)
        assert tau == oracle_calibrate(imp, target)

        rates = evaluate.compute_rates(scores, tau)
        assert (rates.ta, rates.fr, rates.fa, rates.tr) == oracle_rates(gen, imp, tau)
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"metrics oracle sweep took {elapsed:.1f}s"


@criterion("threshold maximality (1000 sets)")
def test_threshold_maximality():
    rng = np.random.default_rng(2024)
    for i in range(1000):
        scores = random_score_set(rng)
        target = TARGETS[i % len(TARGETS)]
        imp = scores.distances[~scores.genuine_mask]
        tau = evaluate.calibrate_threshold(scores, target)
        if tau is None:
            assert np.count_nonzero(imp <= imp.min()) / imp.size > target
            continue
        assert np.count_nonzero(imp <= tau) / imp.size <= target
        larger = imp[imp > tau]
        if larger.size:
            nxt = larger.min()
            assert np.count_nonzero(imp <= nxt) / imp.size > target


@criterion("CLAHE reduction to global HE (100 images, exact)")
def test_clahe_reduces_to_global_he():
    rng = np.random.default_rng(99)
    params = preprocess.ClaheParams(clip_limit=512.0, tiles_x=1, tiles_y=1)
    for _ in range(100):
        plane = rng.integers(0, 256, (64, 64), dtype=np.uint8)
        # independent oracle: the classic global equalization formula
        hist = np.bincount(plane.ravel(), minlength=256)
        cdf = np.cumsum(hist)
        cdf_min = cdf[np.flatnonzero(hist)[0]]
        n = plane.size
        if cdf_min == n:
            expected = plane.copy()
        else:
            mapping = np.clip(np.floor((cdf - cdf_min) / (n - cdf_min) * 255.0 + 0.5),
                              0, 255).astype(np.uint8)
            expected = mapping[plane]
        got = preprocess.clahe_luma(plane, params)
        assert np.array_equal(got, expected)


def elongated_ellipse_mask(rng, size=96):
    b = rng.uniform(14.0, 22.0)
    ratio = rng.uniform(2.0, 3.5)
    a = b / ratio
    angle = rng.uniform(-88.0, 88.0)
    t = np.deg2rad(angle)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dx, dy = xx - size / 2, yy - size / 2
    u = (np.cos(t) * dx + np.sin(t) * dy) / a
    v = (-np.sin(t) * dx + np.cos(t) * dy) / b
    return (u * u + v * v) <= 1.0


@criterion("alignment residual <= 0.5 deg (100 masks)")
def test_alignment_residual():
    rng = np.random.default_rng(31)
    for _ in range(100):
        mask = elongated_ellipse_mask(rng)
        img = np.where(mask[:, :, None], 200, 0).astype(np.uint8)
        est = preprocess.estimate_orientation(mask)
        assert not est.degenerate
        aligned = preprocess.align_and_crop(img, est)
        re_est = preprocess.estimate_orientation(aligned.any(axis=2))
        assert abs(re_est.angle_deg) <= 0.5


@criterion("t-SNE numerics (entropy, gradient, KL descent, determinism)")
def test_tsne_numerics():
    rng = np.random.default_rng(7)
    centers = np.array([[0, 0, 0, 0, 0], [10, 0, 0, 0, 0], [0, 10, 0, 0, 0]], float)
    X = np.vstack([rng.normal(c, 1.0, size=(s, 5))
                   for c, s in zip(centers, (18, 16, 16))])
    params = project.TsneParams(seed=7)
    perp = params.effective_perplexity(50)

    # per-row entropy within 1e-5 bits of log2(perplexity), or flagged
    sq = project.squared_distances(X)
    off = ~np.eye(50, dtype=bool)
    for i in range(50):
        cal = project.perplexity_calibration(sq[i][off[i]], perp)
        h_bits = -float(np.sum(cal.probs * np.log2(cal.probs)))
        if cal.converged:
            assert abs(h_bits - np.log2(perp)) <= 1e-5
        # unconverged rows are flagged best-effort; nothing further asserted

    # analytic gradient vs central differences, 5-point instance
    rng2 = np.random.default_rng(3)
    X5 = rng2.normal(0, 1, (5, 4))
    P5, _ = project.joint_probabilities(X5, 1.2)
    Y5 = rng2.normal(0, 1.0, (5, 2))
    analytic = project.kl_gradient(P5, Y5)
    numeric = np.zeros_like(Y5)
    eps = 1e-5
    for i in range(5):
        for j in range(2):
            up, dn = Y5.copy(), Y5.copy()
            up[i, j] += eps
            dn[i, j] -= eps
            numeric[i, j] = (project.kl_divergence(P5, up) -
                             project.kl_divergence(P5, dn)) / (2 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-12)
    assert rel.max() <= 1e-4

    # KL(iter 1000) < KL(iter 250) on the 3-cluster instance, seed 7
    result = project.tsne_embed(X, params)
    assert result.kl_trace[1000 // 50 - 1] < result.kl_trace[250 // 50 - 1]

    # fixed seed => bit-identical output
    again = project.tsne_embed(X, params)
    assert np.array_equal(result.coordinates, again.coordinates)


@criterion("end-to-end synthetic verification (TAR >= 95% @ FAR <= 2%, <60s)")
def test_end_to_end_synthetic(tmp_path):
    start = time.monotonic()
    cfg = dataset.SynthConfig(n_subjects=20, n_collections=1,
                              samples_per_subject_per_collection=4,
                              drift_per_collection=0.0, seed=11)
    manifest = dataset.generate_synthetic(cfg, tmp_path / "data")
    out = tmp_path / "out"
    config = cli.PipelineConfig(
        manifest=str(tmp_path / "data" / "manifest.csv"),
        out_dir=str(out),
        backends=[{"kind": "builtin", "name": "builtin"}],
        selector="fisher",
        tsne_enabled=False,
        target_far=0.02,
        seed=11,
    )
    report_dict = cli.run_pipeline(config)
    cli.write_run_outputs(report_dict, out)
    report = json.loads((out / "report.json").read_text())
    row = report["per_gap"]["0"]
    elapsed = time.monotonic() - start
    assert row["tar"] >= 0.95, f"TAR {row['tar']:.4f} below 95%"
    assert row["far"] <= 0.02, f"FAR {row['far']:.4f} above 2%"
    assert elapsed < 60.0, f"end-to-end run took {elapsed:.1f}s"


@criterion("longitudinal trend (non-increasing TAR, <=1 inversion <=2pp)")
def test_longitudinal_trend(tmp_path):
    cfg = dataset.SynthConfig(n_subjects=24, n_collections=6,
                              samples_per_subject_per_collection=2,
                              drift_per_collection=0.15, seed=42)
    dataset.generate_synthetic(cfg, tmp_path / "data")
    config = cli.PipelineConfig(
        manifest=str(tmp_path / "data" / "manifest.csv"),
        out_dir=str(tmp_path / "out"),
        backends=[{"kind": "builtin", "name": "builtin"}],
        selector="fisher",
        tsne_enabled=False,
        target_far=0.02,
        seed=42,
    )
    report_dict = cli.run_pipeline(config)
    gaps = sorted(int(g) for g in report_dict["per_gap"])
    assert gaps == [0, 6, 12, 18, 24, 30]
    tars = [report_dict["per_gap"][str(g)]["tar"] for g in gaps]
    inversions = [tars[i + 1] - tars[i] for i in range(len(tars) - 1)
                  if tars[i + 1] > tars[i]]
    assert len(inversions) <= 1, f"TAR curve {tars} has {len(inversions)} inversions"
    assert all(d <= 0.02 for d in inversions), \
        f"TAR curve {tars} has an inversion larger than 2pp"


@criterion("age-split harness (le8/gt8 populated, 8.0 -> le8)")
def test_age_split_harness(tmp_path):
    cfg = dataset.SynthConfig(n_subjects=6, n_collections=2,
                              samples_per_subject_per_collection=2, seed=4)
    manifest = dataset.generate_synthetic(cfg, tmp_path / "data")
    # pin ages to straddle 8.0, with one probe record exactly at 8.0
    pinned = []
    for r in manifest.records:
        base = 6.0 if int(r.subject_id[1:]) % 2 == 0 else 11.0
        age = base + 0.5 * (r.session - 1)
        if r.subject_id == "S002" and r.session == 2:
            age = 8.0
        pinned.append(dataset.ImageRecord(
            subject_id=r.subject_id, session=r.session, capture_date=r.capture_date,
            age_years=age, sex=r.sex, side=r.side,
            image_path=r.image_path, annotation_path=r.annotation_path,
        ))
    manifest = dataset.Manifest(pinned, 6, root=manifest.root)
    dataset.write_manifest(manifest, tmp_path / "data" / "manifest.csv")

    boundary = [t for t in evaluate.build_cross_trials(manifest, 1, 2)
                if t.probe_key.startswith("S002/2/") ]
    assert boundary and all(t.probe_age_years == 8.0 for t in boundary)
    assert all(t.age_group == "le8" for t in boundary)

    config = cli.PipelineConfig(
        manifest=str(tmp_path / "data" / "manifest.csv"),
        out_dir=str(tmp_path / "out"),
        backends=[{"kind": "builtin", "name": "builtin"}],
        tsne_enabled=False,
        seed=4,
    )
    report_dict = cli.run_pipeline(config)
    groups = report_dict["per_age_group"]
    assert groups["le8"]["n_genuine"] > 0 and groups["le8"]["n_impostor"] > 0
    assert groups["gt8"]["n_genuine"] > 0 and groups["gt8"]["n_impostor"] > 0


FRONTEND_CLI = Path(__file__).resolve().parents[1] / "frontend" / "dist" / "cli.js"
_node = shutil.which("node")


@pytest.mark.skipif(not (_node and FRONTEND_CLI.is_file()),
                    reason="secondary component not built")
@criterion("secondary export round-trip (dims 512/1024, <=1e-5)")
def test_secondary_export_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    img = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    expected_dims = {"vgg16": 512, "mobilenet": 1024}
    for arch, want in expected_dims.items():
        embeddings = []
        for run in ("a", "b"):
            out = tmp_path / f"{arch}_{run}.onnx"
            proc = subprocess.run(
                [_node, str(FRONTEND_CLI), "export", "--arch", arch,
                 "--out", str(out), "--pool"],
                capture_output=True, text=True, timeout=600, check=True,
            )
            info = json.loads(proc.stdout.strip().splitlines()[-1])
            assert info["dim"] == want
            spec = embed.BackendSpec(kind="model_file", name=f"{arch}_{run}",
                                     model_path=str(out),
                                     output_name=info["output_name"])
            backend = embed.load_backend(spec)
            assert backend.dim == want
            embeddings.append(backend.embed(img))
        np.testing.assert_allclose(embeddings[0], embeddings[1], atol=1e-5)
