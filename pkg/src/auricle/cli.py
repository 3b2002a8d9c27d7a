"""Command-line orchestration for the full verification pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataset, embed, evaluate, fuse, preprocess, project, report


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    manifest: str
    out_dir: str
    backends: list = field(default_factory=lambda: [{"kind": "builtin", "name": "builtin"}])
    clip_limit: float = 2.0
    tiles_x: int = 8
    tiles_y: int = 8
    input_normalization: str = "imagenet_mean_std"
    selector: str = "fisher"
    top_k: int = 256
    trees: int = 100
    min_samples_split: int = 2
    standardize: bool = True
    tsne_enabled: bool = True
    tsne_components: int = 2
    tsne_perplexity: float = 30.0
    tsne_learning_rate: float = 200.0
    tsne_iters: int = 1000
    tsne_exaggeration: float = 12.0
    target_far: float = 0.02
    enroll_session: int = 1
    anchor_session: int = 1
    session_spacing_months: int = 6
    seed: int = 0
    jobs: int = 1
    dump_coordinates: bool = False

    def __post_init__(self):
        if not self.backends:
            raise ValueError("at least one backend is required")
        if not 0.0 < self.target_far <= 1.0:
            raise ValueError("target_far must be in (0, 1]")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _parallel_map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_pipeline(config: PipelineConfig) -> dict:
    """Execute ingest -> preprocess -> embed -> fuse -> project -> eval.

    Returns the full report dict (also written to disk by cmd_run).
    """
    try:
        manifest = dataset.parse_manifest(config.manifest, config.session_spacing_months)
        manifest.validate_files()
    except Exception as exc:
        raise StageError("ingest", exc) from exc

    try:
        params = preprocess.ClaheParams(config.clip_limit, config.tiles_x, config.tiles_y)
        images = _parallel_map(
            lambda r: preprocess.preprocess_record(r, params, manifest.root),
            manifest.records, config.jobs,
        )
    except Exception as exc:
        raise StageError("preprocess", exc) from exc

    try:
        specs = [
            embed.BackendSpec(
                kind=b.get("kind", "model_file"),
                name=b["name"],
                model_path=b.get("model_path"),
                output_name=b.get("output_name"),
                input_normalization=b.get("input_normalization", config.input_normalization),
            )
            for b in config.backends
        ]
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValueError(f"backend names must be unique: {names}")
        backend_vectors = {}
        backend_dims = {}
        for spec in specs:
            handle = embed.load_backend(spec)
            vecs = _parallel_map(lambda img: embed.embed_image(handle, img), images, config.jobs)
            backend_vectors[spec.name] = vecs
            backend_dims[spec.name] = handle.dim
    except Exception as exc:
        raise StageError("embed", exc) from exc

    try:
        enroll_idx = [i for i, r in enumerate(manifest.records)
                      if r.session == config.enroll_session]
        if len(enroll_idx) < 2:
            raise ValueError(
                f"enrollment session {config.enroll_session} has fewer than 2 records"
            )
        enroll_labels = [manifest.records[i].subject_id for i in enroll_idx]
        enroll_keys = [manifest.records[i].key for i in enroll_idx]
        reduced_parts = []
        selection_meta = []
        for spec in specs:
            X = np.stack([v.values for v in backend_vectors[spec.name]])
            if config.standardize:
                scaler = embed.Standardizer().fit(X[enroll_idx])
                X = scaler.transform(X)
            top_k = min(config.top_k, backend_dims[spec.name])
            selector = fuse.FeatureSelector(
                method=config.selector, top_k=top_k, trees=config.trees,
                min_samples_split=config.min_samples_split, seed=config.seed,
            ).fit(X[enroll_idx], enroll_labels)
            reduced_parts.append((spec.name, selector.transform(X), selector.indices_))
            selection_meta.append({
                "backend": spec.name,
                "indices": [int(i) for i in selector.indices_],
                "fitted_on": enroll_keys,
            })
        fused = np.concatenate([part for _, part, _ in reduced_parts], axis=1)
        layout = [(name, idx) for name, _, idx in reduced_parts]
    except Exception as exc:
        raise StageError("fuse", exc) from exc

    keys = [r.key for r in manifest.records]
    key_to_row = {k: i for i, k in enumerate(keys)}

    try:
        protocols = evaluate.enumerate_experiments(manifest, config.anchor_session)
        tsne_params = project.TsneParams(
            config.tsne_components, config.tsne_perplexity, config.tsne_learning_rate,
            config.tsne_iters, config.tsne_exaggeration, config.seed,
        )
        scoresets = {}
        coords_dump = {}
        for protocol in protocols:
            trials = evaluate.build_trials(manifest, protocol)
            used = sorted({t.enroll_key for t in trials} | {t.probe_key for t in trials},
                          key=key_to_row.get)
            X_used = fused[[key_to_row[k] for k in used]]
            projected = project.project_or_bypass(X_used, tsne_params, config.tsne_enabled)
            vectors = {k: projected[i] for i, k in enumerate(used)}
            if config.dump_coordinates and config.tsne_enabled:
                coords_dump[protocol] = vectors
            scoresets[protocol] = evaluate.score_trials(trials, vectors)
    except Exception as exc:
        raise StageError("project", exc) from exc

    try:
        eval_report = evaluate.run_protocol(manifest, scoresets, config.target_far)
        if config.tsne_enabled:
            eval_report.notes.append(
                "scores are only comparable within one joint t-SNE projection per experiment"
            )
        report_dict = report.report_to_dict(eval_report, config.to_dict())
        report_dict["selection"] = selection_meta
        report_dict["fusion_layout"] = [
            {"backend": name, "dims": len(idx)} for name, idx in layout
        ]
    except Exception as exc:
        raise StageError("evaluate", exc) from exc

    report_dict["_scoresets"] = scoresets  # internal: stripped before writing
    report_dict["_coords"] = coords_dump
    return report_dict


def write_run_outputs(report_dict: dict, out_dir: Path, selection_meta=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    scoresets = report_dict.pop("_scoresets", {})
    coords = report_dict.pop("_coords", {})
    report.write_report_json(report_dict, out_dir / "report.json")
    if scoresets:
        report.write_scores_csv(scoresets, out_dir / "scores.csv")
    for exp in report_dict["experiments"]:
        if exp.get("flag") is None and len(exp["roc"]) >= 2:
            report.emit_roc_svg(
                exp["roc"], exp["eer"], out_dir / f"roc_{exp['protocol']}.svg",
                title=f"ROC {exp['protocol']}",
            )
    for protocol, vectors in coords.items():
        name = protocol[0] + "-" + "-".join(str(p) for p in protocol[1:])
        report.write_coordinates_csv(vectors, out_dir / f"coordinates_{name}.csv")
    for meta in report_dict.get("selection", []):
        path = out_dir / f"indices_{meta['backend']}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


# --- argument parsing -------------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer: {text}")
    return value


def _nonnegative_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative: {text}")
    return value


def _parse_backend(text: str) -> dict:
    """builtin | NAME=MODEL.onnx[:OUTPUT_NAME]"""
    if text == "builtin":
        return {"kind": "builtin", "name": "builtin"}
    if "=" not in text:
        raise argparse.ArgumentTypeError(
            f"backend must be 'builtin' or NAME=model.onnx[:OUTPUT]: {text!r}"
        )
    name, rest = text.split("=", 1)
    model_path, _, output = rest.partition(":")
    spec = {"kind": "model_file", "name": name, "model_path": model_path}
    if output:
        spec["output_name"] = output
    return spec


def _add_pipeline_flags(p: argparse.ArgumentParser):
    p.add_argument("--manifest", help="manifest CSV path")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--backend", action="append", type=_parse_backend, dest="backends",
                   help="'builtin' or NAME=model.onnx[:OUTPUT]; repeatable, order fixes fusion")
    p.add_argument("--clip-limit", type=float, default=None)
    p.add_argument("--tiles-x", type=_positive_int, default=None)
    p.add_argument("--tiles-y", type=_positive_int, default=None)
    p.add_argument("--normalization", choices=["zero_one", "imagenet_mean_std"], default=None)
    p.add_argument("--selector", choices=["fisher", "extra_trees"], default=None)
    p.add_argument("--top-k", type=_positive_int, default=None)
    p.add_argument("--trees", type=_positive_int, default=None)
    p.add_argument("--min-samples-split", type=_positive_int, default=None)
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--no-tsne", action="store_true", help="bypass the t-SNE projection")
    p.add_argument("--tsne-components", type=_positive_int, default=None)
    p.add_argument("--tsne-perplexity", type=float, default=None)
    p.add_argument("--tsne-learning-rate", type=float, default=None)
    p.add_argument("--tsne-iters", type=_positive_int, default=None)
    p.add_argument("--tsne-exaggeration", type=float, default=None)
    p.add_argument("--target-far", type=float, default=None)
    p.add_argument("--enroll-session", type=_positive_int, default=None)
    p.add_argument("--anchor-session", type=_positive_int, default=None)
    p.add_argument("--session-spacing-months", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=_positive_int, default=None)
    p.add_argument("--dump-coordinates", action="store_true")
    p.add_argument("--config", help="JSON config file; fields override flags")


_FLAG_FIELDS = {
    "manifest": "manifest",
    "out_dir": "out_dir",
    "backends": "backends",
    "clip_limit": "clip_limit",
    "tiles_x": "tiles_x",
    "tiles_y": "tiles_y",
    "normalization": "input_normalization",
    "selector": "selector",
    "top_k": "top_k",
    "trees": "trees",
    "min_samples_split": "min_samples_split",
    "tsne_components": "tsne_components",
    "tsne_perplexity": "tsne_perplexity",
    "tsne_learning_rate": "tsne_learning_rate",
    "tsne_iters": "tsne_iters",
    "tsne_exaggeration": "tsne_exaggeration",
    "target_far": "target_far",
    "enroll_session": "enroll_session",
    "anchor_session": "anchor_session",
    "session_spacing_months": "session_spacing_months",
    "seed": "seed",
    "jobs": "jobs",
}


def build_config(args) -> PipelineConfig:
    fields: dict = {}
    for attr, key in _FLAG_FIELDS.items():
        value = getattr(args, attr, None)
        if value is not None:
            fields[key] = value
    if getattr(args, "no_standardize", False):
        fields["standardize"] = False
    if getattr(args, "no_tsne", False):
        fields["tsne_enabled"] = False
    if getattr(args, "dump_coordinates", False):
        fields["dump_coordinates"] = True
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
        fields.update(overrides)
    if "manifest" not in fields:
        raise ValueError("a manifest is required (--manifest or config file)")
    if "out_dir" not in fields:
        raise ValueError("an output directory is required (--out-dir or config file)")
    return PipelineConfig(**fields)


def cmd_run(args) -> int:
    config = build_config(args)
    report_dict = run_pipeline(config)
    write_run_outputs(report_dict, Path(config.out_dir))
    print(f"report written to {Path(config.out_dir) / 'report.json'}")
    return 0


def cmd_synth(args) -> int:
    cfg = dataset.SynthConfig(
        n_subjects=args.subjects,
        n_collections=args.collections,
        samples_per_subject_per_collection=args.samples,
        drift_per_collection=args.drift,
        image_size=args.image_size,
        seed=args.seed,
    )
    manifest = dataset.generate_synthetic(cfg, args.out_dir)
    print(f"wrote {len(manifest.records)} records to {Path(args.out_dir) / 'manifest.csv'}")
    return 0


def cmd_preprocess(args) -> int:
    from PIL import Image

    manifest = dataset.parse_manifest(args.manifest)
    manifest.validate_files()
    params = preprocess.ClaheParams(args.clip_limit or 2.0, args.tiles_x or 8, args.tiles_y or 8)
    out_dir = Path(args.out_dir)
    ears = _parallel_map(
        lambda r: preprocess.preprocess_record(r, params, manifest.root),
        manifest.records, args.jobs or 1,
    )
    for record, ear in zip(manifest.records, ears):
        dest = out_dir / record.subject_id / str(record.session)
        dest.mkdir(parents=True, exist_ok=True)
        Image.fromarray(ear.pixels).save(dest / f"{Path(record.image_path).stem}.png")
    print(f"wrote {len(ears)} processed crops to {out_dir}")
    return 0


def cmd_embed(args) -> int:
    config = build_config(args)
    manifest = dataset.parse_manifest(config.manifest, config.session_spacing_months)
    manifest.validate_files()
    params = preprocess.ClaheParams(config.clip_limit, config.tiles_x, config.tiles_y)
    images = _parallel_map(
        lambda r: preprocess.preprocess_record(r, params, manifest.root),
        manifest.records, config.jobs,
    )
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for b in config.backends:
        spec = embed.BackendSpec(
            kind=b.get("kind", "model_file"), name=b["name"],
            model_path=b.get("model_path"), output_name=b.get("output_name"),
            input_normalization=b.get("input_normalization", config.input_normalization),
        )
        handle = embed.load_backend(spec)
        vectors = _parallel_map(lambda img: embed.embed_image(handle, img), images, config.jobs)
        dest = out_dir / f"embeddings_{spec.name}.bin"
        embed.save_store(dest, spec.name, vectors)
        print(f"{spec.name}: dim {handle.dim}, {len(vectors)} vectors -> {dest}")
    return 0


def cmd_evaluate(args) -> int:
    config = build_config(args)
    manifest = dataset.parse_manifest(config.manifest, config.session_spacing_months)
    stores = [embed.load_store(p) for p in args.store]
    key_order = [r.key for r in manifest.records]
    enroll_idx = [i for i, r in enumerate(manifest.records)
                  if r.session == config.enroll_session]
    enroll_labels = [manifest.records[i].subject_id for i in enroll_idx]
    parts = []
    for backend_name, vectors in stores:
        by_key = {v.record: v.values for v in vectors}
        missing = [k for k in key_order if k not in by_key]
        if missing:
            raise ValueError(f"store {backend_name} missing {len(missing)} record(s), "
                             f"first: {missing[0]}")
        X = np.stack([by_key[k] for k in key_order])
        if config.standardize:
            X = embed.Standardizer().fit(X[enroll_idx]).transform(X)
        selector = fuse.FeatureSelector(
            method=config.selector, top_k=min(config.top_k, X.shape[1]),
            trees=config.trees, min_samples_split=config.min_samples_split,
            seed=config.seed,
        ).fit(X[enroll_idx], enroll_labels)
        parts.append(selector.transform(X))
    fused = np.concatenate(parts, axis=1)
    key_to_row = {k: i for i, k in enumerate(key_order)}

    tsne_params = project.TsneParams(
        config.tsne_components, config.tsne_perplexity, config.tsne_learning_rate,
        config.tsne_iters, config.tsne_exaggeration, config.seed,
    )
    scoresets = {}
    for protocol in evaluate.enumerate_experiments(manifest, config.anchor_session):
        trials = evaluate.build_trials(manifest, protocol)
        used = sorted({t.enroll_key for t in trials} | {t.probe_key for t in trials},
                      key=key_to_row.get)
        X_used = fused[[key_to_row[k] for k in used]]
        projected = project.project_or_bypass(X_used, tsne_params, config.tsne_enabled)
        vectors = {k: projected[i] for i, k in enumerate(used)}
        scoresets[protocol] = evaluate.score_trials(trials, vectors)

    eval_report = evaluate.run_protocol(manifest, scoresets, config.target_far)
    report_dict = report.report_to_dict(eval_report, config.to_dict())
    report_dict["_scoresets"] = scoresets
    write_run_outputs(report_dict, Path(config.out_dir))
    print(f"report written to {Path(config.out_dir) / 'report.json'}")
    return 0


def cmd_report(args) -> int:
    with open(args.report, encoding="utf-8") as fh:
        report_dict = json.load(fh)
    out_dir = Path(args.out_dir or Path(args.report).parent)
    count = 0
    for exp in report_dict.get("experiments", []):
        if exp.get("flag") is None and len(exp.get("roc", [])) >= 2:
            report.emit_roc_svg(
                [(float(f), float(t)) for f, t in exp["roc"]],
                float(exp["eer"]),
                out_dir / f"roc_{exp['protocol']}.svg",
                title=f"ROC {exp['protocol']}",
            )
            count += 1
    print(f"re-rendered {count} ROC plot(s) to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="auricle",
        description="Ear-biometrics verification pipeline and longitudinal evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic longitudinal dataset")
    p_synth.add_argument("--subjects", type=_positive_int, required=True)
    p_synth.add_argument("--collections", type=_positive_int, default=1)
    p_synth.add_argument("--samples", type=_positive_int, default=2,
                         help="samples per subject per collection")
    p_synth.add_argument("--drift", type=_nonnegative_float, default=0.0)
    p_synth.add_argument("--image-size", type=_positive_int, default=128)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out-dir", required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_pre = sub.add_parser("preprocess", help="write canonical ear crops as PNG")
    p_pre.add_argument("--manifest", required=True)
    p_pre.add_argument("--out-dir", required=True)
    p_pre.add_argument("--clip-limit", type=float, default=2.0)
    p_pre.add_argument("--tiles-x", type=_positive_int, default=8)
    p_pre.add_argument("--tiles-y", type=_positive_int, default=8)
    p_pre.add_argument("--jobs", type=_positive_int, default=1)
    p_pre.set_defaults(func=cmd_preprocess)

    p_embed = sub.add_parser("embed", help="embed a manifest into binary stores")
    _add_pipeline_flags(p_embed)
    p_embed.set_defaults(func=cmd_embed)

    p_eval = sub.add_parser("evaluate", help="evaluate from embedding stores")
    _add_pipeline_flags(p_eval)
    p_eval.add_argument("--store", action="append", required=True,
                        help="embedding store path; repeatable, order fixes fusion")
    p_eval.set_defaults(func=cmd_evaluate)

    p_run = sub.add_parser("run", help="end-to-end pipeline")
    _add_pipeline_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="re-render plots from a report JSON")
    p_rep.add_argument("--report", required=True)
    p_rep.add_argument("--out-dir")
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
