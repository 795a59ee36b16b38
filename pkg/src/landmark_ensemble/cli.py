"""Command-line pipeline: saliency -> extract -> train -> predict -> evaluate.

Stages are separately invokable so an external embedding extractor can run
between them; ``run-all`` chains everything, shelling out to the command
named by the ``extractor_cmd`` setting (the built-in ``extract-fake`` is
used when it is empty). Settings come from a ``key=value`` config file and
may be overridden per-flag; unknown config keys are rejected. Output files
are written atomically (temp + rename) and record files are sorted by image
id, so identical inputs give byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import shlex
import subprocess
import sys
import tempfile

import numpy as np

from . import classifiers, ensemble, evaluation, fake_extractor, gbvs, imaging
from .embeddings import (
    SPLITS,
    DatasetManifest,
    EmbeddingStore,
    read_embeddings,
    split_dataset,
    write_embeddings,
)

__all__ = ["PipelineConfig", "load_config", "main"]


@dataclasses.dataclass
class PipelineConfig:
    """Every pipeline setting with its default; mirrors the config file keys."""

    grid_w: int = 32
    grid_h: int = 32
    sigma_act: float = 0.0  # 0 = derive from grid width
    sigma_norm: float = 0.0  # 0 = derive from grid width
    eps_clamp: float = 1e-6
    power_iter_tol: float = 1e-9
    power_iter_max: int = 10_000
    num_regions: int = 5
    suppression_radius: float = 1.0 / 6.0
    crop_fraction: float = 0.5
    pyramid_levels: int = 2
    crop_size: int = 416
    embedding_dim: int = 2048
    knn_k: int = 5
    rf_trees: int = 100
    rf_max_depth: int = 0  # 0 = unlimited
    rf_features_per_split: int = 0  # 0 = floor(sqrt(dim))
    rf_bootstrap: int = 1
    head_hidden: int = 256
    head_epochs: int = 7
    head_batch: int = 32
    head_lr: float = 1e-4
    reject_threshold: float = 0.0
    seed: int = 42
    extractor_cmd: str = ""

    def gbvs(self) -> gbvs.GbvsConfig:
        return gbvs.GbvsConfig(
            grid_w=self.grid_w,
            grid_h=self.grid_h,
            sigma_act=self.sigma_act or None,
            sigma_norm=self.sigma_norm or None,
            eps_clamp=self.eps_clamp,
            power_iter_tol=self.power_iter_tol,
            power_iter_max=self.power_iter_max,
            num_regions=self.num_regions,
            suppression_radius=self.suppression_radius,
            crop_fraction=self.crop_fraction,
            pyramid_levels=self.pyramid_levels,
        )


def load_config(path: str | None) -> PipelineConfig:
    """Parse ``key=value`` lines; blank lines and # comments are allowed."""
    cfg = PipelineConfig()
    if path is None:
        return cfg
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            kind = fields[key].type
            if kind == "int":
                setattr(cfg, key, int(value))
            elif kind == "float":
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
    return cfg


def _apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    for f in dataclasses.fields(PipelineConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    return cfg


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value settings file")
    for f in dataclasses.fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "int":
            parser.add_argument(flag, type=int, default=None, help=f"default {f.default}")
        elif f.type == "float":
            parser.add_argument(flag, type=float, default=None, help=f"default {f.default}")
        else:
            parser.add_argument(flag, default=None, help=f"default {f.default!r}")


def _config_from(args: argparse.Namespace) -> PipelineConfig:
    return _apply_overrides(load_config(args.config), args)


def _atomic_write_text(path: str, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _via_temp(path: str, writer) -> None:
    """Run writer(tmp_path) next to path, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _safe_name(image_id: str) -> str:
    return image_id.replace(os.sep, "__").replace("/", "__").replace("#", "__")


def _resolve(images_root: str, image_id: str) -> str:
    return image_id if os.path.isabs(image_id) else os.path.join(images_root, image_id)


def cmd_saliency(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    gcfg = cfg.gbvs()
    os.makedirs(args.out_dir, exist_ok=True)
    if args.manifest:
        manifest = DatasetManifest.load(args.manifest)
        image_ids = [e.path for e in manifest.entries]
    else:
        image_ids = list(args.images)
    failures = 0
    all_regions: list[tuple[str, list[gbvs.SalientRegion]]] = []
    for image_id in image_ids:
        try:
            img = imaging.load_image(_resolve(args.images_root, image_id))
            sal = gbvs.compute_saliency(img, gcfg)
            regions = gbvs.top_k_regions(sal, gcfg)
        except Exception as exc:  # per-file failure, keep going
            print(f"error: {image_id}: {exc}", file=sys.stderr)
            failures += 1
            continue
        stem = _safe_name(image_id)
        _via_temp(
            os.path.join(args.out_dir, stem + ".saliency.png"),
            lambda tmp: imaging.save_map_png(sal.grid, tmp),
        )
        _via_temp(
            os.path.join(args.out_dir, stem + ".regions.tsv"),
            lambda tmp: gbvs.write_region_records(tmp, [(image_id, regions)]),
        )
        all_regions.append((image_id, regions))
    all_regions.sort(key=lambda pair: pair[0])
    _via_temp(
        os.path.join(args.out_dir, "regions.tsv"),
        lambda tmp: gbvs.write_region_records(tmp, all_regions),
    )
    return 1 if failures else 0


def cmd_split(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    manifest = DatasetManifest.load(args.manifest)
    ratios = tuple(float(v) for v in args.ratios.split(","))
    if len(ratios) != 3:
        raise ValueError(f"expected three ratios, got {args.ratios!r}")
    result = split_dataset(manifest, ratios, cfg.seed)
    _via_temp(args.out, result.save)
    return 0


def _train_branch(branch: str, cfg: PipelineConfig, store, manifest, out_dir: str) -> None:
    from .embeddings import join_embeddings

    path = os.path.join(out_dir, f"{branch}.model")
    if branch == "knn":
        x, y = join_embeddings(store, manifest, "train")
        model = classifiers.KnnClassifier(k=cfg.knn_k, n_classes=len(manifest.labels()))
        model.fit(x, y)
    elif branch == "rf":
        x, y = join_embeddings(store, manifest, "train")
        model = classifiers.RandomForest(
            n_trees=cfg.rf_trees,
            max_depth=cfg.rf_max_depth or None,
            features_per_split=cfg.rf_features_per_split or None,
            bootstrap=bool(cfg.rf_bootstrap),
            seed=cfg.seed,
            n_classes=len(manifest.labels()),
        )
        model.fit(x, y)
    elif branch == "head":
        model = classifiers.train_head(
            store,
            manifest,
            hidden=cfg.head_hidden,
            epochs=cfg.head_epochs,
            batch_size=cfg.head_batch,
            lr=cfg.head_lr,
            seed=cfg.seed,
        )
    else:
        raise ValueError(f"unknown branch {branch!r}")
    _via_temp(path, lambda tmp: classifiers.save_model(model, tmp))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    manifest = DatasetManifest.load(args.manifest)
    store = read_embeddings(args.embeddings)
    os.makedirs(args.out_dir, exist_ok=True)
    branches = ["knn", "rf", "head"] if args.branch == "all" else [args.branch]
    for branch in branches:
        _train_branch(branch, cfg, store, manifest, args.out_dir)
    return 0


def _branch_distributions(
    entry_path: str,
    store: EmbeddingStore,
    knn: classifiers.KnnClassifier,
    rf: classifiers.RandomForest,
    head: classifiers.SoftmaxHead,
    num_regions: int,
) -> dict[str, np.ndarray]:
    vec = np.asarray(store.get(entry_path), dtype=np.float64)
    crop_ids = classifiers.crop_ids_for(store, entry_path)
    if crop_ids:
        crops = np.stack([store.get(cid) for cid in crop_ids]).astype(np.float64)
        head_dist = classifiers.predict_crop_batch(head, crops, expected_count=num_regions)
    else:
        head_dist = head.predict_proba(vec)
    return {
        "gbvs_head": head_dist,
        "knn": knn.predict_proba(vec),
        "random_forest": rf.predict_proba(vec),
    }


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    manifest = DatasetManifest.load(args.manifest)
    store = read_embeddings(args.embeddings)
    knn = classifiers.load_model(os.path.join(args.models_dir, "knn.model"))
    rf = classifiers.load_model(os.path.join(args.models_dir, "rf.model"))
    head = classifiers.load_model(os.path.join(args.models_dir, "head.model"))
    class_names = manifest.labels()
    entries = manifest.entries if args.split == "all" else manifest.subset(args.split)
    if not entries:
        raise ValueError(f"no manifest entries in split {args.split!r}")
    missing = [e.path for e in entries if e.path not in store]
    if missing:
        raise ValueError(f"missing embeddings for {len(missing)} ids: {missing[:10]}")
    records = []
    for e in entries:
        dists = _branch_distributions(e.path, store, knn, rf, head, cfg.num_regions)
        records.append(
            ensemble.make_record(e.path, dists, class_names, cfg.reject_threshold)
        )
    records.sort(key=lambda r: r.image_id)
    _via_temp(args.out, lambda tmp: ensemble.write_prediction_records(tmp, records))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    manifest = DatasetManifest.load(args.manifest)
    records = ensemble.read_prediction_records(args.records)
    truth = {e.path: e.label for e in manifest.entries}
    split_of = {e.path: e.split for e in manifest.entries}
    class_names = manifest.labels()

    by_split: dict[str, list[ensemble.PredictionRecord]] = {}
    for r in records:
        by_split.setdefault(split_of.get(r.image_id) or "all", []).append(r)

    model_reports: list[tuple[str, dict[str, evaluation.EvaluationReport]]] = []
    branch_models = [("gbvs_head", "gbvs_head"), ("knn", "knn"), ("random_forest", "rf")]
    for branch, _tag in branch_models:
        per_split = {}
        for split, recs in by_split.items():
            derived = []
            for r in recs:
                choice = ensemble.decide(r.branch_distributions[branch], cfg.reject_threshold)
                derived.append(
                    ensemble.PredictionRecord(
                        image_id=r.image_id,
                        branch_distributions=r.branch_distributions,
                        ensemble=r.branch_distributions[branch],
                        decision=ensemble.REJECT if choice is None else class_names[choice],
                        confidence=float(np.max(r.branch_distributions[branch])),
                    )
                )
            per_split[split] = evaluation.evaluate(derived, truth, class_names)
        model_reports.append((branch, per_split))
    ensemble_reports = {
        split: evaluation.evaluate(recs, truth, class_names) for split, recs in by_split.items()
    }
    model_reports.append(("ensemble", ensemble_reports))

    splits = tuple(s for s in (*SPLITS, "all") if s in by_split)
    table_text, table_lines = evaluation.comparison_table(model_reports, splits)
    print(table_text)
    for split in splits:
        print(f"\n[ensemble / {split}]")
        print(evaluation.report_to_text(ensemble_reports[split]))
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        _atomic_write_text(os.path.join(args.out_dir, "comparison.tsv"), "".join(l + "\n" for l in table_lines))
        _atomic_write_text(os.path.join(args.out_dir, "comparison.txt"), table_text + "\n")
        for name, per_split in model_reports:
            for split, report in per_split.items():
                lines = evaluation.report_to_lines(report)
                _atomic_write_text(
                    os.path.join(args.out_dir, f"report_{name}_{split}.tsv"),
                    "".join(l + "\n" for l in lines),
                )
    return 0


def cmd_extract_fake(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    manifest = DatasetManifest.load(args.manifest)
    regions = gbvs.read_region_records(args.regions) if args.regions else None
    store = fake_extractor.extract_fake(
        manifest, args.images_root, regions, dim=cfg.embedding_dim, seed=cfg.seed
    )
    _via_temp(args.out, lambda tmp: write_embeddings(store, tmp))
    return 0


def _run_extractor(cfg: PipelineConfig, manifest_path, images_root, regions_path, out_path) -> None:
    if not cfg.extractor_cmd:
        manifest = DatasetManifest.load(manifest_path)
        regions = gbvs.read_region_records(regions_path)
        store = fake_extractor.extract_fake(
            manifest, images_root, regions, dim=cfg.embedding_dim, seed=cfg.seed
        )
        _via_temp(out_path, lambda tmp: write_embeddings(store, tmp))
        return
    cmd = shlex.split(cfg.extractor_cmd) + [
        "--manifest", str(manifest_path),
        "--images-root", str(images_root),
        "--regions", str(regions_path),
        "--out", str(out_path),
        "--dim", str(cfg.embedding_dim),
    ]
    result = subprocess.run(cmd)
    if result.returncode != 0:
        raise RuntimeError(f"extractor failed with exit code {result.returncode}: {cmd}")


def cmd_run_all(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    manifest = DatasetManifest.load(args.manifest)
    if any(e.split is None for e in manifest.entries):
        manifest = split_dataset(manifest, (0.8, 0.1, 0.1), cfg.seed)
    manifest_path = os.path.join(out, "manifest.tsv")
    _via_temp(manifest_path, manifest.save)

    saliency_args = argparse.Namespace(
        config=None,
        manifest=manifest_path,
        images=[],
        images_root=args.images_root,
        out_dir=os.path.join(out, "saliency"),
        **{f.name: getattr(cfg, f.name) for f in dataclasses.fields(PipelineConfig)},
    )
    code = cmd_saliency(saliency_args)
    if code != 0:
        return code

    embeddings_path = os.path.join(out, "embeddings.emb")
    _run_extractor(
        cfg, manifest_path, args.images_root, os.path.join(out, "saliency", "regions.tsv"),
        embeddings_path,
    )

    store = read_embeddings(embeddings_path)
    models_dir = os.path.join(out, "models")
    os.makedirs(models_dir, exist_ok=True)
    for branch in ("knn", "rf", "head"):
        _train_branch(branch, cfg, store, manifest, models_dir)

    predict_args = argparse.Namespace(
        config=None,
        manifest=manifest_path,
        embeddings=embeddings_path,
        models_dir=models_dir,
        split="all",
        out=os.path.join(out, "predictions.tsv"),
        **{f.name: getattr(cfg, f.name) for f in dataclasses.fields(PipelineConfig)},
    )
    code = cmd_predict(predict_args)
    if code != 0:
        return code

    evaluate_args = argparse.Namespace(
        config=None,
        manifest=manifest_path,
        records=os.path.join(out, "predictions.tsv"),
        out_dir=os.path.join(out, "evaluation"),
        **{f.name: getattr(cfg, f.name) for f in dataclasses.fields(PipelineConfig)},
    )
    return cmd_evaluate(evaluate_args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="landmark-ensemble",
        description="Saliency-guided landmark classification pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("saliency", help="saliency grids (PNG) + ranked region records")
    p.add_argument("--manifest", help="manifest naming the images to process")
    p.add_argument("--images", nargs="*", default=[], help="explicit image paths")
    p.add_argument("--images-root", default=".", help="prefix for relative image ids")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("split", help="assign stratified train/val/test splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    _add_config_flags(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fit branch models on the train split")
    p.add_argument("--branch", choices=["knn", "rf", "head", "all"], default="all")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write fused prediction records for a split")
    p.add_argument("--models-dir", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=[*SPLITS, "all"])
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score prediction records against the manifest")
    p.add_argument("--records", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", help="where to write report/comparison files")
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract-fake", help="deterministic stand-in embedding extractor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-root", default=".")
    p.add_argument("--regions", help="region records for crop embeddings")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_extract_fake)

    p = sub.add_parser("run-all", help="split + saliency + extract + train + predict + evaluate")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-root", default=".")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_run_all)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
