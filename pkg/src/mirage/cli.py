"""Command-line entry point wiring all pipeline stages.

Exit codes: 0 success, 1 validation/configuration error, 2 transport error,
64 usage error (unknown flags or subcommands). Every run ends by printing a
one-line machine-readable JSON summary to stdout.
"""

from __future__ import annotations

import itertools
import json
import logging
import sys
from pathlib import Path

import click
from PIL import Image

from . import backends as be
from .config import load_config
from .core import ImageRef, read_image, read_mask_png, read_tensor
from .errors import (CalibrationError, ConfigurationError, MirageError,
                     TransportError, ValidationError)
from .genclient import (GenerationPlan, Manifest, RateLimiter, run_generation)
from .promptgen import ProposalRequest, load_defects, propose_defects

log = logging.getLogger("mirage")


def _require(value, flag):
    if value is None:
        raise ValidationError(f"missing required option {flag}")
    return value


def _logical_clock(start=0.0):
    counter = itertools.count()
    return lambda: start + float(next(counter))


def _manifest_clock(manifest_path, mock):
    """Deterministic logical timestamps for seeded mock runs."""
    if not mock:
        import time

        return time.time
    start = 0.0
    p = Path(manifest_path)
    if p.exists():
        stamps = []
        with open(p) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    stamps.append(json.loads(line).get("updated_at") or 0.0)
        if stamps:
            start = max(stamps) + 1.0
    return _logical_clock(start)


def _normal_pool(normals_dir, category):
    root = Path(normals_dir)
    base = root / category if (root / category).is_dir() else root
    paths = sorted(base.glob("*.png")) + sorted(base.glob("*.jpg"))
    if not paths:
        raise ValidationError(f"no normal images for {category!r} under {root}")
    refs = []
    for p in paths:
        with Image.open(p) as img:
            w, h = img.size
        refs.append(ImageRef(path=str(p), category=category, role="normal",
                             width=w, height=h))
    return refs


def _emit(summary):
    click.echo(json.dumps(summary, sort_keys=True))


@click.group(name="mirage")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="TOML config file; flags and MIRAGE_* env vars override it.")
@click.option("--seed", type=int, default=None, help="Global RNG seed.")
@click.option("--verbose", is_flag=True, default=False)
@click.pass_context
def cli(ctx, config_path, seed, verbose):
    """Synthetic anomaly generation, mask creation, and benchmarking."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(config_path, overrides={"seed": seed})
    ctx.obj = {"config": cfg}


def _cfg(ctx):
    return ctx.obj["config"]


# ---------------------------------------------------------------------------
# propose


@cli.command()
@click.option("--category", default=None)
@click.option("--normals", "normals_dir", type=click.Path(), default=None)
@click.option("--backend", type=click.Choice(["http", "mock"]), default="mock")
@click.option("--count", type=int, default=None)
@click.option("--k", "k_images", type=int, default=None,
              help="Number of reference images shown to the proposer.")
@click.option("--responses", "responses_dir", type=click.Path(), default=None,
              help="Canned responses directory for the mock backend.")
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.pass_context
def propose(ctx, category, normals_dir, backend, count, k_images,
            responses_dir, out_path):
    """Propose defect types for a category from its normal images."""
    cfg = _cfg(ctx)
    category = _require(category, "--category")
    normals_dir = _require(normals_dir, "--normals")
    out_path = _require(out_path, "--out")
    count = count or cfg.defect_count
    k = k_images or cfg.reference_images
    pool = _normal_pool(normals_dir, category)
    refs = tuple(pool[:k])
    req = ProposalRequest(category=category, reference_images=refs, count=count)
    if backend == "mock":
        proposer = be.MockProposer(responses_dir=responses_dir)
    else:
        if not cfg.proposer_endpoint:
            raise ConfigurationError("proposer_endpoint is not configured")
        proposer = be.HttpProposer(cfg.proposer_endpoint,
                                   auth_env=cfg.proposer_auth_env,
                                   max_retries=cfg.max_retries,
                                   backoff_base=cfg.backoff_base)
    defects = propose_defects(req, proposer, out_path=out_path)
    _emit({"command": "propose", "category": category, "defects": len(defects),
           "out": str(out_path), "seed": cfg.seed})


# ---------------------------------------------------------------------------
# generate


@cli.command()
@click.option("--defects", "defects_path", type=click.Path(), default=None)
@click.option("--normals", "normals_dir", type=click.Path(), default=None)
@click.option("--per-defect", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--backend", type=click.Choice(["http", "mock"]), default="mock")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--max-workers", type=int, default=None)
@click.pass_context
def generate(ctx, defects_path, normals_dir, per_defect, seed, backend,
             out_dir, max_workers):
    """Generate anomalous images for every (defect, normal image) pair."""
    cfg = _cfg(ctx)
    defects_path = _require(defects_path, "--defects")
    normals_dir = _require(normals_dir, "--normals")
    out_dir = _require(out_dir, "--out")
    seed = cfg.seed if seed is None else seed
    per_defect = per_defect or cfg.per_defect
    defects = load_defects(defects_path)
    if not defects:
        raise ValidationError(f"defects file {defects_path} is empty")
    by_category = {}
    for d in defects:
        by_category.setdefault(d.category, []).append(d)

    mock = backend == "mock"
    if mock:
        generator = be.MockGenerator(seed=seed)
        sleep = lambda _s: None
    else:
        import time

        if not cfg.generator_endpoint:
            raise ConfigurationError("generator_endpoint is not configured")
        generator = be.HttpGenerator(cfg.generator_endpoint,
                                     auth_env=cfg.generator_auth_env,
                                     max_retries=0)
        sleep = time.sleep
    limiter = RateLimiter(cfg.rate_per_sec) if cfg.rate_per_sec > 0 else None

    manifest_path = Path(out_dir) / "manifest.jsonl"
    manifest = Manifest.load(manifest_path, clock=_manifest_clock(manifest_path, mock))
    for category in sorted(by_category):
        plan = GenerationPlan(category=category,
                              defects=tuple(by_category[category]),
                              normal_pool=tuple(_normal_pool(normals_dir, category)),
                              per_defect=per_defect, seed=seed)
        run_generation(plan, generator, manifest, out_dir,
                       max_workers=max_workers or cfg.max_workers,
                       max_retries=cfg.max_retries,
                       backoff_base=cfg.backoff_base, sleep=sleep,
                       rate_limiter=limiter)
    _emit({"command": "generate", "out": str(out_dir), "seed": seed,
           "statuses": manifest.status_counts()})


# ---------------------------------------------------------------------------
# filter


@cli.command(name="filter")
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
@click.option("--backend", type=click.Choice(["clip", "mock"]), default="mock")
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.pass_context
def filter_cmd(ctx, manifest_path, backend, report_path):
    """Apply the similarity retention conditions to generated records."""
    from .filtering import filter_manifest
    from .reporting import render_filter_report

    cfg = _cfg(ctx)
    manifest_path = _require(manifest_path, "--manifest")
    mock = backend == "mock"
    embedder = (be.MockEmbedder(seed=cfg.seed) if mock
                else be.ClipEmbedder(cfg.embedder_model))
    manifest = Manifest.load(manifest_path, clock=_manifest_clock(manifest_path, mock))
    summary = filter_manifest(manifest, embedder)
    manifest.save()
    if report_path:
        render_filter_report(summary, report_path)
    _emit({"command": "filter", "seed": cfg.seed,
           "statuses": manifest.status_counts(),
           "report": str(report_path) if report_path else None})


# ---------------------------------------------------------------------------
# calibrate


def _extractors(cfg, semantic_backend, structural_backend, seed):
    if semantic_backend == "mock":
        sem = be.default_semantic_mock(seed=seed)
    else:
        sem = be.GroundingDetectorExtractor()
    if structural_backend == "mock":
        struct = be.default_structural_mock(seed=seed)
    else:
        if not getattr(cfg, "structural_weights", ""):
            raise ConfigurationError("structural_weights is not configured")
        struct = be.SegmentationBackboneExtractor(cfg.structural_weights)
    return sem, struct


@cli.command()
@click.option("--category", default=None)
@click.option("--scores", "scores_dir", type=click.Path(), default=None,
              help="Directory of <record_id>.mten score maps.")
@click.option("--refs", "refs_dir", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--manifest", "manifest_path", type=click.Path(), default=None,
              help="Compute missing score maps on the fly from this manifest.")
@click.option("--semantic-backend", type=click.Choice(["gdino", "mock"]),
              default="mock")
@click.option("--structural-backend", type=click.Choice(["segyolo", "mock"]),
              default="mock")
@click.pass_context
def calibrate(ctx, category, scores_dir, refs_dir, out_path, manifest_path,
              semantic_backend, structural_backend):
    """Calibrate the binarization threshold against reference masks."""
    from .core import ScoreMap
    from .maskgen import (calibrate_threshold, compute_score_map,
                          load_calibration, save_calibration, threshold_sweep)
    from .reporting import render_calibration_report

    cfg = _cfg(ctx)
    category = _require(category, "--category")
    refs_dir = _require(refs_dir, "--refs")
    out_path = _require(out_path, "--out")
    ref_paths = sorted(Path(refs_dir).glob("*.png"))
    if not ref_paths:
        raise ValidationError(f"no reference masks under {refs_dir}")

    score_maps, refs = [], []
    manifest = Manifest.load(manifest_path) if manifest_path else None
    sem = struct = None
    for ref_path in ref_paths:
        record_id = ref_path.stem
        refs.append(read_mask_png(ref_path))
        mten = Path(scores_dir) / f"{record_id}.mten" if scores_dir else None
        if mten is not None and mten.exists():
            score_maps.append(ScoreMap(read_tensor(mten)))
            continue
        if manifest is None or record_id not in manifest:
            raise ValidationError(
                f"no score map for reference {record_id!r}: provide --scores "
                f"or a --manifest containing the record")
        if sem is None:
            sem, struct = _extractors(cfg, semantic_backend, structural_backend,
                                      cfg.seed)
        record = manifest.get(record_id)
        _, normal = read_image(record.normal_image.path)
        _, anomalous = read_image(record.generated_image.path)
        score_maps.append(compute_score_map(normal, anomalous,
                                            record.defect.keywords, sem, struct))

    result = calibrate_threshold(score_maps, refs, category=category,
                                 num_candidates=cfg.threshold_candidates)
    results = load_calibration(out_path) if Path(out_path).exists() else {}
    results[category] = result
    save_calibration(results, out_path)
    taus, values = threshold_sweep(score_maps, refs, cfg.threshold_candidates)
    render_calibration_report(results, Path(out_path).with_suffix(".report.json"),
                              sweeps={category: (taus.tolist(), values.tolist())})
    _emit({"command": "calibrate", "category": category, "seed": cfg.seed,
           "tau_star": result.tau_star, "criterion": result.criterion_value,
           "references": result.num_reference_masks, "out": str(out_path)})


# ---------------------------------------------------------------------------
# mask


@cli.command()
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
@click.option("--semantic-backend", type=click.Choice(["gdino", "mock"]),
              default="mock")
@click.option("--structural-backend", type=click.Choice(["segyolo", "mock"]),
              default="mock")
@click.option("--calibration", "calibration_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Dataset root; defaults to the manifest's directory.")
@click.pass_context
def mask(ctx, manifest_path, semantic_backend, structural_backend,
         calibration_path, out_dir):
    """Create calibrated binary masks for every retained generated record."""
    from .maskgen import load_calibration, mask_pipeline

    cfg = _cfg(ctx)
    manifest_path = _require(manifest_path, "--manifest")
    calibration_path = _require(calibration_path, "--calibration")
    calibration = load_calibration(calibration_path)
    mock = semantic_backend == "mock" and structural_backend == "mock"
    sem, struct = _extractors(cfg, semantic_backend, structural_backend, cfg.seed)
    root = Path(out_dir) if out_dir else Path(manifest_path).parent
    manifest = Manifest.load(manifest_path, clock=_manifest_clock(manifest_path, mock))
    masked = failed = 0
    for record in manifest.records():
        if record.status != "generated":
            continue
        updated = mask_pipeline(record, sem, struct, calibration, root)
        manifest.update(updated)
        if updated.status == "masked":
            masked += 1
        else:
            failed += 1
    manifest.save()
    _emit({"command": "mask", "seed": cfg.seed, "masked": masked,
           "failed": failed, "statuses": manifest.status_counts()})


# ---------------------------------------------------------------------------
# eval


@cli.group()
def eval():
    """Evaluation reports (quality metrics, mask quality, downstream)."""


@eval.command()
@click.option("--dataset", "dataset_dir", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--classes", type=int, default=10, help="Mock classifier classes.")
@click.pass_context
def quality(ctx, dataset_dir, out_path, classes):
    """Inception score and intra-cluster perceptual distance per category."""
    from .metrics import ClassDistribution, ic_lpips, inception_score
    from .reporting import render_quality_report

    cfg = _cfg(ctx)
    dataset_dir = _require(dataset_dir, "--dataset")
    out_path = _require(out_path, "--out")
    classifier = be.MockClassifier(num_classes=classes, seed=cfg.seed)
    perceptual = be.MockPerceptualDistance()
    root = Path(dataset_dir)
    per_category = {}
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        anomalous = cat_dir / "anomalous"
        if not anomalous.is_dir():
            continue
        clusters = []
        dists = []
        for defect_dir in sorted(p for p in anomalous.iterdir() if p.is_dir()):
            images = [read_image(p)[1] for p in sorted(defect_dir.glob("*.png"))]
            dists.extend(ClassDistribution(classifier.class_distribution(im))
                         for im in images)
            if len(images) >= 2:
                clusters.append(images)
            else:
                log.warning("skipping singleton cluster %s", defect_dir)
        if not dists:
            continue
        per_category[cat_dir.name] = {
            "inception_score": inception_score(dists),
            "ic_lpips": ic_lpips(clusters, perceptual) if clusters else 0.0,
        }
    if not per_category:
        raise ValidationError(f"no generated images under {root}")
    import numpy as np

    report = {"per_category": per_category,
              "mean": {"inception_score": float(np.mean(
                           [r["inception_score"] for r in per_category.values()])),
                       "ic_lpips": float(np.mean(
                           [r["ic_lpips"] for r in per_category.values()]))},
              "seed": cfg.seed}
    render_quality_report(report, out_path)
    _emit({"command": "eval.quality", "out": str(out_path), "seed": cfg.seed,
           "categories": len(per_category)})


@eval.command(name="masks")
@click.option("--scores", "scores_dir", type=click.Path(), default=None)
@click.option("--gts", "gts_dir", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.pass_context
def masks_cmd(ctx, scores_dir, gts_dir, out_path):
    """Pixel AUROC of stored score maps against ground-truth masks."""
    from .core import ScoreMap
    from .metrics import pixel_auroc
    from .reporting import render_mask_eval_report

    cfg = _cfg(ctx)
    scores_dir = _require(scores_dir, "--scores")
    gts_dir = _require(gts_dir, "--gts")
    score_files = sorted(Path(scores_dir).rglob("*.mten"))
    if not score_files:
        raise ValidationError(f"no score maps under {scores_dir}")
    by_category = {}
    skipped = 0
    for sf in score_files:
        rel = sf.relative_to(scores_dir)
        # prefer a mirrored relative layout; fall back to a stem search
        # restricted to mask-like files (single-channel reference PNGs)
        mirrored = (Path(gts_dir) / rel).with_suffix(".png")
        if mirrored.exists():
            gt_path = mirrored
        else:
            matches = sorted(p for p in Path(gts_dir).rglob(sf.stem + ".png")
                             if "anomalous" not in p.parts
                             and "normal" not in p.parts)
            if not matches:
                skipped += 1
                log.warning("no ground-truth mask for %s; skipped", sf.stem)
                continue
            gt_path = matches[0]
        category = (rel.parts[0] if len(rel.parts) > 2 and "scores" in rel.parts
                    else "all")
        by_category.setdefault(category, []).append(
            (ScoreMap(read_tensor(sf)), read_mask_png(gt_path)))
    if not by_category:
        raise ValidationError(
            f"no score map under {scores_dir} has a ground-truth mask in {gts_dir}")
    per_category = {}
    all_pairs = []
    for cat, pairs in sorted(by_category.items()):
        per_category[cat] = {"pixel_auroc": pixel_auroc(*zip(*pairs))}
        all_pairs.extend(pairs)
    report = {"per_category": per_category,
              "mean": {"pixel_auroc": pixel_auroc(*zip(*all_pairs))},
              "seed": cfg.seed}
    if out_path:
        render_mask_eval_report(report, out_path)
    _emit({"command": "eval.masks", "seed": cfg.seed,
           "mean_pixel_auroc": report["mean"]["pixel_auroc"],
           "pairs": len(all_pairs), "skipped": skipped,
           "out": str(out_path) if out_path else None})


@eval.command()
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
@click.option("--normals", "normals_dir", type=click.Path(), default=None)
@click.option("--test", "test_dir", type=click.Path(), default=None)
@click.option("--config", "train_config_path", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.pass_context
def downstream(ctx, manifest_path, normals_dir, test_dir, train_config_path,
               out_path):
    """Train the segmenter on synthetic pairs and evaluate on a test set."""
    from .downstream import (EvalReport, TrainConfig, assemble_training_set,
                             evaluate_segmenter, load_test_set, train_segmenter)
    from .reporting import render_downstream_report

    cfg = _cfg(ctx)
    manifest_path = _require(manifest_path, "--manifest")
    normals_dir = _require(normals_dir, "--normals")
    test_dir = _require(test_dir, "--test")
    out_path = _require(out_path, "--out")
    train_cfg = (TrainConfig.from_file(train_config_path) if train_config_path
                 else TrainConfig(seed=cfg.seed))
    manifest = Manifest.load(manifest_path)
    datasets = assemble_training_set(manifest, normals_dir, train_cfg)
    test_samples = load_test_set(test_dir)

    per_category = {}
    loss_curves = {}
    for category, samples in datasets.items():
        model, curve = train_segmenter(samples, train_cfg)
        loss_curves[category] = curve
        cat_test = [s for s in test_samples if s.category == category]
        if not cat_test:
            log.warning("no test samples for category %s; skipping eval", category)
            continue
        report = evaluate_segmenter(model, cat_test)
        per_category.update(report.per_category)
    if not per_category:
        raise ValidationError("no categories were evaluated")
    import numpy as np

    merged = EvalReport(
        per_category=per_category,
        mean_image_auroc=float(np.mean([r["image_auroc"] for r in per_category.values()])),
        mean_pixel_auroc=float(np.mean([r["pixel_auroc"] for r in per_category.values()])))
    payload = merged.to_dict()
    payload["train_config"] = train_cfg.__dict__
    render_downstream_report(payload, out_path, loss_curves=loss_curves)
    _emit({"command": "eval.downstream", "out": str(out_path),
           "seed": train_cfg.seed,
           "mean_image_auroc": merged.mean_image_auroc,
           "mean_pixel_auroc": merged.mean_pixel_auroc})


# ---------------------------------------------------------------------------
# study


@cli.group()
def study():
    """Human pairwise study service and offline ranking."""


@study.command()
@click.option("--pools", "pools_path", type=click.Path(), default=None)
@click.option("--port", type=int, default=8000)
@click.option("--host", default="127.0.0.1")
@click.option("--votes", "votes_path", type=click.Path(), default=None)
@click.option("--app-dir", "app_dir", type=click.Path(), default=None,
              help="Static directory served at /app (the voting UI build).")
@click.pass_context
def serve(ctx, pools_path, port, host, votes_path, app_dir):
    """Serve the blinded pairwise study HTTP API (blocking)."""
    from .study import load_pools, serve_study

    cfg = _cfg(ctx)
    pools_path = _require(pools_path, "--pools")
    votes_path = _require(votes_path, "--votes")
    pool = load_pools(pools_path)
    _emit({"command": "study.serve", "host": host, "port": port,
           "seed": cfg.seed, "votes": str(votes_path)})
    serve_study(pool, votes_path, port=port, host=host, seed=cfg.seed,
                app_dir=app_dir)


@study.command()
@click.option("--votes", "votes_path", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.pass_context
def rank(ctx, votes_path, out_path):
    """Rank methods from a vote log."""
    from .reporting import render_ranking_report
    from .study import rank_methods, read_vote_log

    cfg = _cfg(ctx)
    votes_path = _require(votes_path, "--votes")
    if not Path(votes_path).exists():
        raise ValidationError(f"vote log not found: {votes_path}")
    ratings = rank_methods(read_vote_log(votes_path))
    if out_path:
        render_ranking_report(ratings, out_path)
    _emit({"command": "study.rank", "seed": cfg.seed,
           "ranking": [r.to_dict() for r in ratings],
           "out": str(out_path) if out_path else None})


# ---------------------------------------------------------------------------
# entry point


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="mirage", standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        click.echo(exc.format_message(), err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return 64
    except click.ClickException as exc:
        exc.show()
        return 1
    except TransportError as exc:
        click.echo(f"transport error: {exc}", err=True)
        return 2
    except MirageError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
