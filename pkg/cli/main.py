"""
fgvis — Command-Line Surface
============================
Subcommands:
    train              train the fixture CNN, write an FGV1 model + training log
    explain            mask explanations for one or more images
    validate-defense   adversarial-class success ratio (images or black input)
    deletion-metric    deletion curves and mean AUC for an importance source
    color-bias         colour-swap bias table for a 3-channel data set
    entropy-report     prediction entropy of candidate reference images
    fetch              download the public digit set

Run:
    fgvis explain --model model.fgv --index 0 --game deletion --line-search --out-dir out
    python -m cli validate-defense --model model.fgv --mode black --undefended

Logs go to stderr as JSON lines; summaries go to stdout. Exit code 0 on success,
1 on a reported error, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from engine.defense import run_blackimage_validation, run_defense_validation
from engine.games import ExplanationResult, explain, line_search_lambda, render
from engine.metrics import (
    color_bias_report,
    deletion_curve,
    fgvis_importance,
    input_gradient_importance,
    random_importance,
    reference_entropy_report,
)
from engine.modelfile import load_model, save_model
from engine.network import Network
from engine.trainer import train
from shared.datasets import (
    Dataset,
    DatasetFetcher,
    default_data_dir,
    denormalize,
    load_idx_dataset,
    load_split,
    normalize,
)
from shared.formats import decode_pnm, load_game_config
from shared.middleware import (
    audit_log,
    audited_command,
    default_jobs,
    get_logger,
    run_parallel,
    setup_logging,
)
from shared.models import (
    DefenseConfig,
    DeletionSummaryRow,
    FgvisError,
    GameConfig,
    GameKind,
    RenderKind,
    RunManifest,
    ShapeError,
    TrainConfig,
)
from shared.repository import ArtifactRepository, FileSystemRepository
from shared.tensor import Rng, Tensor

logger = get_logger("cli")


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _load_dataset(args: argparse.Namespace, net: Optional[Network] = None) -> Dataset:
    """--images/--labels IDX pair if given, else the digit-set split under --data-dir."""
    norm = net.normalization if net is not None else None
    if args.images or args.labels:
        if not (args.images and args.labels):
            raise FgvisError("--images and --labels must be given together")
        dataset = load_idx_dataset(args.images, args.labels, norm, name=Path(args.images).stem)
    else:
        dataset = load_split(args.data_dir, args.split, norm)
    if net is not None:
        if dataset.image_shape != net.input_shape:
            raise ShapeError(f"data shape {dataset.image_shape} != model input {net.input_shape}")
        dataset.check_labels(net.num_classes)
    return dataset


def _clip_n(n: int, dataset: Dataset) -> int:
    if n > len(dataset):
        logger.warning("--n %d exceeds data set size; using %d", n, len(dataset))
        return len(dataset)
    return n


def _pixels(x: Tensor, net: Network) -> Tensor:
    return np.clip(denormalize(x, net.normalization), 0.0, 1.0)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@audited_command("train")
def cmd_train(args: argparse.Namespace) -> int:
    train_set = load_split(args.data_dir, "train")
    test_set = load_split(args.data_dir, "test", train_set.normalization)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        momentum=args.momentum,
        seed=args.seed,
    )
    result = train(train_set, test_set, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(result.network, out)
    if args.log:
        FileSystemRepository(Path(args.log).parent).write_csv(Path(args.log).name, result.history)
    if result.below_target:
        audit_log(
            "train.below_target", accuracy=result.accuracy, target=cfg.target_accuracy
        )
    print(f"test accuracy {result.accuracy:.4f}")
    return 0


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------

def _game_config(args: argparse.Namespace) -> GameConfig:
    overrides: dict[str, Any] = {
        "game": args.game,
        "target_class": args.target_class,
        "lambda_": args.lambda_,
        "learning_rate": args.lr,
        "iterations": args.iters,
        "seed": args.seed,
        "defended": False if args.no_defense else None,
    }
    if args.config:
        return load_game_config(args.config, **overrides)
    return GameConfig.model_validate({k: v for k, v in overrides.items() if v is not None})


def _explain_inputs(args: argparse.Namespace, net: Network) -> list[tuple[str, Tensor]]:
    inputs: list[tuple[str, Tensor]] = []
    for path in args.image or ():
        pixels = decode_pnm(Path(path).read_bytes())
        if pixels.shape != net.input_shape:
            raise ShapeError(f"{path}: image shape {pixels.shape} != model input {net.input_shape}")
        inputs.append((Path(path).stem, normalize(pixels, net.normalization)))
    if args.index:
        dataset = _load_dataset(args, net)
        for i in args.index:
            if not 0 <= i < len(dataset):
                raise FgvisError(f"--index {i} out of range for {len(dataset)} images")
            inputs.append((dataset.ids[i], dataset.images[i]))
    if not inputs:
        raise FgvisError("no input image: pass --image FILE or --index N")
    return inputs


def write_explanation(
    repo: ArtifactRepository, prefix: str, result: ExplanationResult, cfg: GameConfig,
    image_id: str, net: Network,
) -> None:
    repo.write_image(f"{prefix}mask", render(result, RenderKind.MASK))
    repo.write_image(f"{prefix}mean_mask", render(result, RenderKind.MEAN_MASK))
    repo.write_image(f"{prefix}explanation", _pixels(render(result, RenderKind.EXPLANATION), net))
    if result.game.removes_evidence:
        repo.write_image(
            f"{prefix}complementary_mask", render(result, RenderKind.COMPLEMENTARY_MASK)
        )
        repo.write_image(
            f"{prefix}deletion_explanation",
            _pixels(render(result, RenderKind.DELETION_EXPLANATION), net),
        )
    manifest = RunManifest(
        image_id=image_id,
        game=result.game,
        target_class=result.target_class,
        original_class=result.original_class,
        original_score=result.original_score,
        explanation_class=result.explanation_class,
        target_score=result.score_of_target,
        chosen_lambda=result.chosen_lambda,
        learning_rate=cfg.learning_rate,
        iterations=result.iterations,
        converged=result.converged,
        defended=cfg.defended,
        seed=cfg.seed,
    )
    repo.write_manifest(f"{prefix}manifest.txt", manifest)


@audited_command("explain")
def cmd_explain(args: argparse.Namespace) -> int:
    net = load_model(args.model)
    cfg = _game_config(args)
    if cfg.target_class is not None and cfg.target_class >= net.num_classes:
        raise FgvisError(f"--target-class {cfg.target_class} >= class count {net.num_classes}")
    inputs = _explain_inputs(args, net)
    repo = FileSystemRepository(args.out_dir)

    def one(item: tuple[str, Tensor]) -> ExplanationResult:
        image_id, x = item
        if args.line_search:
            result = line_search_lambda(net, x, cfg)
        else:
            result = explain(net, x, cfg)
        prefix = f"{image_id}/" if len(inputs) > 1 else ""
        write_explanation(repo, prefix, result, cfg, image_id, net)
        audit_log(
            "explain.done",
            image_id=image_id,
            game=result.game.value,
            chosen_lambda=result.chosen_lambda,
            converged=result.converged,
        )
        return result

    results = run_parallel(one, inputs, args.jobs)
    for (image_id, _), result in zip(inputs, results):
        print(
            f"{image_id}: class {result.original_class} -> {result.explanation_class}, "
            f"target {result.target_class} score {result.score_of_target:.4f}, "
            f"lambda {result.chosen_lambda:g}, converged {str(result.converged).lower()}"
        )
    return 0


# ---------------------------------------------------------------------------
# validate-defense
# ---------------------------------------------------------------------------

@audited_command("validate-defense")
def cmd_validate_defense(args: argparse.Namespace) -> int:
    net = load_model(args.model)
    config = DefenseConfig(seed=args.seed, iterations=args.iters)
    if args.mode == "black":
        report = run_blackimage_validation(net, args.defended, config=config, jobs=args.jobs)
    else:
        dataset = _load_dataset(args, net)
        report = run_defense_validation(
            net, dataset, args.defended, n=args.n, config=config, jobs=args.jobs
        )
    label = "defended" if args.defended else "undefended"
    FileSystemRepository(args.out_dir).write_csv(
        f"defense_{args.mode}_{label}.csv", report.trials
    )
    print(f"{args.mode} {label}: success ratio {report.ratio:.4f} ({len(report.trials)} trials)")
    return 0


# ---------------------------------------------------------------------------
# deletion-metric
# ---------------------------------------------------------------------------

@audited_command("deletion-metric")
def cmd_deletion_metric(args: argparse.Namespace) -> int:
    net = load_model(args.model)
    dataset = _load_dataset(args, net)
    n = _clip_n(args.n, dataset)
    if n <= 0:
        raise FgvisError("deletion metric needs at least one image")
    repo = FileSystemRepository(args.out_dir)
    rng = Rng(args.seed)

    def one(i: int) -> DeletionSummaryRow:
        x = dataset.images[i]
        if args.baseline == "fgvis":
            imp = fgvis_importance(net, x, seed=args.seed)
        elif args.baseline == "random":
            imp = random_importance(x.shape[1:], rng.spawn(i))
        else:
            imp = input_gradient_importance(net, x)
        curve = deletion_curve(net, x, imp)
        image_id = dataset.ids[i]
        repo.write_csv(
            f"curves/{args.baseline}/{image_id}.csv",
            (
                {"fraction": float(f), "probability": float(p)}
                for f, p in zip(curve.fractions, curve.probs)
            ),
            fieldnames=("fraction", "probability"),
        )
        audit_log("metric.deletion", image_id=image_id, baseline=args.baseline, auc=curve.auc)
        return DeletionSummaryRow(image_id=image_id, auc=curve.auc)

    rows = run_parallel(one, range(n), args.jobs)
    repo.write_csv(f"deletion_{args.baseline}.csv", rows)
    mean_auc = float(np.mean([r.auc for r in rows]))
    print(f"{args.baseline}: mean AUC {mean_auc:.6f} over {len(rows)} images")
    return 0


# ---------------------------------------------------------------------------
# color-bias / entropy-report
# ---------------------------------------------------------------------------

@audited_command("color-bias")
def cmd_color_bias(args: argparse.Namespace) -> int:
    net = load_model(args.model)
    dataset = _load_dataset(args, net)
    names = None
    if args.class_names:
        names = [s.strip() for s in Path(args.class_names).read_text().splitlines() if s.strip()]
        if len(names) != net.num_classes:
            raise FgvisError(f"{len(names)} class names for {net.num_classes} classes")
    rows = color_bias_report(net, dataset, names)
    FileSystemRepository(args.out_dir).write_csv("color_bias.csv", rows)
    for row in rows:
        if row.n:
            print(f"{row.ID} {row.class_name}: n={row.n} avg={row.avg:.3f}")
        else:
            print(f"{row.ID} {row.class_name}: n=0")
    return 0


@audited_command("entropy-report")
def cmd_entropy_report(args: argparse.Namespace) -> int:
    net = load_model(args.model)
    dataset = _load_dataset(args, net)
    rows = reference_entropy_report(net, dataset, args.n, Rng(args.seed))
    FileSystemRepository(args.out_dir).write_csv("entropy.csv", rows)
    for row in rows:
        print(f"{row.reference}: {row.mean:.4f} +- {row.std:.4f}")
    return 0


@audited_command("fetch")
def cmd_fetch(args: argparse.Namespace) -> int:
    fetcher = DatasetFetcher.from_env()
    if args.url:
        fetcher.base_url = args.url
    for path in fetcher.fetch(args.data_dir):
        print(path)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="FGV1 model file")


def _add_data_dir(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--data-dir", default=str(default_data_dir()),
        help="Directory with the digit-set IDX files (default: $FGVIS_DATA_DIR or ./data)",
    )


def _add_data(p: argparse.ArgumentParser, split: str = "test") -> None:
    _add_data_dir(p)
    p.add_argument("--split", choices=["train", "test"], default=split,
                   help=f"Digit-set split (default: {split})")
    p.add_argument("--images", help="IDX image file; overrides --data-dir/--split")
    p.add_argument("--labels", help="IDX label file paired with --images")


def _add_run(p: argparse.ArgumentParser, out_dir: str = "out") -> None:
    p.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    p.add_argument("--jobs", type=int, default=default_jobs(),
                   help="Parallel images (default: $FGVIS_JOBS or 1)")
    p.add_argument("--out-dir", default=out_dir, help=f"Output directory (default: {out_dir})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgvis", description="Fine-grained mask explanations with gradient filtering"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train the fixture CNN on the digit set")
    _add_data_dir(p)
    p.add_argument("--out", default="model.fgv", help="Model file (default: model.fgv)")
    p.add_argument("--log", help="Training log CSV (epoch, loss, accuracy)")
    p.add_argument("--epochs", type=int, default=5, help="Epochs (default: 5)")
    p.add_argument("--batch-size", type=int, default=64, help="Batch size (default: 64)")
    p.add_argument("--lr", type=float, default=0.01, help="Learning rate (default: 0.01)")
    p.add_argument("--momentum", type=float, default=0.9, help="Momentum (default: 0.9)")
    p.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("explain", help="Compute mask explanations")
    _add_model(p)
    _add_data(p)
    p.add_argument("--image", action="append", help="PGM/PPM input image (repeatable)")
    p.add_argument("--index", type=int, action="append", help="Data-set image index (repeatable)")
    p.add_argument("--game", choices=[g.value for g in GameKind], default=None,
                   help="Explanation game (default: deletion)")
    p.add_argument("--target-class", type=int, default=None,
                   help="Target class (default: most-likely class)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--lambda", dest="lambda_", type=float, default=None,
                       help="Sparsity weight for a single run (default: 0)")
    group.add_argument("--line-search", action="store_true",
                       help="Search lambda from 1e-4 down to 1e-10")
    p.add_argument("--lr", type=float, default=None, help="Learning rate (default: 0.1)")
    p.add_argument("--iters", type=int, default=None, help="Iterations (default: 500)")
    p.add_argument("--seed", type=int, default=None, help="Random seed (default: 0)")
    p.add_argument("--no-defense", action="store_true", help="Disable gradient filtering")
    p.add_argument("--config", help="key=value run config; flags override its values")
    p.add_argument("--jobs", type=int, default=default_jobs(),
                   help="Parallel images (default: $FGVIS_JOBS or 1)")
    p.add_argument("--out-dir", default="out", help="Output directory (default: out)")
    p.set_defaults(handler=cmd_explain)

    p = sub.add_parser("validate-defense", help="Adversarial-class success ratio")
    _add_model(p)
    _add_data(p)
    p.add_argument("--mode", choices=["images", "black"], default="images",
                   help="Image-seeded or black-image protocol (default: images)")
    p.add_argument("--n", type=int, default=100, help="Images to test (default: 100)")
    defended = p.add_mutually_exclusive_group()
    defended.add_argument("--defended", dest="defended", action="store_true", default=True,
                          help="Filter gradients at clip sites (default)")
    defended.add_argument("--undefended", dest="defended", action="store_false",
                          help="Plain backpropagation")
    p.add_argument("--iters", type=int, default=500, help="Iterations per trial (default: 500)")
    _add_run(p)
    p.set_defaults(handler=cmd_validate_defense)

    p = sub.add_parser("deletion-metric", help="Deletion curves and mean AUC")
    _add_model(p)
    _add_data(p)
    p.add_argument("--baseline", choices=["fgvis", "random", "input-gradient"], default="fgvis",
                   help="Importance source (default: fgvis)")
    p.add_argument("--n", type=int, default=100, help="Images to evaluate (default: 100)")
    _add_run(p)
    p.set_defaults(handler=cmd_deletion_metric)

    p = sub.add_parser("color-bias", help="Colour-swap bias table")
    _add_model(p)
    _add_data(p)
    p.add_argument("--class-names", help="Text file with one class name per line")
    _add_run(p)
    p.set_defaults(handler=cmd_color_bias)

    p = sub.add_parser("entropy-report", help="Entropy of candidate reference images")
    _add_model(p)
    _add_data(p)
    p.add_argument("--n", type=int, default=100, help="Trials per reference (default: 100)")
    _add_run(p)
    p.set_defaults(handler=cmd_entropy_report)

    p = sub.add_parser("fetch", help="Download the public digit set")
    p.add_argument("--data-dir", default=str(default_data_dir()),
                   help="Destination directory (default: $FGVIS_DATA_DIR or ./data)")
    p.add_argument("--url", help="Mirror base URL (default: $FGVIS_DATA_URL)")
    p.set_defaults(handler=cmd_fetch)

    return parser


# ---------------------------------------------------------------------------
# Entrypoint
# ---------------------------------------------------------------------------

def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        return args.handler(args)
    except (FgvisError, ValidationError, OSError) as exc:
        print(f"fgvis {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
