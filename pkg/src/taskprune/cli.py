"""Command-line front end.

Each subcommand wraps one library stage; `run` chains the full
device/cloud pipeline and renders report figures next to the JSON/CSV
artifacts.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import datagen, jsonio, plots
from .errors import ValidationError
from .gmm import load_params, save_params, select_k_bic
from .importance import (
    layer_importance,
    layer_scores_from_raw,
    load_scores,
    neuron_scores,
    save_scores,
    EstimatorConfig,
)
from .metric import FeatureExtractor, construct_metric_dataset, extract_features, load_manifest, save_manifest
from .nn.checkpoint import load_model, save_model
from .nn.model import evaluate_accuracy
from .orchestrator import (
    PipelineConfig,
    audit_privacy,
    compute_device_scores,
    grid_search_weights,
    load_config,
    run_pipeline,
)
from .pruner import finetune, prune_to_target, save_report
from .sensitivity import save_divergence, task_divergence_matrix


def _weights(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated weights a,b,g")
    return tuple(float(p) for p in parts)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskprune",
        description="Per-device structured pruning of small vision transformers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenario", help="generate a synthetic multi-device scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--devices", type=int, default=10)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--pool-per-class", type=int, default=100)
    p.add_argument("--device-per-class", type=int, default=100)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.25)

    p = sub.add_parser("train-base", help="train the shared base model on the pool")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn", type=int, default=64)

    p = sub.add_parser("fit-gmm", help="device side: fit the mixture upload")
    p.add_argument("--scenario", required=True)
    p.add_argument("--device", type=int, required=True)
    p.add_argument("--model", required=True, help="base model checkpoint for feature extraction")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=10)

    p = sub.add_parser("build-metric", help="cloud side: select the proxy dataset")
    p.add_argument("--gmm", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--device-id", default="")

    p = sub.add_parser("score", help="neuron and layer importance on a metric set")
    p.add_argument("--metric", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", type=_weights, default=(0.1, 0.1, 0.8))
    p.add_argument("--mi-bins", type=int, default=16)
    p.add_argument("--invert-layer-budget", action="store_true")

    p = sub.add_parser("prune", help="allocate budgets and remove units")
    p.add_argument("--model", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--epsilon-max", type=float, default=0.9)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--device-id", default="")
    p.add_argument("--invert-layer-budget", action="store_true")

    p = sub.add_parser("finetune", help="head-only recovery on the metric set")
    p.add_argument("--model", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on scenario data")
    p.add_argument("--model", required=True)
    p.add_argument("--scenario", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--device", type=int)
    group.add_argument("--pool", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("run", help="full pipeline over every device")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--weights", type=_weights)
    p.add_argument("--invert-layer-budget", action="store_true")
    p.add_argument("--variant", choices=("tap", "random-prune", "shared-metric"))

    p = sub.add_parser("sensitivity", help="cross-device ranking divergence analyses")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--weights", type=_weights)

    p = sub.add_parser("grid-search", help="criterion-weight simplex search")
    p.add_argument("--config", required=True)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    return parser


def _load_config_overrides(args) -> PipelineConfig:
    config = load_config(args.config)
    if getattr(args, "out", None):
        config.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "epsilon", None) is not None:
        config.epsilon_t = args.epsilon
    if getattr(args, "weights", None) is not None:
        config.weights = tuple(args.weights)
    if getattr(args, "invert_layer_budget", False):
        config.invert_layer_budget = True
    if getattr(args, "variant", None):
        config.variant = args.variant
    config.validate()
    return config


def _cmd_gen_scenario(args) -> int:
    spec = datagen.ScenarioSpec(
        num_devices=args.devices,
        num_classes=args.classes,
        pool_per_class=args.pool_per_class,
        device_per_class=args.device_per_class,
        image_size=args.image_size,
        patch_size=args.patch_size,
        noise=args.noise,
        seed=args.seed,
    )
    scenario = datagen.generate_scenario(spec)
    datagen.save_scenario(args.out, scenario)
    print(
        f"scenario: {args.devices} devices, {args.classes} classes, "
        f"pool {len(scenario.pool_labels)} samples -> {args.out}"
    )
    return 0


def _cmd_train_base(args) -> int:
    scenario = datagen.load_scenario(args.scenario)
    arch = datagen.ArchConfig(
        d=args.dim,
        num_layers=args.layers,
        num_heads=args.heads,
        ffn_width=args.ffn,
        patch_size=scenario.spec.patch_size,
    )
    model = datagen.train_toy_model(
        scenario.pool_images,
        scenario.pool_labels,
        arch,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
    )
    save_model(args.out, model)
    patches = datagen.patchify(scenario.pool_images, scenario.spec.patch_size)
    acc = evaluate_accuracy(model, patches, scenario.pool_labels)
    print(f"base model: pool accuracy {acc:.4f}, {model.param_count()} params -> {args.out}")
    return 0


def _cmd_fit_gmm(args) -> int:
    scenario = datagen.load_scenario(args.scenario)
    if not (0 <= args.device < scenario.num_devices):
        raise ValidationError(f"device {args.device} out of range")
    model = load_model(args.model)
    extractor = FeatureExtractor(model=model, patch_size=scenario.spec.patch_size)
    features = extract_features(extractor, scenario.device_images[args.device])
    params, chosen_k, bics = select_k_bic(
        features, range(args.k_min, args.k_max + 1), seed=args.seed
    )
    save_params(args.out, params)
    print(f"device {args.device}: K={chosen_k} (BIC {min(bics):.2f}) -> {args.out}")
    return 0


def _cmd_build_metric(args) -> int:
    scenario = datagen.load_scenario(args.scenario)
    model = load_model(args.model)
    params = load_params(args.gmm)
    extractor = FeatureExtractor(model=model, patch_size=scenario.spec.patch_size)
    pool_features = extract_features(extractor, scenario.pool_images)
    metric = construct_metric_dataset(
        params, pool_features, args.size, device_id=args.device_id
    )
    save_manifest(args.out, metric)
    print(f"metric dataset: {metric.size} of {len(pool_features)} pool samples -> {args.out}")
    return 0


def _cmd_score(args) -> int:
    scenario = datagen.load_scenario(args.scenario)
    model = load_model(args.model)
    metric = load_manifest(args.metric)
    patches = datagen.patchify(scenario.pool_images, scenario.spec.patch_size)
    metric_patches = patches[metric.indices]
    scores = neuron_scores(
        model,
        metric_patches,
        weights=args.weights,
        config=EstimatorConfig(mi_bins=args.mi_bins),
    )
    lscores = layer_importance(model, metric_patches, invert=args.invert_layer_budget)
    save_scores(args.out, scores, lscores)
    print(f"scored {sum(e.ffn.width + e.mha.width for e in scores.layers)} units -> {args.out}")
    return 0


def _cmd_prune(args) -> int:
    model = load_model(args.model)
    scores, lscores = load_scores(args.scores)
    if lscores is None:
        raise ValidationError("scores file carries no layer scores; rerun `score`")
    if args.invert_layer_budget:
        lscores = layer_scores_from_raw(lscores.delta_raw, invert=True)
    pruned, report, _ = prune_to_target(
        model,
        scores,
        lscores,
        args.epsilon,
        epsilon_max=args.epsilon_max,
        device_id=args.device_id,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "pruned.bin", pruned)
    save_report(out / "prune_report.json", report)
    plots.budget_bars(report.per_layer, out / "budgets.png")
    print(
        f"pruned {report.params_before - report.params_after} of {report.params_before} "
        f"params (retention {report.retention:.4f}) -> {out}"
    )
    return 0


def _cmd_finetune(args) -> int:
    scenario = datagen.load_scenario(args.scenario)
    model = load_model(args.model)
    metric = load_manifest(args.metric)
    patches = datagen.patchify(scenario.pool_images, scenario.spec.patch_size)
    tuned, report = finetune(
        model,
        patches[metric.indices],
        scenario.pool_labels[metric.indices],
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "final.bin", tuned)
    jsonio.dump(
        {
            "train_loss": report.train_loss,
            "reference_ce": report.reference_ce,
            "best_epoch": report.best_epoch,
        },
        out / "finetune.json",
    )
    print(
        f"finetuned: cross-entropy {report.reference_ce[0]:.4f} -> "
        f"{report.reference_ce[report.best_epoch]:.4f} (epoch {report.best_epoch}) -> {out}"
    )
    return 0


def _cmd_evaluate(args) -> int:
    scenario = datagen.load_scenario(args.scenario)
    model = load_model(args.model)
    if args.pool:
        images, labels = scenario.pool_images, scenario.pool_labels
        subject = "pool"
    else:
        if not (0 <= args.device < scenario.num_devices):
            raise ValidationError(f"device {args.device} out of range")
        images, labels = scenario.device_images[args.device], scenario.device_labels[args.device]
        subject = f"dev_{args.device}"
    patches = datagen.patchify(images, scenario.spec.patch_size)
    acc = evaluate_accuracy(model, patches, labels)
    print(f"{subject}: accuracy {acc:.4f} over {len(labels)} samples")
    if args.out:
        jsonio.dump({"subject": subject, "accuracy": acc, "count": len(labels)}, args.out)
    return 0


def _cmd_run(args) -> int:
    config = _load_config_overrides(args)
    result = run_pipeline(config)
    out = Path(result.out_dir)
    audit = audit_privacy(out, config.scenario_dir)
    jsonio.dump(audit, out / "audit.json")
    plots.accuracy_bars(result.devices, out / "accuracy.png")
    for device in result.devices:
        if device.failure is None:
            report = jsonio.load(out / "devices" / device.device_id / "prune_report.json")
            plots.budget_bars(report["per_layer"], out / "budgets.png")
            break
    print(
        f"weighted accuracy: dense {result.weighted_before:.4f}, "
        f"pruned {result.weighted_after:.4f}, finetuned {result.weighted_final:.4f}"
    )
    if result.failures:
        print(f"failures: {len(result.failures)}", file=sys.stderr)
        for line in result.failures:
            print(f"  {line}", file=sys.stderr)
    print(f"privacy audit: {'ok' if audit['ok'] else 'VIOLATIONS'} -> {out}")
    return 0 if not result.failures else 1


def _cmd_sensitivity(args) -> int:
    config = _load_config_overrides(args)
    scenario, base, entries = compute_device_scores(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = task_divergence_matrix(
        [e["scores"] for e in entries], [e["device_id"] for e in entries]
    )
    save_divergence(out / "divergence.csv", out / "divergence.json", result)
    plots.divergence_heatmap(result, out / "divergence.png")
    profiles = [(e["device_id"], e["layer_scores"]) for e in entries]
    plots.layer_profiles(profiles, out / "layer_profiles.png")
    jsonio.dump(
        {
            "version": 1,
            "profiles": [
                {
                    "device_id": label,
                    "delta_raw": scores.delta_raw.tolist(),
                    "delta": scores.delta.tolist(),
                }
                for label, scores in profiles
            ],
        },
        out / "layer_profiles.json",
    )
    off_diag = result.tau[~np.eye(len(entries), dtype=bool)]
    print(
        f"{len(entries)} devices: mean cross-task tau {off_diag.mean():.4f} "
        f"(divergence {(1 - off_diag.mean()) / 2:.4f}) -> {out}"
    )
    return 0


def _cmd_grid_search(args) -> int:
    config = _load_config_overrides(args)
    result = grid_search_weights(config, step=args.step)
    out = Path(config.out_dir)
    plots.grid_heatmap(result.table, out / "grid.png")
    alpha, beta, gamma = result.best
    print(
        f"{len(result.table)} configurations; best weights "
        f"({alpha:g}, {beta:g}, {gamma:g}) -> {out}"
    )
    return 0


_COMMANDS = {
    "gen-scenario": _cmd_gen_scenario,
    "train-base": _cmd_train_base,
    "fit-gmm": _cmd_fit_gmm,
    "build-metric": _cmd_build_metric,
    "score": _cmd_score,
    "prune": _cmd_prune,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "run": _cmd_run,
    "sensitivity": _cmd_sensitivity,
    "grid-search": _cmd_grid_search,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
