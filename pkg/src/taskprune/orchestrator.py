"""Device/cloud pipeline, controls, and the criterion-weight grid search.

Device-side stages see only that device's local data; the cloud sees
only the uploaded mixture parameters, the public pool, and the base
model. Every stage is logged to a run manifest with its input and
output paths so the boundary is auditable after the fact. Devices are
independent work units; TAP_THREADS bounds the worker pool (default 1,
fully sequential). One device failing is recorded and skipped without
disturbing the others.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import jsonio
from .datagen import ArchConfig, Scenario, load_dataset, load_scenario, patchify, train_toy_model
from .errors import ValidationError
from .gmm import load_params, save_params, select_k_bic
from .importance import (
    EstimatorConfig,
    layer_importance,
    neuron_scores,
    recompose,
    save_scores,
    validate_weights,
)
from .metric import (
    MetricDataset,
    FeatureExtractor,
    construct_metric_dataset,
    extract_features,
    save_manifest,
)
from .nn.checkpoint import load_model, save_model
from .nn.model import Model, evaluate_accuracy
from .pruner import (
    DEFAULT_EPSILON_MAX,
    finetune,
    prune_to_target,
    random_prune,
    save_report,
)

VARIANTS = ("tap", "random-prune", "shared-metric")


def thread_count() -> int:
    raw = os.environ.get("TAP_THREADS", "")
    if not raw:
        return 1
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ValidationError(f"TAP_THREADS={raw!r} is not an integer") from exc
    if threads < 1:
        raise ValidationError("TAP_THREADS must be >= 1")
    return threads


@dataclass
class PipelineConfig:
    scenario_dir: str
    out_dir: str
    base_model: str | None = None  # trained on the pool when absent
    epsilon_t: float = 0.3
    epsilon_max: float = DEFAULT_EPSILON_MAX
    weights: tuple[float, float, float] = (0.1, 0.1, 0.8)
    metric_size: int = 512
    k_range: list[int] = field(default_factory=lambda: list(range(2, 11)))
    invert_layer_budget: bool = False
    variant: str = "tap"
    device_fit_fraction: float = 0.8
    finetune_epochs: int = 30
    finetune_lr: float = 0.05
    mi_bins: int = 16
    train_epochs: int = 30
    train_lr: float = 0.1
    arch: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> None:
        if not (0 <= self.epsilon_t < 1):
            raise ValidationError(f"epsilon_t {self.epsilon_t} outside [0, 1)")
        validate_weights(self.weights)
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown pipeline variant {self.variant!r}")
        if not (0 < self.device_fit_fraction < 1):
            raise ValidationError("device fit fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["weights"] = list(self.weights)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**{k: v for k, v in doc.items() if k in known})
        cfg.weights = tuple(cfg.weights)
        cfg.validate()
        return cfg


def load_config(path) -> PipelineConfig:
    return PipelineConfig.from_dict(jsonio.load(path))


@dataclass
class DeviceResult:
    device_id: str
    test_count: int = 0
    chosen_k: int | None = None
    retention: float | None = None
    accuracy_before: float | None = None
    accuracy_after: float | None = None
    accuracy_final: float | None = None
    failure: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def weighted_accuracy(results, which: str = "final") -> float:
    """Sample-count-weighted mean accuracy over devices.

    Accepts DeviceResult objects (skipping failures) or (accuracy,
    count) pairs.
    """
    pairs = []
    for r in results:
        if isinstance(r, DeviceResult):
            if r.failure is not None:
                continue
            acc = getattr(r, f"accuracy_{which}")
            pairs.append((acc, r.test_count))
        else:
            acc, count = r
            pairs.append((float(acc), int(count)))
    if not pairs:
        raise ValidationError("no successful results to aggregate")
    total = sum(count for _, count in pairs)
    if total <= 0:
        raise ValidationError("sample counts must be positive")
    return sum(acc * count for acc, count in pairs) / total


@dataclass
class PipelineResult:
    devices: list[DeviceResult]
    weighted_before: float
    weighted_after: float
    weighted_final: float
    out_dir: str
    failures: list[str]


def _device_seed(seed: int, index: int) -> int:
    return seed + 7919 * (index + 1)  # distinct, deterministic per device


def _split_device(images, labels, fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(len(labels))
    cut = int(round(len(order) * fraction))
    fit, test = order[:cut], order[cut:]
    if len(fit) == 0 or len(test) == 0:
        raise ValidationError("device dataset too small to split")
    return images[fit], labels[fit], images[test], labels[test]


class _RunContext:
    """Shared read-only state plus the per-device stage log."""

    def __init__(self, config: PipelineConfig, scenario: Scenario, base: Model, out: Path):
        self.config = config
        self.scenario = scenario
        self.base = base
        self.out = out
        self.patch_size = scenario.spec.patch_size
        self.pool_patches = patchify(scenario.pool_images, self.patch_size)
        self.extractor = FeatureExtractor(
            model=base, patch_size=self.patch_size
        )
        self.pool_features = extract_features(self.extractor, scenario.pool_images)
        self.estimator = EstimatorConfig(mi_bins=config.mi_bins)
        self.shared_metric: MetricDataset | None = None
        if config.variant == "shared-metric":
            rng = np.random.default_rng(config.seed)
            idx = rng.choice(
                len(self.pool_features), size=config.metric_size, replace=False
            )
            self.shared_metric = MetricDataset(
                device_id="shared",
                indices=np.sort(idx).astype(np.int64),
                scores=np.zeros(len(self.pool_features)),
                size=config.metric_size,
            )

    def rel(self, path) -> str:
        return os.path.relpath(str(path), str(self.out))


def _process_device(ctx: _RunContext, index: int) -> tuple[DeviceResult, list[dict]]:
    config = ctx.config
    scenario = ctx.scenario
    device_id = f"dev_{index}"
    dev_dir = ctx.out / "devices" / device_id
    dev_dir.mkdir(parents=True, exist_ok=True)
    stages: list[dict] = []
    result = DeviceResult(device_id=device_id)
    seed = _device_seed(config.seed, index)
    device_file = Path(config.scenario_dir) / "devices" / f"{device_id}.bin"

    fit_images, _, test_images, test_labels = _split_device(
        scenario.device_images[index],
        scenario.device_labels[index],
        config.device_fit_fraction,
        seed,
    )
    result.test_count = len(test_labels)

    gmm_path = dev_dir / "gmm.json"
    if config.variant == "shared-metric":
        metric = MetricDataset(
            device_id=device_id,
            indices=ctx.shared_metric.indices,
            scores=ctx.shared_metric.scores,
            size=ctx.shared_metric.size,
        )
    else:
        # device side: fit the upload on local features only
        fit_features = extract_features(ctx.extractor, fit_images)
        params, chosen_k, _ = select_k_bic(fit_features, config.k_range, seed=seed)
        save_params(gmm_path, params)
        result.chosen_k = chosen_k
        stages.append(
            {
                "stage": "fit-gmm",
                "side": "device",
                "device": device_id,
                "inputs": [ctx.rel(device_file)],
                "outputs": [ctx.rel(gmm_path)],
            }
        )
        # cloud side: reload the upload; raw device data is out of reach
        uploaded = load_params(gmm_path)
        metric = construct_metric_dataset(
            uploaded, ctx.pool_features, config.metric_size, device_id=device_id
        )
    metric_path = dev_dir / "metric.json"
    save_manifest(metric_path, metric)
    metric_inputs = [ctx.rel(Path(config.scenario_dir) / "pool.bin")]
    if config.variant != "shared-metric":
        metric_inputs.insert(0, ctx.rel(gmm_path))
    stages.append(
        {
            "stage": "build-metric",
            "side": "cloud",
            "device": device_id,
            "inputs": metric_inputs,
            "outputs": [ctx.rel(metric_path)],
        }
    )

    metric_patches = ctx.pool_patches[metric.indices]
    metric_labels = scenario.pool_labels[metric.indices]
    scores = neuron_scores(
        ctx.base, metric_patches, weights=config.weights, config=ctx.estimator
    )
    lscores = layer_importance(
        ctx.base, metric_patches, invert=config.invert_layer_budget
    )
    scores_path = dev_dir / "scores.json"
    save_scores(scores_path, scores, lscores)
    stages.append(
        {
            "stage": "score",
            "side": "cloud",
            "device": device_id,
            "inputs": [ctx.rel(metric_path)],
            "outputs": [ctx.rel(scores_path)],
        }
    )

    pruned, report, plan = prune_to_target(
        ctx.base,
        scores,
        lscores,
        config.epsilon_t,
        epsilon_max=config.epsilon_max,
        device_id=device_id,
    )
    if config.variant == "random-prune":
        pruned, report = random_prune(ctx.base, plan, seed=seed, device_id=device_id)
    result.retention = report.retention
    pruned_path = dev_dir / "pruned.bin"
    report_path = dev_dir / "prune_report.json"
    save_model(pruned_path, pruned)
    save_report(report_path, report)
    stages.append(
        {
            "stage": "prune",
            "side": "cloud",
            "device": device_id,
            "inputs": [ctx.rel(scores_path)],
            "outputs": [ctx.rel(pruned_path), ctx.rel(report_path)],
        }
    )

    tuned, ft_report = finetune(
        pruned,
        metric_patches,
        metric_labels,
        epochs=config.finetune_epochs,
        lr=config.finetune_lr,
        seed=seed,
    )
    final_path = dev_dir / "final.bin"
    save_model(final_path, tuned)
    jsonio.dump(
        {
            "device_id": device_id,
            "train_loss": ft_report.train_loss,
            "reference_ce": ft_report.reference_ce,
            "best_epoch": ft_report.best_epoch,
        },
        dev_dir / "finetune.json",
    )
    stages.append(
        {
            "stage": "finetune",
            "side": "cloud",
            "device": device_id,
            "inputs": [ctx.rel(pruned_path), ctx.rel(metric_path)],
            "outputs": [ctx.rel(final_path), ctx.rel(dev_dir / "finetune.json")],
        }
    )

    # evaluation happens device-side on the held-out local split
    test_patches = patchify(test_images, ctx.patch_size)
    result.accuracy_before = evaluate_accuracy(ctx.base, test_patches, test_labels)
    result.accuracy_after = evaluate_accuracy(pruned, test_patches, test_labels)
    result.accuracy_final = evaluate_accuracy(tuned, test_patches, test_labels)
    result_path = dev_dir / "result.json"
    jsonio.dump(result.to_dict(), result_path)
    stages.append(
        {
            "stage": "evaluate",
            "side": "device",
            "device": device_id,
            "inputs": [ctx.rel(device_file), ctx.rel(pruned_path), ctx.rel(final_path)],
            "outputs": [ctx.rel(result_path)],
        }
    )
    return result, stages


def prepare_base_model(config: PipelineConfig, scenario: Scenario, out: Path) -> Model:
    if config.base_model:
        return load_model(config.base_model)
    arch = ArchConfig(**{**{"patch_size": scenario.spec.patch_size}, **config.arch})
    if arch.patch_size != scenario.spec.patch_size:
        raise ValidationError("architecture patch size disagrees with the scenario")
    model = train_toy_model(
        scenario.pool_images,
        scenario.pool_labels,
        arch,
        epochs=config.train_epochs,
        lr=config.train_lr,
        seed=config.seed,
    )
    save_model(out / "base.bin", model)
    return model


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenario = load_scenario(config.scenario_dir)
    base = prepare_base_model(config, scenario, out)
    jsonio.dump(config.to_dict(), out / "config.json")
    ctx = _RunContext(config, scenario, base, out)

    indices = list(range(scenario.num_devices))
    outcomes: list[tuple[DeviceResult, list[dict]]] = [None] * len(indices)

    def work(i: int) -> tuple[DeviceResult, list[dict]]:
        try:
            return _process_device(ctx, i)
        except Exception as exc:  # per-device fault isolation
            return DeviceResult(device_id=f"dev_{i}", failure=str(exc)), []

    workers = thread_count()
    if workers == 1:
        for i in indices:
            outcomes[i] = work(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, outcome in zip(indices, pool.map(work, indices)):
                outcomes[i] = outcome

    devices = [outcome[0] for outcome in outcomes]
    manifest = {
        "version": 1,
        "variant": config.variant,
        "stages": [stage for _, stage_list in outcomes for stage in stage_list],
    }
    jsonio.dump(manifest, out / "run_manifest.json")
    failures = [f"{r.device_id}: {r.failure}" for r in devices if r.failure]
    ok = [r for r in devices if r.failure is None]
    if not ok:
        raise ValidationError("every device failed: " + "; ".join(failures))
    result = PipelineResult(
        devices=devices,
        weighted_before=weighted_accuracy(ok, "before"),
        weighted_after=weighted_accuracy(ok, "after"),
        weighted_final=weighted_accuracy(ok, "final"),
        out_dir=str(out),
        failures=failures,
    )
    jsonio.dump(
        {
            "version": 1,
            "variant": config.variant,
            "devices": [r.to_dict() for r in devices],
            "weighted_accuracy": {
                "before": result.weighted_before,
                "after_prune": result.weighted_after,
                "after_finetune": result.weighted_final,
            },
            "failures": failures,
        },
        out / "summary.json",
    )
    _write_summary_csv(out / "summary.csv", devices)
    return result


def _write_summary_csv(path, devices: list[DeviceResult]) -> None:
    lines = ["device_id,test_count,chosen_k,retention,acc_before,acc_after,acc_final,failure"]
    for r in devices:
        cells = [
            r.device_id,
            str(r.test_count),
            "" if r.chosen_k is None else str(r.chosen_k),
            "" if r.retention is None else format(r.retention, ".17g"),
            "" if r.accuracy_before is None else format(r.accuracy_before, ".17g"),
            "" if r.accuracy_after is None else format(r.accuracy_after, ".17g"),
            "" if r.accuracy_final is None else format(r.accuracy_final, ".17g"),
            r.failure or "",
        ]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- privacy audit ---


def audit_privacy(out_dir, scenario_dir) -> dict:
    """Check the recorded run against the device/cloud boundary.

    Verifies that no cloud-side stage lists a device dataset among its
    inputs, and that no cloud-side input file embeds raw device sample
    bytes (tripwire scan over each device's leading image bytes).
    """
    out = Path(out_dir)
    manifest = jsonio.load(out / "run_manifest.json")
    device_dir = (Path(scenario_dir) / "devices").resolve()
    problems: list[str] = []
    cloud_inputs: set[str] = set()
    for stage in manifest["stages"]:
        if stage["side"] != "cloud":
            continue
        for rel in stage["inputs"]:
            resolved = (out / rel).resolve()
            cloud_inputs.add(str(resolved))
            if device_dir in resolved.parents:
                problems.append(
                    f"cloud stage {stage['stage']} ({stage['device']}) reads {rel}"
                )
    signatures = []
    for dev_file in sorted(device_dir.glob("dev_*.bin")):
        images, _ = load_dataset(dev_file)
        signatures.append((dev_file.name, images[0].tobytes()[:256]))
    for path_str in sorted(cloud_inputs):
        path = Path(path_str)
        if not path.is_file():
            continue
        blob = path.read_bytes()
        for name, sig in signatures:
            if sig and sig in blob:
                problems.append(f"{path.name} embeds sample bytes from {name}")
    return {"ok": not problems, "problems": problems, "cloud_inputs": sorted(cloud_inputs)}


def compute_device_scores(config: PipelineConfig):
    """Per-device metric sets and score sets against the shared base model.

    Returns (scenario, base model, list of per-device dicts with keys
    metric, scores, layer_scores). Used by the sensitivity analyses.
    """
    config.validate()
    scenario = load_scenario(config.scenario_dir)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = prepare_base_model(config, scenario, out)
    extractor = FeatureExtractor(model=base, patch_size=scenario.spec.patch_size)
    pool_features = extract_features(extractor, scenario.pool_images)
    pool_patches = patchify(scenario.pool_images, scenario.spec.patch_size)
    estimator = EstimatorConfig(mi_bins=config.mi_bins)
    entries = []
    for i in range(scenario.num_devices):
        seed = _device_seed(config.seed, i)
        fit_images, _, _, _ = _split_device(
            scenario.device_images[i],
            scenario.device_labels[i],
            config.device_fit_fraction,
            seed,
        )
        fit_features = extract_features(extractor, fit_images)
        params, chosen_k, _ = select_k_bic(fit_features, config.k_range, seed=seed)
        metric = construct_metric_dataset(
            params, pool_features, config.metric_size, device_id=f"dev_{i}"
        )
        metric_patches = pool_patches[metric.indices]
        entries.append(
            {
                "device_id": f"dev_{i}",
                "chosen_k": chosen_k,
                "metric": metric,
                "scores": neuron_scores(
                    base, metric_patches, weights=config.weights, config=estimator
                ),
                "layer_scores": layer_importance(
                    base, metric_patches, invert=config.invert_layer_budget
                ),
            }
        )
    return scenario, base, entries


# --- criterion-weight grid search ---


def simplex_grid(step: float) -> list[tuple[float, float, float]]:
    """All nonnegative multiples-of-step triples summing to 1."""
    if step <= 0 or step > 1:
        raise ValidationError("step must be in (0, 1]")
    units = round(1.0 / step)
    if abs(units * step - 1.0) > 1e-9:
        raise ValidationError(f"step {step} does not divide 1 evenly")
    triples = []
    for i in range(units + 1):
        for j in range(units + 1 - i):
            k = units - i - j
            triples.append((i / units, j / units, k / units))
    return triples


@dataclass
class GridSearchResult:
    best: tuple[float, float, float]
    table: list[dict]  # {alpha, beta, gamma, weighted_accuracy}


def grid_search_weights(config: PipelineConfig, step: float = 0.1) -> GridSearchResult:
    """Score + prune + evaluate per weight triple; no finetuning.

    Evaluation uses a held-out slice of the public pool (never device
    data): each device's pruned model is scored on pool samples of that
    device's label group, and triples are compared by weighted
    accuracy. Ties prefer larger gamma, then larger alpha.
    """
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenario = load_scenario(config.scenario_dir)
    base = prepare_base_model(config, scenario, out)

    rng = np.random.default_rng(config.seed)
    n_pool = len(scenario.pool_labels)
    order = rng.permutation(n_pool)
    val_count = max(1, n_pool // 5)
    val_idx, select_idx = order[:val_count], order[val_count:]

    patch_size = scenario.spec.patch_size
    extractor = FeatureExtractor(model=base, patch_size=patch_size)
    select_features = extract_features(extractor, scenario.pool_images[select_idx])
    select_patches = patchify(scenario.pool_images[select_idx], patch_size)
    val_patches = patchify(scenario.pool_images[val_idx], patch_size)
    val_labels = scenario.pool_labels[val_idx]
    estimator = EstimatorConfig(mi_bins=config.mi_bins)
    metric_size = min(config.metric_size, len(select_idx))

    # per-device raw scores are weight-independent; compute them once
    cached = []
    for i in range(scenario.num_devices):
        seed = _device_seed(config.seed, i)
        fit_images, _, _, _ = _split_device(
            scenario.device_images[i],
            scenario.device_labels[i],
            config.device_fit_fraction,
            seed,
        )
        fit_features = extract_features(extractor, fit_images)
        params, _, _ = select_k_bic(fit_features, config.k_range, seed=seed)
        metric = construct_metric_dataset(params, select_features, metric_size)
        metric_patches = select_patches[metric.indices]
        raw_scores = neuron_scores(base, metric_patches, weights=(0.1, 0.1, 0.8), config=estimator)
        lscores = layer_importance(base, metric_patches, invert=config.invert_layer_budget)
        group_mask = np.isin(val_labels, scenario.groups[i])
        if not group_mask.any():
            continue
        cached.append(
            {
                "raw_scores": raw_scores,
                "layer_scores": lscores,
                "val_patches": val_patches[group_mask],
                "val_labels": val_labels[group_mask],
            }
        )
    if not cached:
        raise ValidationError("no device has validation samples in the pool split")

    table = []
    for triple in simplex_grid(step):
        pairs = []
        for entry in cached:
            scores = recompose(entry["raw_scores"], triple)
            pruned, _, _ = prune_to_target(
                base,
                scores,
                entry["layer_scores"],
                config.epsilon_t,
                epsilon_max=config.epsilon_max,
            )
            acc = evaluate_accuracy(pruned, entry["val_patches"], entry["val_labels"])
            pairs.append((acc, len(entry["val_labels"])))
        table.append(
            {
                "alpha": triple[0],
                "beta": triple[1],
                "gamma": triple[2],
                "weighted_accuracy": weighted_accuracy(pairs),
            }
        )
    best_row = max(table, key=lambda r: (r["weighted_accuracy"], r["gamma"], r["alpha"]))
    result = GridSearchResult(
        best=(best_row["alpha"], best_row["beta"], best_row["gamma"]), table=table
    )
    jsonio.dump(
        {"version": 1, "step": step, "best": list(result.best), "table": table},
        out / "grid.json",
    )
    lines = ["alpha,beta,gamma,weighted_accuracy"]
    for row in table:
        lines.append(
            ",".join(
                format(row[k], ".17g")
                for k in ("alpha", "beta", "gamma", "weighted_accuracy")
            )
        )
    (out / "grid.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return result
