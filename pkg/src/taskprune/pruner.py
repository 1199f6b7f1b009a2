"""Budget allocation and structured surgery.

Per-layer budgets follow the share-times-target identity eps_l =
delta_l * |L| * eps_t, so the mean ratio across layers is exactly
eps_t. Any layer over eps_max is clamped and its excess redistributed
to unclamped layers proportionally to their shares. Ratios become
integer unit counts by largest-remainder rounding against the global
total round(sum eps_l * width_l).

Within a layer the removal pool is the union of feed-forward hidden
units and attention value channels, ranked by composite importance
(ties: feed-forward units before attention channels, then ascending
index). The last unit of either group is never removed, so any budget
leaves a structurally valid network. A head whose value channels are
all gone is excised entirely, including its query/key columns.
"""

from dataclasses import dataclass, field

import numpy as np

from . import jsonio
from .errors import ValidationError
from .importance import FFN, MHA, GroupScores, LayerScores, LayerUnitScores, NeuronScores
from .nn.model import Block, Model
from .nn.training import FinetuneReport, finetune_head

REPORT_VERSION = 1
DEFAULT_EPSILON_MAX = 0.9


@dataclass
class BudgetPlan:
    epsilon_t: float  # global per-unit pruning ratio
    epsilon: np.ndarray  # per-layer ratios after clamp and redistribute
    counts: list[int] | None  # units to remove per layer; None if widths unknown
    epsilon_max: float
    log: list[str] = field(default_factory=list)
    target_param_retention: float | None = None

    def validate(self) -> None:
        n = len(self.epsilon)
        if abs(self.epsilon.sum() - n * self.epsilon_t) > 1e-9:
            raise ValidationError("per-layer budgets do not conserve the global target")
        if self.epsilon.max() > self.epsilon_max + 1e-12 or self.epsilon.min() < 0:
            raise ValidationError("per-layer budget outside [0, epsilon_max]")


def allocate_budgets(
    layer_scores: LayerScores,
    epsilon_t: float,
    epsilon_max: float = DEFAULT_EPSILON_MAX,
    layer_widths: list[int] | None = None,
) -> BudgetPlan:
    """Distribute the global ratio across layers by their importance shares.

    ``epsilon_t`` = 0 yields an all-zero no-op plan. With widths given,
    per-layer integer removal counts are filled in as well.
    """
    if epsilon_t < 0 or epsilon_t >= 1:
        raise ValidationError(f"global pruning ratio {epsilon_t} outside [0, 1)")
    if epsilon_t > epsilon_max + 1e-12:
        raise ValidationError(
            f"target {epsilon_t} infeasible: exceeds per-layer cap {epsilon_max}"
        )
    layer_scores.validate()
    delta = layer_scores.delta
    n = len(delta)
    eps = delta * n * epsilon_t
    log: list[str] = []
    clamped = np.zeros(n, dtype=bool)
    while True:
        over = ~clamped & (eps > epsilon_max + 1e-15)
        if not over.any():
            break
        excess = float((eps[over] - epsilon_max).sum())
        for idx in np.flatnonzero(over):
            log.append(f"layer {idx}: budget {eps[idx]:.6g} clamped to {epsilon_max}")
        eps[over] = epsilon_max
        clamped |= over
        free = ~clamped
        if not free.any():
            break
        shares = delta[free] / delta[free].sum()
        eps[free] += excess * shares
        log.append(f"redistributed {excess:.6g} over {int(free.sum())} layers")
    counts = None
    if layer_widths is not None:
        if len(layer_widths) != n:
            raise ValidationError("layer width list does not match layer count")
        counts = _largest_remainder_counts(eps, np.asarray(layer_widths, dtype=float))
    plan = BudgetPlan(
        epsilon_t=epsilon_t, epsilon=eps, counts=counts, epsilon_max=epsilon_max, log=log
    )
    plan.validate()
    return plan


def _largest_remainder_counts(eps: np.ndarray, widths: np.ndarray) -> list[int]:
    raw = eps * widths
    total = int(round(raw.sum()))
    counts = np.floor(raw).astype(np.int64)
    remainders = raw - counts
    deficit = total - int(counts.sum())
    order = np.lexsort((np.arange(len(eps)), -remainders))
    for idx in order[:deficit]:
        counts[idx] += 1
    return [int(c) for c in counts]


def _select_removals(
    ffn_scores: np.ndarray,
    mha_scores: np.ndarray,
    count: int,
    layer: int,
    log: list[str],
) -> tuple[list[int], list[int]]:
    """Lowest-importance units from the joint pool, never emptying a group."""
    pool = [(float(s), j, FFN, j) for j, s in enumerate(ffn_scores)]
    pool += [(float(s), len(ffn_scores) + j, MHA, j) for j, s in enumerate(mha_scores)]
    if count > len(pool):
        raise ValidationError(
            f"layer {layer}: plan removes {count} of {len(pool)} units"
        )
    pool.sort(key=lambda item: (item[0], item[1]))
    removed = {FFN: [], MHA: []}
    widths = {FFN: len(ffn_scores), MHA: len(mha_scores)}
    taken = 0
    for _, _, kind, j in pool:
        if taken == count:
            break
        if widths[kind] - len(removed[kind]) <= 1:
            continue  # structural floor: keep at least one unit per group
        removed[kind].append(j)
        taken += 1
    if taken < count:
        log.append(f"layer {layer}: structural floor kept {count - taken} extra units")
    return sorted(removed[FFN]), sorted(removed[MHA])


def _prune_block(blk: Block, ffn_remove: list[int], mha_remove: list[int]) -> Block:
    out = blk.copy()
    if ffn_remove:
        keep = np.setdiff1d(np.arange(blk.ffn_width), ffn_remove)
        out.w1 = out.w1[:, keep]
        out.b1 = out.b1[keep]
        out.w2 = out.w2[keep, :]
    if mha_remove:
        keep = np.setdiff1d(np.arange(blk.channels), mha_remove)
        keep_mask = np.zeros(blk.channels, dtype=bool)
        keep_mask[keep] = True
        out.wv = out.wv[:, keep]
        out.bv = out.bv[keep]
        out.wo = out.wo[keep, :]
        qk_keep = np.ones(blk.num_heads * blk.head_dk, dtype=bool)
        head_v = []
        offset = 0
        for h, vh in enumerate(blk.head_v):
            survivors = int(keep_mask[offset : offset + vh].sum())
            if survivors == 0:
                qk_keep[h * blk.head_dk : (h + 1) * blk.head_dk] = False
            else:
                head_v.append(survivors)
            offset += vh
        out.wq = out.wq[:, qk_keep]
        out.bq = out.bq[qk_keep]
        out.wk = out.wk[:, qk_keep]
        out.bk = out.bk[qk_keep]
        out.head_v = head_v
    return out


@dataclass
class PruneReport:
    device_id: str
    epsilon_t: float
    per_layer: list[dict]  # {layer, epsilon, removed: [[kind, j], ...]}
    params_before: int
    params_after: int
    retention: float
    target_retention: float | None = None
    residual: float | None = None  # retention minus target, when a target exists
    log: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        doc = {
            "version": REPORT_VERSION,
            "device_id": self.device_id,
            "epsilon_t": self.epsilon_t,
            "per_layer": self.per_layer,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "retention": self.retention,
            "log": list(self.log),
        }
        if self.target_retention is not None:
            doc["target_retention"] = self.target_retention
            doc["residual"] = self.residual
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PruneReport":
        return cls(
            device_id=str(doc["device_id"]),
            epsilon_t=float(doc["epsilon_t"]),
            per_layer=list(doc["per_layer"]),
            params_before=int(doc["params_before"]),
            params_after=int(doc["params_after"]),
            retention=float(doc["retention"]),
            target_retention=doc.get("target_retention"),
            residual=doc.get("residual"),
            log=list(doc.get("log", [])),
        )


def save_report(path, report: PruneReport) -> None:
    jsonio.dump(report.to_dict(), path)


def load_report(path) -> PruneReport:
    return PruneReport.from_dict(jsonio.load(path))


def _check_alignment(model: Model, scores: NeuronScores, plan: BudgetPlan) -> None:
    if len(scores.layers) != model.num_layers or len(plan.epsilon) != model.num_layers:
        raise ValidationError("scores/plan layer count does not match the model")
    if plan.counts is None:
        raise ValidationError("plan has no unit counts; allocate with layer widths")
    for l, blk in enumerate(model.blocks):
        entry = scores.layers[l]
        if entry.ffn.width != blk.ffn_width or entry.mha.width != blk.channels:
            raise ValidationError(f"layer {l}: score widths do not match the model")


def prune(
    model: Model, scores: NeuronScores, plan: BudgetPlan, device_id: str = ""
) -> tuple[Model, PruneReport]:
    """Remove each layer's lowest-importance units per the plan."""
    _check_alignment(model, scores, plan)
    params_before = model.param_count()
    log = list(plan.log)
    out = model.copy()
    per_layer = []
    for l, blk in enumerate(model.blocks):
        entry = scores.layers[l]
        ffn_remove, mha_remove = _select_removals(
            entry.ffn.composite, entry.mha.composite, plan.counts[l], l, log
        )
        out.blocks[l] = _prune_block(blk, ffn_remove, mha_remove)
        per_layer.append(
            {
                "layer": l,
                "epsilon": float(plan.epsilon[l]),
                "removed": [[FFN, j] for j in ffn_remove] + [[MHA, j] for j in mha_remove],
            }
        )
    out.validate()
    params_after = out.param_count()
    retention = params_after / params_before
    report = PruneReport(
        device_id=device_id,
        epsilon_t=plan.epsilon_t,
        per_layer=per_layer,
        params_before=params_before,
        params_after=params_after,
        retention=retention,
        target_retention=plan.target_param_retention,
        residual=(
            retention - plan.target_param_retention
            if plan.target_param_retention is not None
            else None
        ),
        log=log,
    )
    return out, report


def random_prune(
    model: Model, plan: BudgetPlan, seed: int, device_id: str = ""
) -> tuple[Model, PruneReport]:
    """Budget-matched control: same per-layer counts, uniformly random units."""
    rng = np.random.default_rng(seed)
    layers = []
    for l, blk in enumerate(model.blocks):
        groups = {}
        for kind, width in ((FFN, blk.ffn_width), (MHA, blk.channels)):
            fake = rng.permutation(width).astype(np.float64)
            groups[kind] = GroupScores(
                kind=kind,
                activeness=fake,
                redundancy=fake,
                relevance=fake,
                composite=fake,
            )
        layers.append(LayerUnitScores(layer=l, ffn=groups[FFN], mha=groups[MHA]))
    fake_scores = NeuronScores(weights=(1.0, 0.0, 0.0), layers=layers, warnings=[])
    return prune(model, fake_scores, plan, device_id=device_id)


def unit_ratio_for_param_target(model: Model, epsilon_t: float) -> float:
    """Translate a parameter-fraction target into a prunable-unit ratio.

    Each feed-forward unit and each value channel carries 2d+1 weights,
    so removing a fraction r of all units removes roughly
    r * prunable / total of the parameters; invert that relation.
    """
    total = model.param_count()
    per_unit = 2 * model.d + 1
    prunable = sum((blk.ffn_width + blk.channels) * per_unit for blk in model.blocks)
    if prunable == 0:
        raise ValidationError("model has no prunable units")
    return epsilon_t * total / prunable


def prune_to_target(
    model: Model,
    scores: NeuronScores,
    layer_scores: LayerScores,
    epsilon_t: float,
    epsilon_max: float = DEFAULT_EPSILON_MAX,
    device_id: str = "",
    max_adjust: int = 12,
    tolerance: float = 0.005,
) -> tuple[Model, PruneReport, BudgetPlan]:
    """Prune so the kept parameter fraction lands on 1 - epsilon_t.

    Starts from the closed-form unit ratio and corrects it up to
    ``max_adjust`` times: a proportional step first (whole-head removal
    saves extra query/key parameters the closed form cannot see), and a
    bisection of the bracketing ratios whenever that step leaves the
    bracket, so oscillation across a head-removal jump still converges.
    Returns the attempt with the smallest absolute residual.
    """
    target = 1.0 - epsilon_t
    widths = [blk.ffn_width + blk.channels for blk in model.blocks]
    ratio = min(max(unit_ratio_for_param_target(model, epsilon_t), 0.0), epsilon_max)
    best = None
    lo, hi = 0.0, epsilon_max  # ratios bracketing the target from either side
    for _ in range(max(1, max_adjust)):
        plan = allocate_budgets(layer_scores, ratio, epsilon_max, widths)
        plan.target_param_retention = target
        pruned, report = prune(model, scores, plan, device_id=device_id)
        if best is None or abs(report.residual) < abs(best[1].residual):
            best = (pruned, report, plan)
        if abs(report.residual) <= tolerance or epsilon_t == 0:
            break
        if report.residual > 0:
            lo = max(lo, ratio)
        else:
            hi = min(hi, ratio)
        removed = report.params_before - report.params_after
        nxt = ratio * epsilon_t * report.params_before / removed if removed else 0.0
        if not lo < nxt < hi:
            nxt = (lo + hi) / 2.0
        if abs(nxt - ratio) < 1e-12:
            break
        ratio = nxt
    return best


def finetune(
    model: Model,
    metric_patches: np.ndarray,
    metric_labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[Model, FinetuneReport]:
    """Head-only recovery on the metric set; final cross-entropy never exceeds the start."""
    if len(metric_patches) == 0:
        raise ValidationError("cannot finetune on an empty metric set")
    return finetune_head(
        model, metric_patches, metric_labels, epochs=epochs, lr=lr,
        batch_size=batch_size, seed=seed,
    )
