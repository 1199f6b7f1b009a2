"""Dual-granularity importance over a metric dataset.

Per-unit scores combine three criteria for every feed-forward hidden
unit and every attention value channel:

  activeness  A_j: mean absolute token-averaged activation
  redundancy  R_j: negated mean pairwise histogram mutual information
              against same-layer peers of the same kind
  relevance   T_j: empirical HSIC (biased V-statistic, Gaussian
              kernels, median-heuristic bandwidth) between the unit's
              activation sequence and the model's logit vectors

Each criterion is min-max normalized within its (layer, kind) group; a
constant criterion maps to all 0.5. The composite is the convex
combination I = alpha*A + beta*R + gamma*T of normalized scores.

Per-layer scores ablate one block at a time (residual bypass) and
measure the mean KL divergence of the full model's class posterior
against the ablated one, then softmax-normalize across layers.
"""

from dataclasses import dataclass

import numpy as np

from . import jsonio
from .errors import ValidationError
from .nn.functional import softmax
from .nn.model import Model

SCORES_VERSION = 1
DEFAULT_WEIGHTS = (0.1, 0.1, 0.8)
FFN = "ffn"
MHA = "mha"


@dataclass
class EstimatorConfig:
    mi_bins: int = 16
    bandwidth_floor: float = 1e-6


def validate_weights(weights) -> tuple[float, float, float]:
    alpha, beta, gamma = (float(w) for w in weights)
    for w in (alpha, beta, gamma):
        if w < 0 or w > 1:
            raise ValidationError(f"criterion weight {w} outside [0, 1]")
    if abs(alpha + beta + gamma - 1.0) > 1e-9:
        raise ValidationError(f"criterion weights {weights} do not sum to 1")
    return alpha, beta, gamma


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Map min to 0 and max to 1; a constant vector maps to all 0.5."""
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


@dataclass
class GroupScores:
    kind: str
    activeness: np.ndarray
    redundancy: np.ndarray
    relevance: np.ndarray
    composite: np.ndarray

    @property
    def width(self) -> int:
        return len(self.composite)


@dataclass
class LayerUnitScores:
    layer: int
    ffn: GroupScores
    mha: GroupScores


@dataclass
class NeuronScores:
    weights: tuple[float, float, float]
    layers: list[LayerUnitScores]
    warnings: list[str]

    def group(self, layer: int, kind: str) -> GroupScores:
        entry = self.layers[layer]
        return entry.ffn if kind == FFN else entry.mha


@dataclass
class LayerScores:
    delta_raw: np.ndarray  # mean KL per ablated layer, >= 0
    delta: np.ndarray  # softmax-normalized, sums to 1

    def validate(self) -> None:
        if abs(self.delta.sum() - 1.0) > 1e-9 or self.delta.min() <= 0:
            raise ValidationError("layer scores are not a positive probability vector")


def _entropy(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    safe = np.where(probs > 0, probs, 1.0)
    return -(probs * np.log(safe)).sum(axis=axis)


def histogram_mi_matrix(acts: np.ndarray, bins: int) -> np.ndarray:
    """Pairwise mutual information (nats) via equal-width histograms.

    Bins span each unit's batch min-max; the diagonal holds each unit's
    marginal entropy (its MI with itself).
    """
    n, width = acts.shape
    lo = acts.min(axis=0)
    span = acts.max(axis=0) - lo
    scale = np.where(span > 0, bins / np.where(span > 0, span, 1.0), 0.0)
    ids = np.minimum(((acts - lo) * scale).astype(np.int64), bins - 1)
    marginal = np.empty(width)
    for j in range(width):
        marginal[j] = _entropy(np.bincount(ids[:, j], minlength=bins) / n)
    cells = bins * bins
    row_offset = np.arange(width)[:, None] * cells
    by_unit = ids.T  # (width, n)
    mi = np.empty((width, width))
    for i in range(width):
        joint_ids = (row_offset + by_unit[i] * bins + by_unit).ravel()
        joint = np.bincount(joint_ids, minlength=width * cells).reshape(width, cells) / n
        mi[i] = marginal[i] + marginal - _entropy(joint, axis=1)
    return mi


def _pairwise_sq_dists(values: np.ndarray) -> np.ndarray:
    if values.ndim == 1:
        diff = values[:, None] - values[None, :]
        return diff * diff
    sq = (values * values).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (values @ values.T)
    return np.maximum(d2, 0.0)


def _median_bandwidth(d2: np.ndarray, floor: float) -> tuple[float, bool]:
    upper = d2[np.triu_indices(len(d2), k=1)]
    sigma_sq = float(np.median(upper)) if len(upper) else 0.0
    if sigma_sq < floor:
        return floor, True
    return sigma_sq, False


def _centered_gram(d2: np.ndarray, sigma_sq: float) -> np.ndarray:
    gram = np.exp(d2 / (-2.0 * sigma_sq))
    row = gram.mean(axis=0)
    return gram - row[None, :] - row[:, None] + row.mean()


def hsic_scores(acts: np.ndarray, logits: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Biased HSIC of each activation column against the logit batch."""
    n = len(logits)
    logit_d2 = _pairwise_sq_dists(logits)
    sigma_sq, _ = _median_bandwidth(logit_d2, floor)
    centered = _centered_gram(logit_d2, sigma_sq)
    out = np.empty(acts.shape[1])
    for j in range(acts.shape[1]):
        d2 = _pairwise_sq_dists(acts[:, j])
        unit_sigma_sq, _ = _median_bandwidth(d2, floor)
        out[j] = np.sum(np.exp(d2 / (-2.0 * unit_sigma_sq)) * centered) / (n * n)
    return out


def _score_group(
    kind: str,
    acts: np.ndarray,
    centered_logit_gram: np.ndarray,
    weights: tuple[float, float, float],
    config: EstimatorConfig,
    warnings: list[str],
    label: str,
) -> GroupScores:
    n, width = acts.shape
    activeness = np.abs(acts).mean(axis=0)
    if width == 1:
        redundancy = np.zeros(1)
    else:
        mi = histogram_mi_matrix(acts, config.mi_bins)
        off_diag_sum = mi.sum(axis=1) - np.diag(mi)
        redundancy = -off_diag_sum / (width - 1)
    relevance = np.empty(width)
    for j in range(width):
        d2 = _pairwise_sq_dists(acts[:, j])
        sigma_sq, floored = _median_bandwidth(d2, config.bandwidth_floor)
        if floored:
            warnings.append(f"{label} {kind} unit {j}: kernel bandwidth floored")
        relevance[j] = np.sum(np.exp(d2 / (-2.0 * sigma_sq)) * centered_logit_gram) / (n * n)
    alpha, beta, gamma = weights
    a_n = minmax_normalize(activeness)
    r_n = minmax_normalize(redundancy)
    t_n = minmax_normalize(relevance)
    return GroupScores(
        kind=kind,
        activeness=activeness,
        redundancy=redundancy,
        relevance=relevance,
        composite=alpha * a_n + beta * r_n + gamma * t_n,
    )


def neuron_scores(
    model: Model,
    metric_patches: np.ndarray,
    weights=DEFAULT_WEIGHTS,
    config: EstimatorConfig | None = None,
) -> NeuronScores:
    weights = validate_weights(weights)
    config = config or EstimatorConfig()
    if len(metric_patches) == 0:
        raise ValidationError("metric dataset is empty")
    if not all(blk.enabled for blk in model.blocks):
        raise ValidationError("cannot score a model with bypassed layers")
    _, trace = model.forward(metric_patches, trace=True)
    warnings: list[str] = []
    logit_d2 = _pairwise_sq_dists(trace.logits)
    sigma_sq, floored = _median_bandwidth(logit_d2, config.bandwidth_floor)
    if floored:
        warnings.append("logit kernel bandwidth floored (near-constant logits)")
    centered = _centered_gram(logit_d2, sigma_sq)
    layers = []
    for l, layer_trace in enumerate(trace.layers):
        layers.append(
            LayerUnitScores(
                layer=l,
                ffn=_score_group(
                    FFN, layer_trace.ffn, centered, weights, config, warnings, f"layer {l}"
                ),
                mha=_score_group(
                    MHA, layer_trace.mha, centered, weights, config, warnings, f"layer {l}"
                ),
            )
        )
    return NeuronScores(weights=weights, layers=layers, warnings=warnings)


def recompose(scores: NeuronScores, weights) -> NeuronScores:
    """Rebuild composite scores under new weights from the stored raw criteria."""
    alpha, beta, gamma = validate_weights(weights)
    layers = []
    for entry in scores.layers:
        groups = {}
        for group in (entry.ffn, entry.mha):
            groups[group.kind] = GroupScores(
                kind=group.kind,
                activeness=group.activeness,
                redundancy=group.redundancy,
                relevance=group.relevance,
                composite=alpha * minmax_normalize(group.activeness)
                + beta * minmax_normalize(group.redundancy)
                + gamma * minmax_normalize(group.relevance),
            )
        layers.append(LayerUnitScores(layer=entry.layer, ffn=groups[FFN], mha=groups[MHA]))
    return NeuronScores(weights=(alpha, beta, gamma), layers=layers, warnings=list(scores.warnings))


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Row-wise KL(p || q) in nats with probability clamping."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    safe_p = np.maximum(p, eps)
    safe_q = np.maximum(q, eps)
    return (p * (np.log(safe_p) - np.log(safe_q))).sum(axis=-1)


def layer_scores_from_raw(delta_raw: np.ndarray, invert: bool = False) -> LayerScores:
    """Normalize raw divergences into shares; ``invert`` flips the preference."""
    raw = np.asarray(delta_raw, dtype=np.float64)
    shifted = -raw if invert else raw
    out = LayerScores(delta_raw=raw, delta=softmax(shifted[None, :], axis=1)[0])
    out.validate()
    return out


def layer_importance(
    model: Model, metric_patches: np.ndarray, invert: bool = False
) -> LayerScores:
    """Ablate each block in turn and softmax the mean posterior KL shifts.

    ``invert`` flips the sign before the softmax so larger divergence
    maps to a smaller share. Ablation happens on a private copy, so the
    passed model is safe to share across threads.
    """
    if model.num_layers < 1:
        raise ValidationError("model has no layers to score")
    if len(metric_patches) == 0:
        raise ValidationError("metric dataset is empty")
    probe = model.copy()
    full_logits, _ = probe.forward(metric_patches)
    p = softmax(full_logits, axis=1)
    raw = np.empty(probe.num_layers)
    for l, blk in enumerate(probe.blocks):
        was_enabled = blk.enabled
        blk.enabled = False
        ablated_logits, _ = probe.forward(metric_patches)
        blk.enabled = was_enabled
        q = softmax(ablated_logits, axis=1)
        raw[l] = kl_divergence(p, q).mean()
    return layer_scores_from_raw(raw, invert=invert)


# --- score file round trip ---


def scores_to_dict(scores: NeuronScores, layer_scores: LayerScores | None = None) -> dict:
    alpha, beta, gamma = scores.weights
    layers = []
    for entry in scores.layers:
        units = []
        for group in (entry.ffn, entry.mha):
            for j in range(group.width):
                units.append(
                    {
                        "j": j,
                        "kind": group.kind,
                        "A": group.activeness[j],
                        "R": group.redundancy[j],
                        "T": group.relevance[j],
                        "I": group.composite[j],
                    }
                )
        layers.append({"layer": entry.layer, "units": units})
    doc = {
        "version": SCORES_VERSION,
        "weights": {"alpha": alpha, "beta": beta, "gamma": gamma},
        "layers": layers,
        "warnings": list(scores.warnings),
    }
    if layer_scores is not None:
        doc["layer_scores"] = [
            {"layer": l, "delta_raw": layer_scores.delta_raw[l], "delta": layer_scores.delta[l]}
            for l in range(len(layer_scores.delta))
        ]
    return doc


def scores_from_dict(doc: dict) -> tuple[NeuronScores, LayerScores | None]:
    w = doc["weights"]
    weights = validate_weights((w["alpha"], w["beta"], w["gamma"]))
    layers = []
    for entry in doc["layers"]:
        by_kind: dict[str, list[dict]] = {FFN: [], MHA: []}
        for unit in entry["units"]:
            by_kind[unit["kind"]].append(unit)
        groups = {}
        for kind, units in by_kind.items():
            units.sort(key=lambda u: u["j"])
            raw = {
                crit: np.array([u[key] for u in units])
                for crit, key in (("A", "A"), ("R", "R"), ("T", "T"), ("I", "I"))
            }
            groups[kind] = GroupScores(
                kind=kind,
                activeness=raw["A"],
                redundancy=raw["R"],
                relevance=raw["T"],
                composite=raw["I"],
            )
        layers.append(
            LayerUnitScores(layer=int(entry["layer"]), ffn=groups[FFN], mha=groups[MHA])
        )
    scores = NeuronScores(weights=weights, layers=layers, warnings=list(doc.get("warnings", [])))
    layer_scores = None
    if "layer_scores" in doc:
        rows = sorted(doc["layer_scores"], key=lambda r: r["layer"])
        layer_scores = LayerScores(
            delta_raw=np.array([r["delta_raw"] for r in rows]),
            delta=np.array([r["delta"] for r in rows]),
        )
    return scores, layer_scores


def save_scores(path, scores: NeuronScores, layer_scores: LayerScores | None = None) -> None:
    jsonio.dump(scores_to_dict(scores, layer_scores), path)


def load_scores(path) -> tuple[NeuronScores, LayerScores | None]:
    return scores_from_dict(jsonio.load(path))
