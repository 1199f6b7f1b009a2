"""Rank-agreement analyses across tasks.

Kendall's tau is computed exactly from discordant-pair counts, found in
O(n log n) by counting inversions during a bottom-up merge sort. Task
divergence matrices report (1 - tau) / 2 between global unit rankings,
with per-layer and per-kind breakdowns; layer profiles compare the
per-layer importance distributions two metric sets induce on one model.
"""

from dataclasses import dataclass

import numpy as np

from . import jsonio
from .errors import ValidationError
from .importance import FFN, MHA, LayerScores, NeuronScores, layer_importance
from .nn.model import Model


@dataclass
class Ranking:
    """Identifiers ordered by descending importance; a permutation."""

    order: np.ndarray

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)

    @property
    def n(self) -> int:
        return len(self.order)

    def validate(self) -> None:
        if len(np.unique(self.order)) != self.n:
            raise ValidationError("ranking contains repeated identifiers")


def count_inversions(seq) -> int:
    """Pairs (i, j) with i < j but seq[i] > seq[j], by merge counting."""
    a = list(seq)
    n = len(a)
    buf = a[:]
    inversions = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[i] <= a[j]:
                    buf[k] = a[i]
                    i += 1
                else:
                    buf[k] = a[j]
                    j += 1
                    inversions += mid - i
                k += 1
            while i < mid:
                buf[k] = a[i]
                i += 1
                k += 1
            while j < hi:
                buf[k] = a[j]
                j += 1
                k += 1
        a, buf = buf, a
        width *= 2
    return inversions


def kendall_tau(rank_a: Ranking, rank_b: Ranking) -> float:
    """Exact tau = 2(Pc - Pd) / (n(n-1)) between two tie-free rankings."""
    if not isinstance(rank_a, Ranking):
        rank_a = Ranking(np.asarray(rank_a))
    if not isinstance(rank_b, Ranking):
        rank_b = Ranking(np.asarray(rank_b))
    rank_a.validate()
    rank_b.validate()
    n = rank_a.n
    if n < 2:
        raise ValidationError("need at least two ranked items")
    if n != rank_b.n or not np.array_equal(
        np.sort(rank_a.order), np.sort(rank_b.order)
    ):
        raise ValidationError("rankings cover different identifier sets")
    position_in_b = np.empty(rank_b.order.max() + 1, dtype=np.int64)
    position_in_b[rank_b.order] = np.arange(n)
    discordant = count_inversions(position_in_b[rank_a.order])
    pairs = n * (n - 1) // 2
    return (pairs - 2 * discordant) / pairs


def importance_ranking(
    scores: NeuronScores, layer: int | None = None, kind: str | None = None
) -> Ranking:
    """Units ordered by descending composite importance.

    Identifiers enumerate the model structure (layers ascending,
    feed-forward units before attention channels). Ties resolve toward
    the lower identifier.
    """
    values = []
    for entry in scores.layers:
        for group in (entry.ffn, entry.mha):
            for j in range(group.width):
                include = (layer is None or entry.layer == layer) and (
                    kind is None or group.kind == kind
                )
                values.append((include, group.composite[j]))
    ids = np.array([i for i, (inc, _) in enumerate(values) if inc], dtype=np.int64)
    vals = np.array([v for inc, v in values if inc])
    if len(ids) == 0:
        raise ValidationError("no units match the requested layer/kind")
    order = np.lexsort((ids, -vals))
    return Ranking(ids[order])


def _structures_match(score_sets: list[NeuronScores]) -> None:
    first = [
        (entry.layer, entry.ffn.width, entry.mha.width) for entry in score_sets[0].layers
    ]
    for other in score_sets[1:]:
        shape = [(e.layer, e.ffn.width, e.mha.width) for e in other.layers]
        if shape != first:
            raise ValidationError("score sets cover different model structures")


@dataclass
class DivergenceResult:
    task_ids: list[str]
    tau: np.ndarray  # (m, m) pairwise rank correlation, diagonal 1
    divergence: np.ndarray  # (1 - tau) / 2, diagonal 0
    breakdown: list[dict]  # {layer, kind, mean_tau} over distinct task pairs


def task_divergence_matrix(
    score_sets: list[NeuronScores], task_ids: list[str] | None = None
) -> DivergenceResult:
    m = len(score_sets)
    if m < 2:
        raise ValidationError("need at least two tasks to compare")
    _structures_match(score_sets)
    if task_ids is None:
        task_ids = [f"task_{i}" for i in range(m)]
    if len(task_ids) != m:
        raise ValidationError("task id count does not match score sets")
    global_ranks = [importance_ranking(s) for s in score_sets]
    tau = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            tau[i, j] = tau[j, i] = kendall_tau(global_ranks[i], global_ranks[j])
    breakdown = []
    for entry in score_sets[0].layers:
        for kind, width in ((FFN, entry.ffn.width), (MHA, entry.mha.width)):
            if width < 2:
                continue  # tau undefined for a single unit
            ranks = [
                importance_ranking(s, layer=entry.layer, kind=kind) for s in score_sets
            ]
            taus = [
                kendall_tau(ranks[i], ranks[j])
                for i in range(m)
                for j in range(i + 1, m)
            ]
            breakdown.append(
                {"layer": entry.layer, "kind": kind, "mean_tau": float(np.mean(taus))}
            )
    return DivergenceResult(
        task_ids=list(task_ids),
        tau=tau,
        divergence=(1.0 - tau) / 2.0,
        breakdown=breakdown,
    )


def divergence_csv(result: DivergenceResult) -> str:
    lines = ["task," + ",".join(result.task_ids)]
    for i, tid in enumerate(result.task_ids):
        row = ",".join(format(v, ".17g") for v in result.divergence[i])
        lines.append(f"{tid},{row}")
    return "\n".join(lines) + "\n"


def save_divergence(csv_path, json_path, result: DivergenceResult) -> None:
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(divergence_csv(result))
    jsonio.dump(
        {
            "version": 1,
            "task_ids": result.task_ids,
            "tau": result.tau.tolist(),
            "divergence": result.divergence.tolist(),
            "breakdown": result.breakdown,
        },
        json_path,
    )


@dataclass
class ProfileComparison:
    profile_a: LayerScores
    profile_b: LayerScores
    layer_rank_a: list[int]  # layers by descending divergence share
    layer_rank_b: list[int]
    tau: float | None  # None when a single layer makes tau undefined


def layer_profile_compare(
    model: Model, metric_a: np.ndarray, metric_b: np.ndarray
) -> ProfileComparison:
    profile_a = layer_importance(model, metric_a)
    profile_b = layer_importance(model, metric_b)

    def rank(profile: LayerScores) -> list[int]:
        ids = np.arange(len(profile.delta))
        return [int(x) for x in ids[np.lexsort((ids, -profile.delta))]]

    rank_a = rank(profile_a)
    rank_b = rank(profile_b)
    tau = kendall_tau(Ranking(rank_a), Ranking(rank_b)) if len(rank_a) >= 2 else None
    return ProfileComparison(
        profile_a=profile_a,
        profile_b=profile_b,
        layer_rank_a=rank_a,
        layer_rank_b=rank_b,
        tau=tau,
    )
