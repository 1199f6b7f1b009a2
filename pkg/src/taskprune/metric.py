"""Cloud-side proxy dataset construction.

Every public-pool sample is scored under a device's uploaded mixture
parameters; the top-N by log-likelihood become that device's metric
dataset. The cloud never touches device samples, only the uploaded
parameters.
"""

from dataclasses import dataclass

import numpy as np

from . import jsonio
from .datagen import patchify
from .errors import ValidationError
from .gmm import GmmParams, log_density
from .nn.model import Model

MANIFEST_VERSION = 1

RAW_FLATTEN = "raw-flatten"
MODEL_EMBEDDING = "model-embedding"


@dataclass
class FeatureExtractor:
    """Deterministic sample-to-vector map shared by devices and cloud.

    ``raw-flatten`` flattens each sample row-major. ``model-embedding``
    reads the class-token representation after ``layer_index`` (None =
    final layer). When ``patch_size`` is set, inputs are treated as
    images and patchified first; otherwise they must already be patch
    tensors matching the model.
    """

    mode: str = MODEL_EMBEDDING
    model: Model | None = None
    layer_index: int | None = None
    patch_size: int | None = None

    def validate(self) -> None:
        if self.mode not in (RAW_FLATTEN, MODEL_EMBEDDING):
            raise ValidationError(f"unknown extraction mode {self.mode!r}")
        if self.mode == MODEL_EMBEDDING and self.model is None:
            raise ValidationError("model-embedding extraction requires a model")


def extract_features(extractor: FeatureExtractor, samples: np.ndarray) -> np.ndarray:
    extractor.validate()
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim < 2:
        raise ValidationError(f"expected a batch of samples, got shape {samples.shape}")
    if extractor.mode == RAW_FLATTEN:
        return samples.reshape(len(samples), -1)
    model = extractor.model
    patches = (
        patchify(samples, extractor.patch_size)
        if extractor.patch_size is not None
        else samples
    )
    if patches.ndim != 3 or patches.shape[1:] != (model.num_patches, model.patch_dim):
        raise ValidationError(
            f"sample shape {samples.shape} incompatible with model patches "
            f"({model.num_patches}, {model.patch_dim})"
        )
    return model.token_representation(patches, extractor.layer_index)


@dataclass
class MetricDataset:
    device_id: str
    indices: np.ndarray  # selected pool indices, descending score order
    scores: np.ndarray  # log-likelihood of every pool sample
    size: int

    def validate(self, pool_size: int | None = None) -> None:
        n = pool_size if pool_size is not None else len(self.scores)
        if len(self.indices) != self.size:
            raise ValidationError("selection length disagrees with declared size")
        if len(set(self.indices.tolist())) != self.size:
            raise ValidationError("selected indices are not distinct")
        if self.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ValidationError("selected index out of pool range")

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "device_id": self.device_id,
            "N": self.size,
            "indices": self.indices.tolist(),
            "scores": self.scores.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricDataset":
        out = cls(
            device_id=str(doc["device_id"]),
            indices=np.asarray(doc["indices"], dtype=np.int64),
            scores=np.asarray(doc["scores"], dtype=np.float64),
            size=int(doc["N"]),
        )
        out.validate()
        return out


def construct_metric_dataset(
    params: GmmParams, public_features: np.ndarray, size: int, device_id: str = ""
) -> MetricDataset:
    """Top-``size`` pool samples by mixture log-likelihood.

    Ties at the selection boundary resolve toward the lower pool index.
    """
    features = np.asarray(public_features, dtype=np.float64)
    n = len(features)
    if size < 0 or size > n:
        raise ValidationError(f"cannot select {size} of {n} pool samples")
    scores = log_density(params, features)
    order = np.lexsort((np.arange(n), -scores))
    return MetricDataset(
        device_id=device_id,
        indices=order[:size].astype(np.int64),
        scores=scores,
        size=size,
    )


def save_manifest(path, metric: MetricDataset) -> None:
    jsonio.dump(metric.to_dict(), path)


def load_manifest(path) -> MetricDataset:
    return MetricDataset.from_dict(jsonio.load(path))


def gather(metric: MetricDataset, *pool_arrays: np.ndarray) -> tuple[np.ndarray, ...]:
    """Index pool-aligned arrays (images, labels, features) by the selection."""
    return tuple(arr[metric.indices] for arr in pool_arrays)


def empirical_kl(
    target_features: np.ndarray, proxy_features: np.ndarray, bins: int = 16
) -> float:
    """Histogram KL(target || proxy) averaged over feature dimensions.

    Diagnostic only: measures how well the selected proxy set covers a
    held-out device sample in feature space. Probabilities are clamped
    at 1e-12, so the value is finite even with empty proxy bins.
    """
    target = np.asarray(target_features, dtype=np.float64)
    proxy = np.asarray(proxy_features, dtype=np.float64)
    if target.ndim != 2 or proxy.ndim != 2 or target.shape[1] != proxy.shape[1]:
        raise ValidationError("feature matrices must be 2-D with equal dimension")
    total = 0.0
    for dim in range(target.shape[1]):
        lo = min(target[:, dim].min(), proxy[:, dim].min())
        hi = max(target[:, dim].max(), proxy[:, dim].max())
        if hi <= lo:
            continue  # constant dimension carries no information
        edges = np.linspace(lo, hi, bins + 1)
        p = np.histogram(target[:, dim], bins=edges)[0] / len(target)
        q = np.histogram(proxy[:, dim], bins=edges)[0] / len(proxy)
        mask = p > 0
        total += float(
            np.sum(p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], 1e-12))))
        )
    return total / target.shape[1]
