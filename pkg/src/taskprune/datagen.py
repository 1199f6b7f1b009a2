"""Seeded synthetic multi-device scenarios.

Each class is a Gaussian prototype image plus per-sample pixel noise.
Classes are partitioned into disjoint label groups, one group per
device, so device distributions are Non-IID by construction while the
public pool covers every class. Everything is a pure function of the
scenario seed.
"""

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import jsonio
from .container import read_container, take, write_container
from .errors import ValidationError
from .nn.model import Model, build_model
from .nn.training import train_model


@dataclass
class ScenarioSpec:
    num_devices: int
    num_classes: int
    pool_per_class: int
    device_per_class: int
    image_size: int = 16
    patch_size: int = 4
    noise: float = 0.25
    prototype_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_devices < 1 or self.num_devices > self.num_classes:
            raise ValidationError(
                f"{self.num_devices} devices cannot partition {self.num_classes} classes"
            )
        if self.noise < 0:
            raise ValidationError("noise level must be >= 0")
        if self.image_size % self.patch_size != 0:
            raise ValidationError("patch size must divide image size")


@dataclass
class Scenario:
    spec: ScenarioSpec
    groups: list[list[int]]  # device i holds exactly the classes in groups[i]
    pool_images: np.ndarray  # (n, H, W)
    pool_labels: np.ndarray  # (n,) int64
    device_images: list[np.ndarray]
    device_labels: list[np.ndarray]
    prototypes: np.ndarray | None = None  # ground truth; not persisted

    @property
    def num_devices(self) -> int:
        return len(self.device_images)


def generate_scenario(spec: ScenarioSpec) -> Scenario:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    c, size = spec.num_classes, spec.image_size
    prototypes = rng.normal(0.0, spec.prototype_scale, (c, size, size))
    order = rng.permutation(c)
    groups = [sorted(int(x) for x in part) for part in np.array_split(order, spec.num_devices)]

    def sample_class(label: int, count: int) -> np.ndarray:
        base = np.broadcast_to(prototypes[label], (count, size, size))
        if spec.noise <= 0:
            return base.copy()
        return base + spec.noise * rng.standard_normal((count, size, size))

    pool_images = np.concatenate([sample_class(k, spec.pool_per_class) for k in range(c)])
    pool_labels = np.repeat(np.arange(c, dtype=np.int64), spec.pool_per_class)
    shuffle = rng.permutation(len(pool_labels))
    pool_images, pool_labels = pool_images[shuffle], pool_labels[shuffle]

    device_images, device_labels = [], []
    for group in groups:
        imgs = np.concatenate([sample_class(k, spec.device_per_class) for k in group])
        labs = np.repeat(np.asarray(group, dtype=np.int64), spec.device_per_class)
        mix = rng.permutation(len(labs))
        device_images.append(imgs[mix])
        device_labels.append(labs[mix])
    return Scenario(
        spec=spec,
        groups=groups,
        pool_images=pool_images,
        pool_labels=pool_labels,
        device_images=device_images,
        device_labels=device_labels,
        prototypes=prototypes,
    )


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(n, H, W) images to (n, patches, patch_size^2) row-major patch rows."""
    if images.ndim != 3:
        raise ValidationError(f"expected (n, H, W) images, got shape {images.shape}")
    n, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValidationError(f"patch size {patch_size} does not tile {h}x{w} images")
    gh, gw = h // patch_size, w // patch_size
    tiles = images.reshape(n, gh, patch_size, gw, patch_size)
    return np.ascontiguousarray(tiles.transpose(0, 1, 3, 2, 4)).reshape(
        n, gh * gw, patch_size * patch_size
    )


@dataclass
class ArchConfig:
    d: int = 32
    num_layers: int = 4
    num_heads: int = 4
    ffn_width: int = 64
    patch_size: int = 4


def train_toy_model(
    images: np.ndarray,
    labels: np.ndarray,
    arch: ArchConfig,
    epochs: int = 30,
    lr: float = 0.1,
    batch_size: int = 64,
    seed: int = 0,
) -> Model:
    """Stand-in for a pretrained backbone: embedding + head trained on the pool."""
    if len(images) == 0:
        raise ValidationError("training pool is empty")
    patches = patchify(images, arch.patch_size)
    num_classes = int(labels.max()) + 1
    model = build_model(
        patch_dim=arch.patch_size * arch.patch_size,
        num_patches=patches.shape[1],
        d=arch.d,
        num_layers=arch.num_layers,
        num_heads=arch.num_heads,
        ffn_width=arch.ffn_width,
        num_classes=num_classes,
        seed=seed,
    )
    trained, report = train_model(
        model, patches, labels, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed
    )
    for i, loss in enumerate(report.train_loss):
        if not np.isfinite(loss):
            raise ValidationError(f"training diverged at epoch {i} (loss {loss})")
    return trained


# --- scenario directory layout: scenario.json, pool.bin, devices/dev_<i>.bin ---

DATASET_FORMAT = "labeled-images"


def save_dataset(path, images: np.ndarray, labels: np.ndarray) -> None:
    header = {
        "format": DATASET_FORMAT,
        "version": 1,
        "shape": list(images.shape),
        "count": len(labels),
    }
    write_container(path, header, [images.astype(np.float64), labels.astype(np.int64)])


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    header, payload = read_container(path)
    if header.get("format") != DATASET_FORMAT:
        raise ValidationError(f"not a dataset container: {path}")
    images, off = take(payload, 0, np.float64, tuple(header["shape"]))
    labels, _ = take(payload, off, np.int64, (header["count"],))
    return images, labels


def save_scenario(directory, scenario: Scenario) -> None:
    root = Path(directory)
    (root / "devices").mkdir(parents=True, exist_ok=True)
    jsonio.dump(
        {
            "version": 1,
            "spec": asdict(scenario.spec),
            "groups": scenario.groups,
        },
        root / "scenario.json",
    )
    save_dataset(root / "pool.bin", scenario.pool_images, scenario.pool_labels)
    for i in range(scenario.num_devices):
        save_dataset(
            root / "devices" / f"dev_{i}.bin",
            scenario.device_images[i],
            scenario.device_labels[i],
        )


def load_scenario(directory) -> Scenario:
    root = Path(directory)
    doc = jsonio.load(root / "scenario.json")
    spec = ScenarioSpec(**doc["spec"])
    pool_images, pool_labels = load_dataset(root / "pool.bin")
    device_images, device_labels = [], []
    for i in range(spec.num_devices):
        imgs, labs = load_dataset(root / "devices" / f"dev_{i}.bin")
        device_images.append(imgs)
        device_labels.append(labs)
    return Scenario(
        spec=spec,
        groups=[list(map(int, g)) for g in doc["groups"]],
        pool_images=pool_images,
        pool_labels=pool_labels,
        device_images=device_images,
        device_labels=device_labels,
    )
