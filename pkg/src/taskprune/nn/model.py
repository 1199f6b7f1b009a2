"""Minimal deterministic vision-transformer inference engine.

Images arrive as patch matrices ``(batch, num_patches, patch_dim)``. A
linear patch embedding, a learned class token and positional embeddings
feed a stack of pre-norm blocks (multi-head self-attention + two-layer
GELU feed-forward, both residual). The classifier head reads the class
token of the final layer.

Everything is float64 numpy, so identical weights and inputs give
bit-identical logits. Blocks carry an ``enabled`` switch: a disabled
block passes its input through unchanged (residual-only identity).

Pruning granularity: feed-forward hidden units (one column of ``w1``
plus its bias, one row of ``w2``) and attention value channels (one
column of ``wv`` plus its bias, one row of ``wo``). Q/K projections are
organized per head with a fixed per-head width ``head_dk``; a head is
removed only once all of its value channels are gone.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, ValidationError
from .functional import gelu, layer_norm, softmax


@dataclass
class Block:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    wq: np.ndarray  # (d, num_heads * head_dk)
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray  # (d, channels)
    bv: np.ndarray
    wo: np.ndarray  # (channels, d)
    bo: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w1: np.ndarray  # (d, ffn_width)
    b1: np.ndarray
    w2: np.ndarray  # (ffn_width, d)
    b2: np.ndarray
    head_dk: int
    head_v: list[int]  # value channels per live head; sum == channels
    enabled: bool = True

    @property
    def ffn_width(self) -> int:
        return self.w1.shape[1]

    @property
    def channels(self) -> int:
        return self.wv.shape[1]

    @property
    def num_heads(self) -> int:
        return len(self.head_v)

    def copy(self) -> "Block":
        return Block(
            *(getattr(self, f).copy() for f in _BLOCK_ARRAYS),
            head_dk=self.head_dk,
            head_v=list(self.head_v),
            enabled=self.enabled,
        )

    def validate(self, d: int, layer: int) -> None:
        if self.num_heads < 1:
            raise ValidationError(f"layer {layer}: no attention heads left")
        if self.ffn_width < 1:
            raise ValidationError(f"layer {layer}: no feed-forward hidden units left")
        if min(self.head_v) < 1:
            raise ValidationError(f"layer {layer}: head with zero value channels")
        nq = self.num_heads * self.head_dk
        cv = sum(self.head_v)
        checks = {
            "ln1": (self.ln1_gain.shape == (d,) and self.ln1_bias.shape == (d,)),
            "wq": (self.wq.shape == (d, nq) and self.bq.shape == (nq,)),
            "wk": (self.wk.shape == (d, nq) and self.bk.shape == (nq,)),
            "wv": (self.wv.shape == (d, cv) and self.bv.shape == (cv,)),
            "wo": (self.wo.shape == (cv, d) and self.bo.shape == (d,)),
            "ln2": (self.ln2_gain.shape == (d,) and self.ln2_bias.shape == (d,)),
            "ffn": (
                self.w1.shape == (d, self.ffn_width)
                and self.b1.shape == (self.ffn_width,)
                and self.w2.shape == (self.ffn_width, d)
                and self.b2.shape == (d,)
            ),
        }
        for name, ok in checks.items():
            if not ok:
                raise ShapeError(f"layer {layer} {name}: inconsistent weight shapes")


_BLOCK_ARRAYS = [
    "ln1_gain", "ln1_bias",
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_gain", "ln2_bias",
    "w1", "b1", "w2", "b2",
]


@dataclass
class LayerTrace:
    """Token-averaged per-unit values for one enabled block.

    ``ffn``: (batch, ffn_width) post-GELU hidden activations.
    ``mha``: (batch, channels) attention context entering the output
    projection. Under the recorded convention the per-unit activation
    and the per-unit output coincide, so both score paths read these.
    """

    ffn: np.ndarray | None
    mha: np.ndarray | None


@dataclass
class ActivationTrace:
    layers: list[LayerTrace]
    logits: np.ndarray
    attention: list[list[np.ndarray]] | None = None  # per layer, per head (B, T, T)


@dataclass
class Model:
    patch_w: np.ndarray  # (patch_dim, d)
    patch_b: np.ndarray
    class_token: np.ndarray  # (d,)
    pos_embed: np.ndarray  # (num_patches + 1, d)
    blocks: list[Block]
    head_w: np.ndarray  # (d, num_classes)
    head_b: np.ndarray
    seed: int = 0
    base_ffn_width: int = 0  # construction-time nominal widths, kept as metadata
    base_heads: int = 0

    @property
    def d(self) -> int:
        return self.patch_w.shape[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_w.shape[0]

    @property
    def num_patches(self) -> int:
        return self.pos_embed.shape[0] - 1

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def copy(self) -> "Model":
        return Model(
            patch_w=self.patch_w.copy(),
            patch_b=self.patch_b.copy(),
            class_token=self.class_token.copy(),
            pos_embed=self.pos_embed.copy(),
            blocks=[b.copy() for b in self.blocks],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
            seed=self.seed,
            base_ffn_width=self.base_ffn_width,
            base_heads=self.base_heads,
        )

    def validate(self) -> None:
        d = self.d
        if self.patch_b.shape != (d,) or self.class_token.shape != (d,):
            raise ShapeError("patch_embed: embedding shapes inconsistent")
        if self.pos_embed.ndim != 2 or self.pos_embed.shape[1] != d:
            raise ShapeError("patch_embed: positional embedding width != d")
        for i, blk in enumerate(self.blocks):
            blk.validate(d, i)
        if self.head_w.shape[0] != d or self.head_b.shape != (self.num_classes,):
            raise ShapeError("head: classifier shapes inconsistent")

    def unit_widths(self) -> list[tuple[int, int]]:
        """Per layer (ffn_width, mha_channels) of the current structure."""
        return [(b.ffn_width, b.channels) for b in self.blocks]

    def _check_batch(self, patches: np.ndarray) -> None:
        if patches.ndim != 3 or patches.shape[1:] != (self.num_patches, self.patch_dim):
            raise ShapeError(
                "patch_embed: batch shape "
                f"{patches.shape} does not match (n, {self.num_patches}, {self.patch_dim})"
            )

    def embed(self, patches: np.ndarray) -> np.ndarray:
        self._check_batch(patches)
        z = patches @ self.patch_w + self.patch_b
        cls = np.broadcast_to(self.class_token, (len(patches), 1, self.d))
        return np.concatenate([cls, z], axis=1) + self.pos_embed

    def forward(
        self, patches: np.ndarray, trace: bool = False, attention: bool = False
    ) -> tuple[np.ndarray, ActivationTrace | None]:
        """Run the batch through the network.

        Returns logits ``(batch, num_classes)`` and, when ``trace`` is
        set, an ActivationTrace whose entries align with the current
        (possibly pruned) structure. Disabled layers trace as None.
        """
        z = self.embed(patches)
        layer_traces: list[LayerTrace] = []
        attn_all: list[list[np.ndarray]] = []
        for blk in self.blocks:
            if not blk.enabled:
                if trace:
                    layer_traces.append(LayerTrace(ffn=None, mha=None))
                if attention:
                    attn_all.append([])
                continue
            z, ctx, hidden, attn = _block_forward(blk, z, keep_attention=attention)
            if trace:
                layer_traces.append(
                    LayerTrace(ffn=hidden.mean(axis=1), mha=ctx.mean(axis=1))
                )
            if attention:
                attn_all.append(attn)
        logits = z[:, 0, :] @ self.head_w + self.head_b
        if not trace and not attention:
            return logits, None
        return logits, ActivationTrace(
            layers=layer_traces, logits=logits, attention=attn_all if attention else None
        )

    def token_representation(self, patches: np.ndarray, layer_index: int | None = None) -> np.ndarray:
        """Class-token representation after ``layer_index`` (default: last layer)."""
        if layer_index is None:
            layer_index = self.num_layers - 1
        if layer_index >= self.num_layers:
            raise ValidationError(
                f"layer index {layer_index} out of range for {self.num_layers} layers"
            )
        z = self.embed(patches)
        for blk in self.blocks[: layer_index + 1]:
            if blk.enabled:
                z, _, _, _ = _block_forward(blk, z)
        return z[:, 0, :]

    def param_count(self) -> int:
        """Exact scalar-weight count of embed, enabled blocks, and head."""
        d = self.d
        total = self.patch_w.size + self.patch_b.size
        total += self.class_token.size + self.pos_embed.size
        for blk in self.blocks:
            if not blk.enabled:
                continue
            total += sum(getattr(blk, f).size for f in _BLOCK_ARRAYS)
        total += self.head_w.size + self.head_b.size
        return int(total)


def _block_forward(
    blk: Block, z: np.ndarray, keep_attention: bool = False
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[np.ndarray]]:
    """One pre-norm block; returns (output, attention context, ffn activations, attention maps)."""
    u = layer_norm(z, blk.ln1_gain, blk.ln1_bias)
    q = u @ blk.wq + blk.bq
    k = u @ blk.wk + blk.bk
    v = u @ blk.wv + blk.bv
    batch, tokens, _ = z.shape
    ctx = np.empty((batch, tokens, blk.channels))
    attn: list[np.ndarray] = []
    scale = 1.0 / np.sqrt(blk.head_dk)
    qk_off = 0
    v_off = 0
    for vh in blk.head_v:
        qh = q[..., qk_off : qk_off + blk.head_dk]
        kh = k[..., qk_off : qk_off + blk.head_dk]
        scores = qh @ kh.swapaxes(1, 2) * scale
        probs = softmax(scores, axis=-1)
        ctx[..., v_off : v_off + vh] = probs @ v[..., v_off : v_off + vh]
        if keep_attention:
            attn.append(probs)
        qk_off += blk.head_dk
        v_off += vh
    y = z + ctx @ blk.wo + blk.bo
    w = layer_norm(y, blk.ln2_gain, blk.ln2_bias)
    hidden = gelu(w @ blk.w1 + blk.b1)
    out = y + hidden @ blk.w2 + blk.b2
    return out, ctx, hidden, attn


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_model(
    patch_dim: int,
    num_patches: int,
    d: int,
    num_layers: int,
    num_heads: int,
    ffn_width: int,
    num_classes: int,
    seed: int = 0,
) -> Model:
    """Seeded construction; all weights uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero."""
    if num_heads < 1 or d % num_heads != 0:
        raise ValidationError(f"head count {num_heads} must be >= 1 and divide d={d}")
    if ffn_width < 1:
        raise ValidationError("ffn_width must be >= 1")
    head_dk = d // num_heads
    rng = np.random.default_rng(seed)
    blocks = []
    patch_w = _uniform(rng, patch_dim, (patch_dim, d))
    class_token = _uniform(rng, d, (d,))
    pos_embed = _uniform(rng, d, (num_patches + 1, d))
    for _ in range(num_layers):
        blocks.append(
            Block(
                ln1_gain=np.ones(d),
                ln1_bias=np.zeros(d),
                wq=_uniform(rng, d, (d, d)),
                bq=np.zeros(d),
                wk=_uniform(rng, d, (d, d)),
                bk=np.zeros(d),
                wv=_uniform(rng, d, (d, d)),
                bv=np.zeros(d),
                wo=_uniform(rng, d, (d, d)),
                bo=np.zeros(d),
                ln2_gain=np.ones(d),
                ln2_bias=np.zeros(d),
                w1=_uniform(rng, d, (d, ffn_width)),
                b1=np.zeros(ffn_width),
                w2=_uniform(rng, ffn_width, (ffn_width, d)),
                b2=np.zeros(d),
                head_dk=head_dk,
                head_v=[head_dk] * num_heads,
            )
        )
    model = Model(
        patch_w=patch_w,
        patch_b=np.zeros(d),
        class_token=class_token,
        pos_embed=pos_embed,
        blocks=blocks,
        head_w=_uniform(rng, d, (d, num_classes)),
        head_b=np.zeros(num_classes),
        seed=seed,
        base_ffn_width=ffn_width,
        base_heads=num_heads,
    )
    model.validate()
    return model


def predict(model: Model, patches: np.ndarray) -> np.ndarray:
    logits, _ = model.forward(patches)
    return np.argmax(logits, axis=1)


def evaluate_accuracy(model: Model, patches: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, patches) == labels))
