"""Gradient training for the two trainable regimes.

Head-only finetuning treats the network body as a frozen feature
extractor: class-token representations are computed once, then the
classifier is fit by minibatch SGD on cross-entropy. The returned model
is the epoch snapshot with the lowest reference-set cross-entropy
(initial state included), so finetuning never ends worse than it began.

Full training updates the patch embedding, class token, positional
embeddings, and head while block weights stay frozen; gradients flow
through the blocks via exact input-gradient backprop.
"""

from dataclasses import dataclass

import numpy as np

from .functional import (
    cross_entropy,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_input_grad,
    softmax,
)
from .model import Block, Model, evaluate_accuracy


@dataclass
class FinetuneReport:
    train_loss: list[float]  # mean minibatch cross-entropy per epoch
    reference_ce: list[float]  # full-set cross-entropy; index 0 is pre-update
    best_epoch: int  # epoch whose head the returned model carries (0 = unchanged)


def _logit_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    grad = softmax(logits, axis=1)
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


def head_gradient(
    features: np.ndarray, labels: np.ndarray, head_w: np.ndarray, head_b: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """Cross-entropy gradient of a linear head on fixed features."""
    logits = features @ head_w + head_b
    dlogits = _logit_grad(logits, labels)
    return features.T @ dlogits, dlogits.sum(axis=0), cross_entropy(logits, labels)


def finetune_head(
    model: Model,
    patches: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[Model, FinetuneReport]:
    features = model.token_representation(patches)
    head_w = model.head_w.copy()
    head_b = model.head_b.copy()
    rng = np.random.default_rng(seed)

    def reference_ce(w, b):
        return cross_entropy(features @ w + b, labels)

    snapshots = [(head_w.copy(), head_b.copy())]
    ce_curve = [reference_ce(head_w, head_b)]
    train_loss = []
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        batch_losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            gw, gb, loss = head_gradient(features[idx], labels[idx], head_w, head_b)
            head_w -= lr * gw
            head_b -= lr * gb
            batch_losses.append(loss)
        train_loss.append(float(np.mean(batch_losses)))
        snapshots.append((head_w.copy(), head_b.copy()))
        ce_curve.append(reference_ce(head_w, head_b))
    best = int(np.argmin(ce_curve))  # ties resolve to the earliest epoch
    out = model.copy()
    out.head_w, out.head_b = snapshots[best]
    return out, FinetuneReport(train_loss=train_loss, reference_ce=ce_curve, best_epoch=best)


def _block_forward_cached(blk: Block, z: np.ndarray) -> tuple[np.ndarray, dict]:
    u = layer_norm(z, blk.ln1_gain, blk.ln1_bias)
    q = u @ blk.wq + blk.bq
    k = u @ blk.wk + blk.bk
    v = u @ blk.wv + blk.bv
    batch, tokens, _ = z.shape
    ctx = np.empty((batch, tokens, blk.channels))
    probs_all = []
    scale = 1.0 / np.sqrt(blk.head_dk)
    qk_off = v_off = 0
    for vh in blk.head_v:
        qh = q[..., qk_off : qk_off + blk.head_dk]
        kh = k[..., qk_off : qk_off + blk.head_dk]
        probs = softmax(qh @ kh.swapaxes(1, 2) * scale, axis=-1)
        ctx[..., v_off : v_off + vh] = probs @ v[..., v_off : v_off + vh]
        probs_all.append(probs)
        qk_off += blk.head_dk
        v_off += vh
    y = z + ctx @ blk.wo + blk.bo
    w = layer_norm(y, blk.ln2_gain, blk.ln2_bias)
    pre = w @ blk.w1 + blk.b1
    out = y + gelu(pre) @ blk.w2 + blk.b2
    cache = {"z": z, "u": u, "q": q, "k": k, "v": v, "probs": probs_all, "y": y, "w": w, "pre": pre}
    return out, cache


def _block_input_grad(blk: Block, cache: dict, dout: np.ndarray) -> np.ndarray:
    dpre = (dout @ blk.w2.T) * gelu_grad(cache["pre"])
    dy = dout + layer_norm_input_grad(dpre @ blk.w1.T, cache["y"], blk.ln2_gain)
    dctx = dy @ blk.wo.T
    dq = np.empty_like(cache["q"])
    dk = np.empty_like(cache["k"])
    dv = np.empty_like(cache["v"])
    scale = 1.0 / np.sqrt(blk.head_dk)
    qk_off = v_off = 0
    for h, vh in enumerate(blk.head_v):
        probs = cache["probs"][h]
        dctx_h = dctx[..., v_off : v_off + vh]
        dv[..., v_off : v_off + vh] = probs.swapaxes(1, 2) @ dctx_h
        dprobs = dctx_h @ cache["v"][..., v_off : v_off + vh].swapaxes(1, 2)
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        qh = cache["q"][..., qk_off : qk_off + blk.head_dk]
        kh = cache["k"][..., qk_off : qk_off + blk.head_dk]
        dq[..., qk_off : qk_off + blk.head_dk] = dscores @ kh * scale
        dk[..., qk_off : qk_off + blk.head_dk] = dscores.swapaxes(1, 2) @ qh * scale
        qk_off += blk.head_dk
        v_off += vh
    du = dq @ blk.wq.T + dk @ blk.wk.T + dv @ blk.wv.T
    return dy + layer_norm_input_grad(du, cache["z"], blk.ln1_gain)


def embedding_gradients(
    model: Model, patches: np.ndarray, labels: np.ndarray
) -> tuple[dict, float]:
    """Cross-entropy gradients for embedding parameters and head; blocks frozen.

    Returns a dict with keys patch_w, patch_b, class_token, pos_embed,
    head_w, head_b, and the batch loss.
    """
    z = model.embed(patches)
    caches = []
    for blk in model.blocks:
        if not blk.enabled:
            caches.append(None)
            continue
        z, cache = _block_forward_cached(blk, z)
        caches.append(cache)
    feats = z[:, 0, :]
    logits = feats @ model.head_w + model.head_b
    loss = cross_entropy(logits, labels)
    dlogits = _logit_grad(logits, labels)
    dz = np.zeros_like(z)
    dz[:, 0, :] = dlogits @ model.head_w.T
    for blk, cache in zip(reversed(model.blocks), reversed(caches)):
        if cache is not None:
            dz = _block_input_grad(blk, cache, dz)
    grads = {
        "head_w": feats.T @ dlogits,
        "head_b": dlogits.sum(axis=0),
        "pos_embed": dz.sum(axis=0),
        "class_token": dz[:, 0, :].sum(axis=0),
        "patch_b": dz[:, 1:, :].sum(axis=(0, 1)),
        "patch_w": np.tensordot(patches, dz[:, 1:, :], axes=([0, 1], [0, 1])),
    }
    return grads, loss


@dataclass
class TrainReport:
    train_loss: list[float]
    val_accuracy: list[float]


def train_model(
    model: Model,
    patches: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    seed: int = 0,
    val_patches: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
) -> tuple[Model, TrainReport]:
    """SGD on embedding + head with frozen blocks; mutates a copy of the model."""
    out = model.copy()
    rng = np.random.default_rng(seed)
    train_loss = []
    val_accuracy = []
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        batch_losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            grads, loss = embedding_gradients(out, patches[idx], labels[idx])
            for name, g in grads.items():
                setattr(out, name, getattr(out, name) - lr * g)
            batch_losses.append(loss)
        train_loss.append(float(np.mean(batch_losses)))
        if val_patches is not None:
            val_accuracy.append(evaluate_accuracy(out, val_patches, val_labels))
    return out, TrainReport(train_loss=train_loss, val_accuracy=val_accuracy)
