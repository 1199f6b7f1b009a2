"""Model checkpoints in the binary container format.

The JSON header records the full structure (per-layer widths, per-head
value channels, enabled flags) plus construction metadata; the payload
holds every weight tensor as raw float64 in a declared order:

    patch_w, patch_b, class_token, pos_embed,
    per layer: ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo,
               ln2_gain, ln2_bias, w1, b1, w2, b2,
    head_w, head_b

Round-trips are bit-exact, so saved and reloaded models produce
identical logits.
"""

import numpy as np

from ..container import read_container, take, write_container
from ..errors import ValidationError
from .model import _BLOCK_ARRAYS, Block, Model

FORMAT = "vit-checkpoint"
VERSION = 1


def save_model(path, model: Model) -> None:
    model.validate()
    header = {
        "format": FORMAT,
        "version": VERSION,
        "d": model.d,
        "patch_dim": model.patch_dim,
        "num_patches": model.num_patches,
        "num_classes": model.num_classes,
        "d_prime": model.base_ffn_width,
        "heads": model.base_heads,
        "seed": model.seed,
        "layers": [
            {
                "ffn": blk.ffn_width,
                "head_dk": blk.head_dk,
                "head_v": list(blk.head_v),
                "enabled": blk.enabled,
            }
            for blk in model.blocks
        ],
    }
    blocks = [model.patch_w, model.patch_b, model.class_token, model.pos_embed]
    for blk in model.blocks:
        blocks.extend(getattr(blk, f) for f in _BLOCK_ARRAYS)
    blocks.extend([model.head_w, model.head_b])
    write_container(path, header, blocks)


def load_model(path) -> Model:
    header, payload = read_container(path)
    if header.get("format") != FORMAT:
        raise ValidationError(f"not a model checkpoint: {path}")
    d = header["d"]
    patches = header["num_patches"]
    off = 0
    patch_w, off = take(payload, off, np.float64, (header["patch_dim"], d))
    patch_b, off = take(payload, off, np.float64, (d,))
    class_token, off = take(payload, off, np.float64, (d,))
    pos_embed, off = take(payload, off, np.float64, (patches + 1, d))
    blocks = []
    for spec in header["layers"]:
        nq = len(spec["head_v"]) * spec["head_dk"]
        cv = sum(spec["head_v"])
        ffn = spec["ffn"]
        shapes = {
            "ln1_gain": (d,), "ln1_bias": (d,),
            "wq": (d, nq), "bq": (nq,), "wk": (d, nq), "bk": (nq,),
            "wv": (d, cv), "bv": (cv,), "wo": (cv, d), "bo": (d,),
            "ln2_gain": (d,), "ln2_bias": (d,),
            "w1": (d, ffn), "b1": (ffn,), "w2": (ffn, d), "b2": (d,),
        }
        arrays = {}
        for name in _BLOCK_ARRAYS:
            arrays[name], off = take(payload, off, np.float64, shapes[name])
        blocks.append(
            Block(
                **arrays,
                head_dk=spec["head_dk"],
                head_v=list(spec["head_v"]),
                enabled=bool(spec["enabled"]),
            )
        )
    head_w, off = take(payload, off, np.float64, (d, header["num_classes"]))
    head_b, off = take(payload, off, np.float64, (header["num_classes"],))
    if off != len(payload):
        raise ValidationError(f"checkpoint payload has {len(payload) - off} trailing bytes")
    model = Model(
        patch_w=patch_w,
        patch_b=patch_b,
        class_token=class_token,
        pos_embed=pos_embed,
        blocks=blocks,
        head_w=head_w,
        head_b=head_b,
        seed=header.get("seed", 0),
        base_ffn_width=header.get("d_prime", 0),
        base_heads=header.get("heads", 0),
    )
    model.validate()
    return model
