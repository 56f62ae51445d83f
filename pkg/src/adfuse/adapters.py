"""Feature adapters over frozen embedding vectors.

Two designs: a single multi-head attention layer over the modality sequence
(image first, then scene-text / brand branches) with a residual back to the
raw image feature, and a residual-MLP baseline that adapts each branch with a
2-layer MLP and fuses the concatenation. Forward and backward passes are
written directly in numpy (float64) so gradients are exact and checkable
against finite differences; no autodiff framework is involved.

Conventions: a linear layer stores ``weight`` with shape (out, in) and applies
``x @ weight.T + bias``. The output normalization is plain L2 along the
feature axis, so every adapter output is unit-norm.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = b"ADCK"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")

# fixed modality order; image is always the residual/output position
MODALITY_ORDER = ("image", "scene_text", "brand")


class AdapterError(Exception):
    pass


class ShapeError(AdapterError):
    pass


class CheckpointError(AdapterError):
    pass


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


@dataclass
class AdapterInput:
    """One sample: the image feature plus the extra modality features."""

    image_feat: np.ndarray
    extra_feats: Sequence[np.ndarray] = field(default_factory=tuple)

    def stacked(self) -> np.ndarray:
        return np.stack([self.image_feat, *self.extra_feats], axis=0)


def stack_batch(batch: Sequence[AdapterInput], n_input: int, dim: int) -> np.ndarray:
    if not batch:
        raise ShapeError("empty batch")
    out = np.empty((len(batch), n_input, dim), dtype=np.float64)
    for i, sample in enumerate(batch):
        stacked = sample.stacked()
        if stacked.shape != (n_input, dim):
            raise ShapeError(f"sample {i}: expected {(n_input, dim)} inputs, got {stacked.shape}")
        out[i] = stacked
    return out


# ---------------------------------------------------------------------------
# attention adapter
# ---------------------------------------------------------------------------


@dataclass
class AttentionAdapterParams:
    dim: int
    heads: int
    n_input: int
    qkv_bias: bool
    pos: np.ndarray  # (n_input, d), zero-initialized
    wq: np.ndarray  # (d, d)
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray  # (d, d), zero-initialized so the fresh adapter is identity
    bo: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        names = {
            "pos": self.pos,
            "wq": self.wq,
            "wk": self.wk,
            "wv": self.wv,
            "wo": self.wo,
            "bo": self.bo,
        }
        if self.qkv_bias:
            names.update({"bq": self.bq, "bk": self.bk, "bv": self.bv})
        return names


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, m, d = x.shape
    return x.reshape(b, m, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, m, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, m, h * dh)


def attention_forward_cached(params: AttentionAdapterParams, x: np.ndarray):
    """Forward over a stacked batch (B, n_input, d); returns (Y, cache)."""
    b, m, d = x.shape
    if m != params.n_input or d != params.dim:
        raise ShapeError(f"expected batch of (*, {params.n_input}, {params.dim}), got {x.shape}")
    x = np.asarray(x, dtype=np.float64)
    s = x + params.pos
    q = s @ params.wq.T + params.bq
    k = s @ params.wk.T + params.bk
    v = s @ params.wv.T + params.bv
    qh, kh, vh = (_split_heads(t, params.heads) for t in (q, k, v))
    scale = 1.0 / np.sqrt(d // params.heads)
    logits = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=-1, keepdims=True)
    zh = attn @ vh
    z = _merge_heads(zh)
    o = z @ params.wo.T + params.bo
    u = o[:, 0, :] + x[:, 0, :]
    r = np.linalg.norm(u, axis=-1, keepdims=True)
    if not np.isfinite(u).all() or (r == 0).any():
        raise AdapterError("non-finite or zero-norm intermediate in attention forward")
    y = u / r
    cache = (x, s, qh, kh, vh, attn, z, u, r, y, scale)
    return y, cache


def attention_backward_cached(params: AttentionAdapterParams, cache, gy: np.ndarray):
    """Exact gradients for a cached forward; returns (grads, gx)."""
    x, s, qh, kh, vh, attn, z, u, r, y, scale = cache
    b, m, d = x.shape
    if gy.shape != (b, d):
        raise ShapeError(f"upstream gradient shape {gy.shape} != {(b, d)}")
    gy = np.asarray(gy, dtype=np.float64)
    # through y = u / ||u||
    gu = (gy - (gy * y).sum(axis=-1, keepdims=True) * y) / r
    go = np.zeros((b, m, d))
    go[:, 0, :] = gu
    gwo = go.reshape(-1, d).T @ z.reshape(-1, d)
    gbo = go.sum(axis=(0, 1))
    gz = go @ params.wo
    gzh = _split_heads(gz, params.heads)
    gattn = gzh @ vh.transpose(0, 1, 3, 2)
    gvh = attn.transpose(0, 1, 3, 2) @ gzh
    # softmax rows
    glogits = attn * (gattn - (gattn * attn).sum(axis=-1, keepdims=True))
    gqh = (glogits @ kh) * scale
    gkh = (glogits.transpose(0, 1, 3, 2) @ qh) * scale
    gq, gk, gv = (_merge_heads(t) for t in (gqh, gkh, gvh))
    flat_s = s.reshape(-1, d)
    grads = {
        "wq": gq.reshape(-1, d).T @ flat_s,
        "wk": gk.reshape(-1, d).T @ flat_s,
        "wv": gv.reshape(-1, d).T @ flat_s,
        "wo": gwo,
        "bo": gbo,
    }
    if params.qkv_bias:
        grads["bq"] = gq.sum(axis=(0, 1))
        grads["bk"] = gk.sum(axis=(0, 1))
        grads["bv"] = gv.sum(axis=(0, 1))
    gs = gq @ params.wq + gk @ params.wk + gv @ params.wv
    grads["pos"] = gs.sum(axis=0)
    gx = gs.copy()
    gx[:, 0, :] += gu
    return grads, gx


def attention_forward(params: AttentionAdapterParams, batch) -> np.ndarray:
    """Adapt a batch of inputs; rows of the result are unit vectors."""
    if not isinstance(batch, np.ndarray):
        batch = stack_batch(batch, params.n_input, params.dim)
    y, _ = attention_forward_cached(params, batch)
    return y


def attention_backward(params: AttentionAdapterParams, batch, upstream_grads: np.ndarray):
    """Gradients of sum(upstream * output) w.r.t. every parameter tensor."""
    if not isinstance(batch, np.ndarray):
        batch = stack_batch(batch, params.n_input, params.dim)
    _, cache = attention_forward_cached(params, batch)
    grads, _ = attention_backward_cached(params, cache, np.asarray(upstream_grads))
    return grads


# ---------------------------------------------------------------------------
# residual-MLP adapter
# ---------------------------------------------------------------------------


@dataclass
class ResidualMlp:
    """y = x + w2 @ relu(w1 @ x + b1) + b2, applied row-wise."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


def residual_mlp_forward(mlp: ResidualMlp, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    pre = x @ mlp.w1.T + mlp.b1
    hid = np.maximum(pre, 0.0)
    t = x + hid @ mlp.w2.T + mlp.b2
    return t, (x, pre, hid)


def residual_mlp_backward(mlp: ResidualMlp, cache, gt: np.ndarray, prefix: str):
    x, pre, hid = cache
    ghid = gt @ mlp.w2
    gpre = ghid * (pre > 0)
    grads = {
        f"{prefix}.w2": gt.reshape(-1, gt.shape[-1]).T @ hid.reshape(-1, hid.shape[-1]),
        f"{prefix}.b2": gt.sum(axis=0),
        f"{prefix}.w1": gpre.reshape(-1, gpre.shape[-1]).T @ x.reshape(-1, x.shape[-1]),
        f"{prefix}.b1": gpre.sum(axis=0),
    }
    gx = gt + gpre @ mlp.w1
    return grads, gx


def normalized_head_forward(mlp: ResidualMlp, x: np.ndarray):
    """n(x + g(x)): the text-side adaptation path."""
    t, cache = residual_mlp_forward(mlp, x)
    r = np.linalg.norm(t, axis=-1, keepdims=True)
    y = t / r
    return y, (cache, r, y)


def normalized_head_backward(mlp: ResidualMlp, cache, gy: np.ndarray, prefix: str):
    inner, r, y = cache
    gt = (gy - (gy * y).sum(axis=-1, keepdims=True) * y) / r
    return residual_mlp_backward(mlp, inner, gt, prefix)


@dataclass
class MlpAdapterParams:
    dim: int
    n_concat: int  # number of d-wide blocks entering the fusion MLP
    g_img: ResidualMlp
    g_txt: ResidualMlp
    fuse_w1: np.ndarray  # (hidden, n_concat * d)
    fuse_b1: np.ndarray
    fuse_w2: np.ndarray  # (d, hidden)
    fuse_b2: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.g_img.tensors("g_img"))
        out.update(self.g_txt.tensors("g_txt"))
        out.update(
            {
                "fuse.w1": self.fuse_w1,
                "fuse.b1": self.fuse_b1,
                "fuse.w2": self.fuse_w2,
                "fuse.b2": self.fuse_b2,
            }
        )
        return out


def mlp_forward_cached(
    params: MlpAdapterParams,
    image_feat: np.ndarray,
    scene_text_feat: np.ndarray | None,
    extra_feats: Sequence[np.ndarray] = (),
):
    img = np.atleast_2d(np.asarray(image_feat, dtype=np.float64))
    blocks = []
    caches = []
    yi, ci = normalized_head_forward(params.g_img, img)
    blocks.append(yi)
    caches.append(ci)
    if scene_text_feat is not None:
        st = np.atleast_2d(np.asarray(scene_text_feat, dtype=np.float64))
        yt, ct = normalized_head_forward(params.g_txt, st)
        blocks.append(yt)
        caches.append(ct)
    extras = [np.atleast_2d(np.asarray(e, dtype=np.float64)) for e in extra_feats]
    blocks.extend(extras)
    if len(blocks) != params.n_concat:
        raise ShapeError(f"{len(blocks)} concat blocks for adapter expecting {params.n_concat}")
    c = np.concatenate(blocks, axis=-1)
    if c.shape[-1] != params.n_concat * params.dim:
        raise ShapeError(f"concat width {c.shape[-1]} != {params.n_concat * params.dim}")
    pre = c @ params.fuse_w1.T + params.fuse_b1
    hid = np.maximum(pre, 0.0)
    u = hid @ params.fuse_w2.T + params.fuse_b2
    r = np.linalg.norm(u, axis=-1, keepdims=True)
    if (r == 0).any() or not np.isfinite(u).all():
        raise AdapterError("non-finite or zero-norm intermediate in fusion forward")
    y = u / r
    cache = (caches, scene_text_feat is not None, len(extras), c, pre, hid, u, r, y)
    return y, cache


def mlp_backward_cached(params: MlpAdapterParams, cache, gy: np.ndarray):
    caches, has_txt, n_extras, c, pre, hid, u, r, y = cache
    gy = np.atleast_2d(np.asarray(gy, dtype=np.float64))
    gu = (gy - (gy * y).sum(axis=-1, keepdims=True) * y) / r
    ghid = gu @ params.fuse_w2
    gpre = ghid * (pre > 0)
    grads = {
        "fuse.w2": gu.T @ hid,
        "fuse.b2": gu.sum(axis=0),
        "fuse.w1": gpre.T @ c,
        "fuse.b1": gpre.sum(axis=0),
    }
    gc = gpre @ params.fuse_w1
    d = params.dim
    g_img_out = gc[:, :d]
    gi, _ = normalized_head_backward(params.g_img, caches[0], g_img_out, "g_img")
    grads.update(gi)
    if has_txt:
        g_txt_out = gc[:, d : 2 * d]
        gt, _ = normalized_head_backward(params.g_txt, caches[1], g_txt_out, "g_txt")
        grads.update(gt)
    else:
        grads.update({k: np.zeros_like(v) for k, v in params.g_txt.tensors("g_txt").items()})
    return grads


def mlp_forward(
    params: MlpAdapterParams,
    image_feat: np.ndarray,
    scene_text_feat: np.ndarray | None = None,
    extra_feats: Sequence[np.ndarray] = (),
) -> np.ndarray:
    single = np.asarray(image_feat).ndim == 1
    y, _ = mlp_forward_cached(params, image_feat, scene_text_feat, extra_feats)
    return y[0] if single else y


def mlp_label_forward(params: MlpAdapterParams, label_text_feat: np.ndarray) -> np.ndarray:
    """Adapt a label-text feature with the shared text branch: n(x + g_txt(x))."""
    single = np.asarray(label_text_feat).ndim == 1
    x = np.atleast_2d(np.asarray(label_text_feat, dtype=np.float64))
    y, _ = normalized_head_forward(params.g_txt, x)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# initialization & checkpoints
# ---------------------------------------------------------------------------


def init_params(
    kind: str,
    dim: int,
    heads: int = 8,
    n_input: int = 3,
    seed: int = 0,
    qkv_bias: bool = True,
    hidden: int | None = None,
):
    """Deterministic parameter construction.

    The attention adapter starts exactly at the identity on the image feature:
    positional embeddings and the output projection are zero-initialized, so an
    untrained adapter reproduces zero-shot retrieval scores.
    """
    if dim < 1 or n_input < 1:
        raise ShapeError(f"invalid dims dim={dim} n_input={n_input}")
    rng = np.random.default_rng(seed)
    if kind == "attention":
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        return AttentionAdapterParams(
            dim=dim,
            heads=heads,
            n_input=n_input,
            qkv_bias=qkv_bias,
            pos=np.zeros((n_input, dim)),
            wq=_xavier(rng, dim, dim),
            bq=np.zeros(dim),
            wk=_xavier(rng, dim, dim),
            bk=np.zeros(dim),
            wv=_xavier(rng, dim, dim),
            bv=np.zeros(dim),
            wo=np.zeros((dim, dim)),
            bo=np.zeros(dim),
        )
    if kind == "mlp":
        hid = hidden or dim
        def branch():
            # second layer zeroed: each branch starts as the identity map
            return ResidualMlp(
                w1=_xavier(rng, hid, dim),
                b1=np.zeros(hid),
                w2=np.zeros((dim, hid)),
                b2=np.zeros(dim),
            )
        return MlpAdapterParams(
            dim=dim,
            n_concat=n_input,
            g_img=branch(),
            g_txt=branch(),
            fuse_w1=_xavier(rng, hid, n_input * dim),
            fuse_b1=np.zeros(hid),
            fuse_w2=_xavier(rng, dim, hid),
            fuse_b2=np.zeros(dim),
        )
    raise AdapterError(f"unknown adapter kind {kind!r}")


def init_text_head(dim: int, seed: int = 0, hidden: int | None = None) -> ResidualMlp:
    """Learnable label-text head, initialized to the (normalized) identity."""
    rng = np.random.default_rng(seed)
    hid = hidden or dim
    return ResidualMlp(
        w1=_xavier(rng, hid, dim),
        b1=np.zeros(hid),
        w2=np.zeros((dim, hid)),
        b2=np.zeros(dim),
    )


def save_checkpoint(path: Path | str, params, config: dict, extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Versioned binary checkpoint: JSON header + float32 tensors, deterministic."""
    tensors = dict(params.tensors())
    if extra_tensors:
        tensors.update(extra_tensors)
    names = sorted(tensors)
    meta = {
        "kind": "attention" if isinstance(params, AttentionAdapterParams) else "mlp",
        "dim": params.dim,
        "heads": getattr(params, "heads", None),
        "n_input": getattr(params, "n_input", getattr(params, "n_concat", None)),
        "qkv_bias": getattr(params, "qkv_bias", None),
        "config": config,
        "tensors": [[n, list(tensors[n].shape)] for n in names],
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())


def load_checkpoint(path: Path | str):
    """Returns (params, config, extra_tensors)."""
    with open(path, "rb") as fh:
        head = fh.read(_CKPT_HEADER.size)
        if len(head) < _CKPT_HEADER.size:
            raise CheckpointError(f"{path}: truncated checkpoint")
        magic, version, hlen = _CKPT_HEADER.unpack(head)
        if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: bad checkpoint magic/version")
        meta = json.loads(fh.read(hlen).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        for name, shape in meta["tensors"]:
            n_elem = int(np.prod(shape)) if shape else 1
            buf = fh.read(n_elem * 4)
            if len(buf) != n_elem * 4:
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
    dim = meta["dim"]
    if meta["kind"] == "attention":
        params = AttentionAdapterParams(
            dim=dim,
            heads=meta["heads"],
            n_input=meta["n_input"],
            qkv_bias=bool(meta["qkv_bias"]),
            pos=tensors.pop("pos"),
            wq=tensors.pop("wq"),
            bq=tensors.pop("bq", np.zeros(dim)),
            wk=tensors.pop("wk"),
            bk=tensors.pop("bk", np.zeros(dim)),
            wv=tensors.pop("wv"),
            bv=tensors.pop("bv", np.zeros(dim)),
            wo=tensors.pop("wo"),
            bo=tensors.pop("bo"),
        )
    elif meta["kind"] == "mlp":
        def branch(prefix: str) -> ResidualMlp:
            return ResidualMlp(
                w1=tensors.pop(f"{prefix}.w1"),
                b1=tensors.pop(f"{prefix}.b1"),
                w2=tensors.pop(f"{prefix}.w2"),
                b2=tensors.pop(f"{prefix}.b2"),
            )
        params = MlpAdapterParams(
            dim=dim,
            n_concat=meta["n_input"],
            g_img=branch("g_img"),
            g_txt=branch("g_txt"),
            fuse_w1=tensors.pop("fuse.w1"),
            fuse_b1=tensors.pop("fuse.b1"),
            fuse_w2=tensors.pop("fuse.w2"),
            fuse_b2=tensors.pop("fuse.b2"),
        )
    else:
        raise CheckpointError(f"{path}: unknown adapter kind {meta['kind']!r}")
    return params, meta["config"], tensors
