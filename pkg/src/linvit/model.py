"""Small pre-norm ViT encoder with pluggable attention.

Blocks are x + Attn(LN(x)) followed by x + MLP(LN(x)), GELU in the MLP, no
biases anywhere, learned positional embeddings, optional CLS token.  The
forward pass exposes three modes:

* "logits": classification logits from the CLS token (or mean-pooled patch
  tokens when CLS is disabled) through the linear head.
* "features": final-norm token features [B, N, D], the alignment target for
  stage 2.
* "tap_attention_io": features plus, per block i, the post-ln1 input X_i and
  the attention output O_i (after W_O) — the stage-1 alignment signals.

`linearize` clones a softmax teacher into a student whose attention variant
is swapped while every weight is copied bit-for-bit.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import AttentionParams, AttentionSpec, attend, init_attention_params, init_extras
from .tensor import ContractError, ShapeError, Tensor

INIT_STD = 0.02


@dataclass
class ViTConfig:
    image_size: int
    patch_size: int
    depth: int
    d_model: int
    heads: int
    num_classes: int
    attention: AttentionSpec
    mlp_ratio: float = 4.0
    use_cls_token: bool = True

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ContractError(f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        if int(round(self.mlp_ratio * self.d_model)) < 1:
            raise ContractError(f"mlp_ratio {self.mlp_ratio} gives an empty hidden layer")
        if self.depth < 1:
            raise ContractError(f"depth must be >= 1, got {self.depth}")
        if self.attention.d_model != self.d_model or self.attention.heads != self.heads:
            raise ContractError(
                f"attention spec ({self.attention.d_model}, {self.attention.heads} heads) does not match "
                f"model ({self.d_model}, {self.heads} heads)")
        if self.num_classes < 0:
            raise ContractError(f"num_classes must be >= 0, got {self.num_classes}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def tokens(self) -> int:
        return self.n_patches + (1 if self.use_cls_token else 0)


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: AttentionParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_w2: Tensor


@dataclass
class ViTModel:
    config: ViTConfig
    patch_proj: Tensor  # [3*P*P, D]
    pos_emb: Tensor  # [1, N, D]
    cls_emb: Tensor | None  # [1, 1, D]
    blocks: list[BlockParams]
    final_gamma: Tensor
    final_beta: Tensor
    head: Tensor | None = None  # [D, C]

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "patch_proj", self.patch_proj
        yield "pos_emb", self.pos_emb
        if self.cls_emb is not None:
            yield "cls_emb", self.cls_emb
        for i, b in enumerate(self.blocks):
            yield f"blocks.{i}.ln1_gamma", b.ln1_gamma
            yield f"blocks.{i}.ln1_beta", b.ln1_beta
            for name, t in b.attn.named():
                yield f"blocks.{i}.attn.{name}", t
            yield f"blocks.{i}.ln2_gamma", b.ln2_gamma
            yield f"blocks.{i}.ln2_beta", b.ln2_beta
            yield f"blocks.{i}.mlp_w1", b.mlp_w1
            yield f"blocks.{i}.mlp_w2", b.mlp_w2
        yield "final_gamma", self.final_gamma
        yield "final_beta", self.final_beta
        if self.head is not None:
            yield "head", self.head

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]


def init_model(config: ViTConfig, seed: int) -> ViTModel:
    rng = T.Rng(seed)
    d = config.d_model
    patch_dim = 3 * config.patch_size * config.patch_size
    model = ViTModel(
        config=config,
        patch_proj=T.param(rng.normal((patch_dim, d), std=INIT_STD)),
        pos_emb=T.param(rng.normal((1, config.tokens, d), std=INIT_STD)),
        cls_emb=T.param(rng.normal((1, 1, d), std=INIT_STD)) if config.use_cls_token else None,
        blocks=[],
        final_gamma=T.param(np.ones(d)),
        final_beta=T.param(np.zeros(d)),
    )
    hidden = int(round(config.mlp_ratio * d))
    for _ in range(config.depth):
        model.blocks.append(BlockParams(
            ln1_gamma=T.param(np.ones(d)),
            ln1_beta=T.param(np.zeros(d)),
            attn=init_attention_params(config.attention, rng, INIT_STD),
            ln2_gamma=T.param(np.ones(d)),
            ln2_beta=T.param(np.zeros(d)),
            mlp_w1=T.param(rng.normal((d, hidden), std=INIT_STD)),
            mlp_w2=T.param(rng.normal((hidden, d), std=INIT_STD)),
        ))
    if config.num_classes > 0:
        model.head = T.param(rng.normal((d, config.num_classes), std=INIT_STD))
    return model


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, 3, S, S] -> [B, n_patches, 3*P*P]; patches row-major, channel-major within a patch."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected images [B, 3, S, S], got {images.shape}")
    b, _, s, s2 = images.shape
    if s != s2 or s % patch_size != 0:
        raise ShapeError(f"image size {s}x{s2} incompatible with patch size {patch_size}")
    g = s // patch_size
    x = images.reshape(b, 3, g, patch_size, g, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # [B, gy, gx, C, py, px]
    return np.ascontiguousarray(x.reshape(b, g * g, 3 * patch_size * patch_size))


def embed(model: ViTModel, images: np.ndarray) -> Tensor:
    """Patchify, project, prepend CLS, add positional embeddings -> Tensor[B, N, D]."""
    cfg = model.config
    if images.shape[-1] != cfg.image_size:
        raise ShapeError(f"image size {images.shape[-1]} does not match config {cfg.image_size}")
    b = images.shape[0]
    patches = T.leaf(patchify(images.astype(T.default_dtype().type, copy=False), cfg.patch_size))
    tok = T.matmul(patches, model.patch_proj)
    if model.cls_emb is not None:
        tok = T.concat_rows([T.expand_batch(model.cls_emb, b), tok])
    return T.add(tok, T.expand_batch(model.pos_emb, b))


def patchify_embed(image, model: ViTModel) -> Tensor:
    """Single-image front-end: [3, S, S] -> Tensor[N, D]."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3:
        raise ShapeError(f"expected one image [3, S, S], got {arr.shape}")
    return T.reshape(embed(model, arr[None]), (model.config.tokens, model.config.d_model))


def forward(model: ViTModel, batch, mode: str = "features"):
    """Run the encoder; see module docstring for the three modes."""
    if mode not in ("logits", "features", "tap_attention_io"):
        raise ContractError(f"unknown forward mode {mode!r}")
    images = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    cfg = model.config
    x = embed(model, images)
    taps: list[tuple[Tensor, Tensor]] = []
    for blk in model.blocks:
        x1 = T.layernorm(x, blk.ln1_gamma, blk.ln1_beta)
        att = attend(x1, blk.attn, cfg.attention)
        if mode == "tap_attention_io":
            taps.append((x1, att))
        x = T.add(x, att)
        x2 = T.layernorm(x, blk.ln2_gamma, blk.ln2_beta)
        x = T.add(x, T.matmul(T.gelu(T.matmul(x2, blk.mlp_w1)), blk.mlp_w2))
    feats = T.layernorm(x, model.final_gamma, model.final_beta)
    if mode == "features":
        return feats
    if mode == "tap_attention_io":
        return feats, taps
    return logits_from_features(model, feats)


def logits_from_features(model: ViTModel, feats: Tensor) -> Tensor:
    if model.head is None:
        raise ContractError("logits mode requires a classification head; this model has none")
    cfg = model.config
    if cfg.use_cls_token:
        pooled = T.slice_rows(feats, 0, 1)
    else:
        n = cfg.tokens
        ones = T.leaf(np.full((1, n), 1.0 / n, dtype=feats.data.dtype))
        pooled = T.matmul(ones, feats)
    b = feats.shape[0]
    return T.matmul(T.reshape(pooled, (b, cfg.d_model)), model.head)


def linearize(teacher: ViTModel, target: AttentionSpec) -> ViTModel:
    """Clone the teacher, swapping every block's attention for the target variant.

    W_Q/W_K/W_V/W_O (and everything else) are copied bit-for-bit; variant
    extras are freshly initialized from target.seed.
    """
    if teacher.config.attention.variant != "softmax":
        raise ContractError(f"linearize expects a softmax teacher, got {teacher.config.attention.variant!r}")
    if target.variant == "softmax":
        raise ContractError("linearize target must be a linear variant, not softmax")
    if target.d_model != teacher.config.d_model or target.heads != teacher.config.heads:
        raise ContractError(
            f"target spec ({target.d_model}, {target.heads} heads) does not match teacher "
            f"({teacher.config.d_model}, {teacher.config.heads} heads)")
    if target.variant == "linformer" and target.seq_len_fixed != teacher.config.tokens:
        raise ContractError(
            f"linformer seq_len_fixed {target.seq_len_fixed} must equal the model's {teacher.config.tokens} tokens")

    def clone(t: Tensor | None, requires_grad: bool = True) -> Tensor | None:
        return None if t is None else Tensor(t.data.copy(), requires_grad=requires_grad)

    cfg = replace(teacher.config, attention=target)
    student = ViTModel(
        config=cfg,
        patch_proj=clone(teacher.patch_proj),
        pos_emb=clone(teacher.pos_emb),
        cls_emb=clone(teacher.cls_emb),
        blocks=[],
        final_gamma=clone(teacher.final_gamma),
        final_beta=clone(teacher.final_beta),
        head=clone(teacher.head),
    )
    for blk in teacher.blocks:
        student.blocks.append(BlockParams(
            ln1_gamma=clone(blk.ln1_gamma),
            ln1_beta=clone(blk.ln1_beta),
            attn=AttentionParams(
                w_q=clone(blk.attn.w_q),
                w_k=clone(blk.attn.w_k),
                w_v=clone(blk.attn.w_v),
                w_o=clone(blk.attn.w_o),
                extras=init_extras(target),
            ),
            ln2_gamma=clone(blk.ln2_gamma),
            ln2_beta=clone(blk.ln2_beta),
            mlp_w1=clone(blk.mlp_w1),
            mlp_w2=clone(blk.mlp_w2),
        ))
    return student


def clone_model(model: ViTModel) -> ViTModel:
    """Deep copy with fresh tensors (used to snapshot best weights)."""
    out = copy.copy(model)
    out.blocks = []

    def c(t: Tensor | None) -> Tensor | None:
        return None if t is None else Tensor(t.data.copy(), requires_grad=t.requires_grad)
    out.patch_proj = c(model.patch_proj)
    out.pos_emb = c(model.pos_emb)
    out.cls_emb = c(model.cls_emb)
    out.final_gamma = c(model.final_gamma)
    out.final_beta = c(model.final_beta)
    out.head = c(model.head)
    for blk in model.blocks:
        extras = {}
        for key, val in blk.attn.extras.items():
            extras[key] = [c(t) for t in val] if isinstance(val, list) else c(val)
        out.blocks.append(BlockParams(
            ln1_gamma=c(blk.ln1_gamma), ln1_beta=c(blk.ln1_beta),
            attn=AttentionParams(c(blk.attn.w_q), c(blk.attn.w_k), c(blk.attn.w_v), c(blk.attn.w_o), extras),
            ln2_gamma=c(blk.ln2_gamma), ln2_beta=c(blk.ln2_beta),
            mlp_w1=c(blk.mlp_w1), mlp_w2=c(blk.mlp_w2),
        ))
    return out
