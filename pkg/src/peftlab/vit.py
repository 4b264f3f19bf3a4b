"""Toy Vision Transformer with every weight matrix exposed as a named slot.

Pre-norm encoder wiring: x' = MHA(LN(x)) + x, out = FFN(LN(x')) + x'.
Classification reads the class token through a final LayerNorm and a linear
head.  The forward pass routes every linear map and LayerNorm output through
a hook object so fine-tuning methods can wrap individual slots without
touching the backbone code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, dropout, gelu, layer_norm, matmul, softmax_rows

__all__ = [
    "ViTConfig",
    "WeightSlot",
    "ParamMatrix",
    "ViTModel",
    "ForwardHooks",
    "init_model",
    "patch_embed",
    "attention_head",
    "mha",
    "ffn",
    "encoder_layer",
    "forward",
]

MATRIX_KINDS = ("q", "k", "v", "o", "fc1", "fc2")
LN_KINDS = ("ln1", "ln2")
GLOBAL_KINDS = ("patch_proj", "pos_embed", "cls_token", "final_ln", "head")
GLOBAL_LAYER = -1


class ConfigError(ValueError):
    """Raised when a model configuration or input does not fit together."""


@dataclass(frozen=True)
class ViTConfig:
    image_h: int = 16
    image_w: int = 16
    channels: int = 1
    patch: int = 4
    dim: int = 16
    layers: int = 2
    heads: int = 2
    classes: int = 4

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"patch {self.patch} must divide image {self.image_h}x{self.image_w}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide dim {self.dim}")
        if min(self.image_h, self.image_w, self.channels, self.patch, self.dim,
               self.layers, self.heads, self.classes) < 1:
            raise ConfigError("all config extents must be positive")

    @property
    def tokens(self) -> int:
        return (self.image_h * self.image_w) // (self.patch * self.patch)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return 4 * self.dim

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass(frozen=True)
class WeightSlot:
    """Address of one ParamMatrix: (layer, kind); layer is -1 for global slots."""

    layer: int
    kind: str

    @property
    def key(self) -> str:
        if self.layer == GLOBAL_LAYER:
            return self.kind
        return f"l{self.layer:02d}.{self.kind}"

    @staticmethod
    def parse(key: str) -> "WeightSlot":
        if "." in key:
            prefix, kind = key.split(".", 1)
            if not prefix.startswith("l"):
                raise ConfigError(f"bad slot key {key!r}")
            return WeightSlot(int(prefix[1:]), kind)
        return WeightSlot(GLOBAL_LAYER, key)


class ParamMatrix:
    """Weight matrix plus bias bound to one slot; freezable as a unit.

    For LayerNorm slots `w` holds gamma and `b` holds beta.
    """

    def __init__(self, slot: WeightSlot, w: Tensor, b: Tensor | None):
        self.slot = slot
        self.w = w
        self.b = b

    @property
    def frozen(self) -> bool:
        return not self.w.requires_grad

    def freeze(self):
        self.w.requires_grad = False
        if self.b is not None:
            self.b.requires_grad = False

    def unfreeze(self):
        self.w.requires_grad = True
        if self.b is not None:
            self.b.requires_grad = True

    def tensors(self) -> dict[str, Tensor]:
        out = {f"{self.slot.key}.w": self.w}
        if self.b is not None:
            out[f"{self.slot.key}.b"] = self.b
        return out


class ViTModel:
    def __init__(self, config: ViTConfig, slots: dict[str, ParamMatrix], dtype=np.float32):
        self.config = config
        self.slots = slots
        self.dtype = dtype

    def slot(self, key: str) -> ParamMatrix:
        try:
            return self.slots[key]
        except KeyError:
            raise ConfigError(f"unknown weight slot {key!r}") from None

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for pm in self.slots.values():
            out.update(pm.tensors())
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    def freeze_all(self):
        for pm in self.slots.values():
            pm.freeze()

    def unfreeze_all(self):
        for pm in self.slots.values():
            pm.unfreeze()

    def astype(self, dtype) -> "ViTModel":
        slots = {}
        for key, pm in self.slots.items():
            w = pm.w.astype(dtype)
            b = pm.b.astype(dtype) if pm.b is not None else None
            slots[key] = ParamMatrix(pm.slot, w, b)
        return ViTModel(self.config, slots, dtype=dtype)

    def copy(self) -> "ViTModel":
        slots = {}
        for key, pm in self.slots.items():
            w = Tensor(pm.w.data.copy(), requires_grad=pm.w.requires_grad)
            b = (
                Tensor(pm.b.data.copy(), requires_grad=pm.b.requires_grad)
                if pm.b is not None
                else None
            )
            slots[key] = ParamMatrix(pm.slot, w, b)
        return ViTModel(self.config, slots, dtype=self.dtype)


def init_model(
    config: ViTConfig, seed: int = 0, dtype=np.float32, scale: float = 0.02
) -> ViTModel:
    """Seeded random backbone; head weights start at zero."""
    rng = np.random.default_rng(seed)

    def mat(rows, cols):
        return Tensor(rng.normal(0.0, scale, (rows, cols)).astype(dtype), requires_grad=True)

    def vec(n, fill=0.0):
        return Tensor(np.full(n, fill, dtype=dtype), requires_grad=True)

    D, Dh, C = config.dim, config.hidden, config.classes
    slots: dict[str, ParamMatrix] = {}

    def add(layer, kind, w, b):
        slot = WeightSlot(layer, kind)
        slots[slot.key] = ParamMatrix(slot, w, b)

    add(GLOBAL_LAYER, "patch_proj", mat(config.patch_dim, D), vec(D))
    add(GLOBAL_LAYER, "cls_token", mat(1, D), None)
    add(GLOBAL_LAYER, "pos_embed", mat(config.tokens + 1, D), None)
    for l in range(config.layers):
        add(l, "ln1", vec(D, 1.0), vec(D))
        add(l, "q", mat(D, D), vec(D))
        add(l, "k", mat(D, D), vec(D))
        add(l, "v", mat(D, D), vec(D))
        add(l, "o", mat(D, D), vec(D))
        add(l, "ln2", vec(D, 1.0), vec(D))
        add(l, "fc1", mat(D, Dh), vec(Dh))
        add(l, "fc2", mat(Dh, D), vec(D))
    add(GLOBAL_LAYER, "final_ln", vec(D, 1.0), vec(D))
    add(GLOBAL_LAYER, "head", Tensor(np.zeros((D, C), dtype=dtype), requires_grad=True), vec(C))
    return ViTModel(config, slots, dtype=dtype)


class ForwardHooks:
    """Plain backbone behaviour; fine-tuning methods override pieces."""

    def linear(self, key: str, x: Tensor, pm: ParamMatrix) -> Tensor:
        y = matmul(x, pm.w)
        if pm.b is not None:
            y = y + pm.b
        return y

    def layer_norm(self, key: str, x: Tensor, pm: ParamMatrix, eps: float = 1e-6) -> Tensor:
        return layer_norm(x, pm.w, pm.b, eps=eps)

    def after_mha(self, layer: int, y: Tensor) -> Tensor:
        return y

    def after_ffn(self, layer: int, y: Tensor) -> Tensor:
        return y

    def enter_layer(self, layer: int, x: Tensor) -> Tensor:
        return x

    def exit_layer(self, layer: int, x: Tensor) -> Tensor:
        return x


_PLAIN = ForwardHooks()


def extract_patches(image: np.ndarray, config: ViTConfig) -> np.ndarray:
    """Flatten the patch grid row-major; each patch row-major over (row, col, channel)."""
    H, W, C, P = config.image_h, config.image_w, config.channels, config.patch
    image = np.asarray(image)
    if image.shape != (H, W, C):
        raise ConfigError(f"image shape {image.shape} does not match config ({H},{W},{C})")
    gh, gw = H // P, W // P
    patches = image.reshape(gh, P, gw, P, C).transpose(0, 2, 1, 3, 4)
    return patches.reshape(config.tokens, config.patch_dim)


def patch_embed(image: np.ndarray, model: ViTModel, hooks: ForwardHooks = _PLAIN) -> Tensor:
    """Project patches, prepend the class token, add position embeddings."""
    config = model.config
    patches = Tensor(extract_patches(image, config).astype(model.dtype))
    projected = hooks.linear("patch_proj", patches, model.slot("patch_proj"))
    tokens = Tensor.concat_rows([model.slot("cls_token").w, projected])
    return tokens + model.slot("pos_embed").w


def attention_head(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Scaled dot-product attention for one head; projections are D x D_h."""
    q = matmul(x, wq)
    k = matmul(x, wk)
    v = matmul(x, wv)
    scale = 1.0 / math.sqrt(wq.shape[1])
    logits = matmul(q, k.T) * scale
    return matmul(softmax_rows(logits), v)


def mha(x: Tensor, model: ViTModel, layer: int, hooks: ForwardHooks = _PLAIN) -> Tensor:
    """Multi-head attention over fused q/k/v/o projections.

    Per-head projections are column blocks of the fused D x D matrices, so
    slot-level wrappers apply to a whole logical matrix at once.
    """
    config = model.config
    Dh = config.head_dim
    q = hooks.linear(f"l{layer:02d}.q", x, model.slot(f"l{layer:02d}.q"))
    k = hooks.linear(f"l{layer:02d}.k", x, model.slot(f"l{layer:02d}.k"))
    v = hooks.linear(f"l{layer:02d}.v", x, model.slot(f"l{layer:02d}.v"))
    scale = 1.0 / math.sqrt(Dh)
    heads = []
    for h in range(config.heads):
        qh = q.slice_cols(h * Dh, (h + 1) * Dh)
        kh = k.slice_cols(h * Dh, (h + 1) * Dh)
        vh = v.slice_cols(h * Dh, (h + 1) * Dh)
        logits = matmul(qh, kh.T) * scale
        heads.append(matmul(softmax_rows(logits), vh))
    concat = Tensor.concat_cols(heads)
    return hooks.linear(f"l{layer:02d}.o", concat, model.slot(f"l{layer:02d}.o"))


def ffn(
    x: Tensor,
    model: ViTModel,
    layer: int,
    hooks: ForwardHooks = _PLAIN,
    drop_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    h = gelu(hooks.linear(f"l{layer:02d}.fc1", x, model.slot(f"l{layer:02d}.fc1")))
    if drop_rate > 0.0 and rng is not None:
        h = dropout(h, drop_rate, rng)
    return hooks.linear(f"l{layer:02d}.fc2", h, model.slot(f"l{layer:02d}.fc2"))


def encoder_layer(
    x: Tensor,
    model: ViTModel,
    layer: int,
    hooks: ForwardHooks = _PLAIN,
    drop_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    x = hooks.enter_layer(layer, x)
    normed = hooks.layer_norm(f"l{layer:02d}.ln1", x, model.slot(f"l{layer:02d}.ln1"))
    attn = mha(normed, model, layer, hooks)
    attn = hooks.after_mha(layer, attn)
    if drop_rate > 0.0 and rng is not None:
        attn = dropout(attn, drop_rate, rng)
    x = attn + x
    normed = hooks.layer_norm(f"l{layer:02d}.ln2", x, model.slot(f"l{layer:02d}.ln2"))
    out = ffn(normed, model, layer, hooks, drop_rate=drop_rate, rng=rng)
    out = hooks.after_ffn(layer, out)
    x = out + x
    return hooks.exit_layer(layer, x)


def forward(
    image: np.ndarray,
    model: ViTModel,
    hooks: ForwardHooks = _PLAIN,
    drop_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Full forward pass: logits of shape (classes,)."""
    x = patch_embed(image, model, hooks)
    for l in range(model.config.layers):
        x = encoder_layer(x, model, l, hooks, drop_rate=drop_rate, rng=rng)
    cls = x.slice_rows(0, 1)
    cls = hooks.layer_norm("final_ln", cls, model.slot("final_ln"))
    logits = hooks.linear("head", cls, model.slot("head"))
    return logits.reshape(model.config.classes)
