"""A small vision transformer: patch embedding, pre-norm encoder, linear head.

Images are ``(batch, channels, H, W)`` arrays with pixels in [0, 1]. A patch
is flattened channel-major, then row-major inside each channel, so pixel
``(c, i, j)`` of a patch sits at index ``c*p*p + i*p + j``. Patches are
ordered row-major over the patch grid. Nullspace vectors of the patch
embedding are expressed in this order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    value_dim: int | None = None
    ln_eps: float = 1e-6
    gelu_approximate: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise UsageError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise UsageError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.value_dim is not None and self.value_dim <= 0:
            raise UsageError("value_dim must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def d_v(self) -> int:
        return self.value_dim or self.head_dim

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_hidden(self) -> int:
        return self.embed_dim * self.mlp_ratio

    @property
    def has_patch_nullspace(self) -> bool:
        return self.patch_dim > self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def parameter_shapes(config: ModelConfig) -> dict:
    d, h, dk, dv = config.embed_dim, config.heads, config.head_dim, config.d_v
    shapes = {
        "patch.weight": (config.patch_dim, d),
        "patch.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (config.n_patches + 1, d),
    }
    for layer in range(config.depth):
        pre = f"blocks.{layer}."
        shapes.update({
            pre + "ln1.gain": (d,),
            pre + "ln1.bias": (d,),
            pre + "attn.q": (h, d, dk),
            pre + "attn.k": (h, d, dk),
            pre + "attn.v": (h, d, dv),
            pre + "attn.proj.weight": (h * dv, d),
            pre + "attn.proj.bias": (d,),
            pre + "ln2.gain": (d,),
            pre + "ln2.bias": (d,),
            pre + "mlp.fc1.weight": (d, config.mlp_hidden),
            pre + "mlp.fc1.bias": (config.mlp_hidden,),
            pre + "mlp.fc2.weight": (config.mlp_hidden, d),
            pre + "mlp.fc2.bias": (d,),
        })
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def _xavier(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ViTParams:
    """All weights of the model, keyed by dotted names, plus its config."""

    def __init__(self, config: ModelConfig, arrays: dict):
        expected = parameter_shapes(config)
        missing = expected.keys() - arrays.keys()
        if missing:
            raise ShapeError(f"missing parameters: {sorted(missing)}")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise ShapeError(f"{name} has shape {arrays[name].shape}, expected {shape}")
        self.config = config
        self.arrays = {name: np.asarray(arrays[name]) for name in expected}

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> "ViTParams":
        d, h = config.embed_dim, config.heads
        arrays = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gain"):
                arr = np.ones(shape)
            elif name.endswith("bias"):
                arr = np.zeros(shape)
            elif name in ("cls_token", "pos_embed"):
                arr = 0.02 * rng.standard_normal(shape)
            elif name.endswith(("attn.q", "attn.k", "attn.v")):
                arr = _xavier(rng, shape, d, h * shape[-1])
            else:
                arr = _xavier(rng, shape, shape[0], shape[1])
            arrays[name] = arr.astype(dtype)
        return cls(config, arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def dtype(self):
        return self.arrays["patch.weight"].dtype

    def copy(self) -> "ViTParams":
        return ViTParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "ViTParams":
        return ViTParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def bind(self, requires_grad: bool = True) -> "BoundParams":
        """Wrap every array in a leaf tensor (sharing memory) for differentiation."""
        return BoundParams(self.config, {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()})

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def heads(self, layer: int):
        """Per-head (Q_i, K_i, V_i) matrices of one encoder layer."""
        pre = f"blocks.{layer}.attn."
        return [(self[pre + "q"][i], self[pre + "k"][i], self[pre + "v"][i]) for i in range(self.config.heads)]


@dataclass
class BoundParams:
    config: ModelConfig
    tensors: dict

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def grads(self) -> dict:
        return {k: t.grad for k, t in self.tensors.items()}


def _as_batch(images, config: ModelConfig, dtype) -> tuple[Tensor, bool]:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=dtype))
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    expected = (config.channels, config.image_size, config.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"expected images of shape (batch, {expected}), got {images.shape}")
    return x, single


def patchify(images: Tensor, config: ModelConfig) -> Tensor:
    """``(B, c, H, W)`` -> ``(B, n_patches, p*p*c)`` in the documented flatten order."""
    b = images.shape[0]
    c, g, p = config.channels, config.grid, config.patch_size
    x = images.reshape(b, c, g, p, g, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * p * p)


def unpatchify(patches: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Inverse of :func:`patchify` on plain arrays; accepts a leading batch axis or not."""
    patches = np.asarray(patches)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b = patches.shape[0]
    c, g, p = config.channels, config.grid, config.patch_size
    x = patches.reshape(b, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    x = x.reshape(b, c, g * p, g * p)
    return x[0] if single else x


def patch_embed(params, images) -> Tensor:
    """Map each patch ``u`` to ``u @ W_e + b``; returns ``(B, n, d)`` (or ``(n, d)`` for one image)."""
    config = params.config
    x, single = _as_batch(images, config, _dtype_of(params))
    tokens = patchify(x, config) @ _t(params["patch.weight"]) + _t(params["patch.bias"])
    return tokens[0] if single else tokens


def attention_head(X, Q, K, V) -> Tensor:
    """``Softmax(X Q K^T X^T / sqrt(d_k)) X V`` for tokens ``X`` of shape (..., n, d)."""
    X, Q, K, V = _t(X), _t(Q), _t(K), _t(V)
    dk = Q.shape[-1]
    scores = T.scale((X @ Q) @ T.transpose(X @ K), 1.0 / math.sqrt(dk))
    return T.softmax_rows(scores) @ (X @ V)


def multi_head_attention(X, q, k, v, proj_w, proj_b) -> Tensor:
    """All heads of one layer at once; ``q``, ``k``, ``v`` are stacked ``(h, d, d_k)``.

    Numerically the same as concatenating :func:`attention_head` outputs
    and applying the output projection.
    """
    X = _t(X)
    q, k, v = _t(q), _t(k), _t(v)
    lead, (n, d) = X.shape[:-2], X.shape[-2:]
    h, dk, dv = q.shape[0], q.shape[-1], v.shape[-1]

    def project(w, width):
        flat = w.transpose(1, 0, 2).reshape(d, h * width)
        return (X @ flat).reshape(lead + (n, h, width)).transpose(_swap_heads(len(lead)))

    qx, kx, vx = project(q, dk), project(k, dk), project(v, dv)
    scores = T.scale(qx @ T.transpose(kx), 1.0 / math.sqrt(dk))
    heads = T.softmax_rows(scores) @ vx  # (..., h, n, d_v)
    merged = heads.transpose(_swap_heads(len(lead))).reshape(lead + (n, h * dv))
    return merged @ _t(proj_w) + _t(proj_b)


def _swap_heads(nlead: int) -> tuple:
    return tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2)


def encoder_block(params, x: Tensor, layer: int) -> Tensor:
    config = params.config
    pre = f"blocks.{layer}."
    eps = config.ln_eps
    y = T.layer_norm(x, _t(params[pre + "ln1.gain"]), _t(params[pre + "ln1.bias"]), eps)
    x = x + multi_head_attention(
        y,
        params[pre + "attn.q"],
        params[pre + "attn.k"],
        params[pre + "attn.v"],
        params[pre + "attn.proj.weight"],
        params[pre + "attn.proj.bias"],
    )
    y = T.layer_norm(x, _t(params[pre + "ln2.gain"]), _t(params[pre + "ln2.bias"]), eps)
    y = T.gelu(y @ _t(params[pre + "mlp.fc1.weight"]) + _t(params[pre + "mlp.fc1.bias"]), config.gelu_approximate)
    return x + (y @ _t(params[pre + "mlp.fc2.weight"]) + _t(params[pre + "mlp.fc2.bias"]))


def encoder_forward(params, tokens, noise=None) -> tuple[Tensor, Tensor]:
    """Run the encoder on patch tokens ``(B, n, d)``.

    ``noise`` (shape ``(n, d)``) is broadcast over the batch and added to the
    patch tokens before the cls token is prepended, so the cls token itself is
    never perturbed. Returns ``(token_states, cls_state)`` with shapes
    ``(B, n+1, d)`` and ``(B, d)``.
    """
    tokens = _t(tokens)
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape((1,) + tokens.shape)
    if noise is not None:
        tokens = tokens + _t(noise)
    b, _, d = tokens.shape
    cls = _t(params["cls_token"]).reshape(1, 1, d)
    if b > 1:
        cls = cls + Tensor(np.zeros((b, 1, d), dtype=tokens.dtype))
    x = T.concat([cls, tokens], axis=1) + _t(params["pos_embed"])
    for layer in range(params.config.depth):
        x = encoder_block(params, x, layer)
    cls_state = x[:, 0]
    if single:
        return x[0], cls_state[0]
    return x, cls_state


def classify(params, cls_state) -> Tensor:
    return _t(cls_state) @ _t(params["head.weight"]) + _t(params["head.bias"])


def forward(params, images, noise=None) -> Tensor:
    """Logits ``(B, num_classes)`` for a batch of images, with optional token-space noise."""
    _, cls_state = encoder_forward(params, patch_embed(params, images), noise)
    return classify(params, cls_state)


def forward_tokens(params, tokens, noise=None) -> Tensor:
    """Logits from precomputed patch tokens (skips the patch embedding)."""
    _, cls_state = encoder_forward(params, tokens, noise)
    return classify(params, cls_state)


def logits(params, images, noise=None, batch_size: int = 256) -> np.ndarray:
    """Evaluate logits without recording a graph, in chunks of ``batch_size``."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    noise_arr = None if noise is None else np.asarray(noise, dtype=_dtype_of(params))
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(forward(params, images[start:start + batch_size], noise_arr).data)
    z = np.concatenate(out, axis=0) if out else np.zeros((0, params.config.num_classes))
    return z[0] if single else z


def predict(params, images, noise=None, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image; ties go to the lowest class index."""
    return np.argmax(logits(params, images, noise, batch_size), axis=-1)


def token_logits(params, tokens, noise=None, batch_size: int = 256) -> np.ndarray:
    tokens = np.asarray(tokens)
    out = []
    with T.no_grad():
        for start in range(0, len(tokens), batch_size):
            out.append(forward_tokens(params, tokens[start:start + batch_size], noise).data)
    return np.concatenate(out, axis=0)


def embed_images(params, images, batch_size: int = 256) -> np.ndarray:
    """Patch tokens ``U = f_e(X)`` for a dataset, as a plain array."""
    images = np.asarray(images)
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(patch_embed(params, images[start:start + batch_size]).data)
    return np.concatenate(out, axis=0)


def accuracy(params, images, labels, noise=None, batch_size: int = 256) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(params, images, noise, batch_size) == np.asarray(labels)))


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _dtype_of(params):
    w = params["patch.weight"]
    return w.dtype
