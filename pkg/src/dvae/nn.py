"""Layers built on the tensor engine: linear, layer norm, attention,
transformer blocks, strided convolutions, and embeddings.

Modules register parameters and submodules by attribute assignment;
construction order fixes the parameter naming, so checkpoints are stable.
"""

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container with recursive named traversal."""

    def __setattr__(self, name, value):
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        """All registered tensors (trainable or frozen), dotted names."""
        out = []
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
                    elif isinstance(item, Tensor):
                        out.append((f"{full}.{i}", item))
        return out

    def parameters(self):
        """Trainable tensors only."""
        return [t for _, t in self.named_parameters() if t.requires_grad]

    def state_arrays(self):
        return {name: t.data for name, t in self.named_parameters()}

    def load_state_arrays(self, arrays):
        for name, t in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(
                    f"parameter {name!r}: checkpoint shape {src.shape} != model {t.data.shape}")
            t.data = src.astype(np.float32).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(rng, shape, std=0.02):
    return Tensor(rng.standard_normal(shape).astype(np.float32) * np.float32(std),
                  requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, std=0.02, zero_init=False):
        self.w = zeros_param((d_in, d_out)) if zero_init else param(rng, (d_in, d_out), std)
        self.b = zeros_param((d_out,)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.w)
        return T.add(y, self.b) if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = zeros_param((dim,))
        object.__setattr__(self, "eps", eps)

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, rng, width, heads):
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.qkv = Linear(rng, width, 3 * width)
        self.proj = Linear(rng, width, width)
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "head_dim", width // heads)

    def forward(self, x):
        b, t, d = x.shape
        h, dh = self.heads, self.head_dim
        qkv = self.qkv(x)
        q = T.transpose(T.reshape(qkv[:, :, 0:d], (b, t, h, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(qkv[:, :, d:2 * d], (b, t, h, dh)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(qkv[:, :, 2 * d:3 * d], (b, t, h, dh)), (0, 2, 1, 3))
        att = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = T.softmax(att, axis=-1)
        y = T.matmul(att, v)  # [b,h,t,dh]
        y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (b, t, d))
        return self.proj(y)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x)). SiLU in the
    MLP (cheaper than GELU on this engine, same role)."""

    def __init__(self, rng, width, heads, mlp_ratio=4):
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadAttention(rng, width, heads)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(rng, width, mlp_ratio * width)
        self.fc2 = Linear(rng, mlp_ratio * width, width)

    def forward(self, x):
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.fc2(T.silu(self.fc1(self.ln2(x)))))


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel=3, stride=1, padding=1, trainable=True):
        std = math.sqrt(2.0 / (c_in * kernel * kernel))
        w = rng.standard_normal((c_out, c_in, kernel, kernel)).astype(np.float32) * np.float32(std)
        self.w = Tensor(w, requires_grad=trainable)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=trainable)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)

    def forward(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class PerceptualExtractor(Module):
    """Frozen random conv stack: three 3x3 stride-2 stages, widths 16/32/64.

    Weights are derived from the seed and never trained; the same seed gives
    the identical extractor in every process, so feature-space statistics
    are comparable across runs.
    """

    DEFAULT_SEED = 7021
    WIDTHS = (16, 32, 64)

    def __init__(self, in_channels=3, seed=DEFAULT_SEED):
        rng = np.random.default_rng(seed)
        widths = (in_channels,) + self.WIDTHS
        self.stages = [Conv2d(rng, widths[i], widths[i + 1], kernel=3, stride=2,
                              padding=1, trainable=False)
                       for i in range(3)]

    def forward(self, x):
        """Per-stage activations, shallow to deep."""
        feats = []
        for stage in self.stages:
            x = T.silu(stage(x))
            feats.append(x)
        return feats

    def pooled_features(self, images):
        """Final-stage features, spatially mean-pooled: [n, 64] ndarray."""
        out = self.forward(Tensor(np.asarray(images, dtype=np.float32)))[-1]
        return out.data.mean(axis=(2, 3))


def sinusoidal_embedding(t, dim, max_period=10000.0):
    """Sinusoidal features of integer timesteps; [n] -> [n, dim] float32."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(np.float32)
