"""Neural layers built on the tensor engine.

Every layer registers its parameters into a shared :class:`ParamSet` under a
caller-supplied path, so parameter names are stable across runs and across
model compositions. Initialization is Gaussian(0, 0.01) seeded from
(global seed, parameter name): construction order never changes the values.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, IndexOutOfRangeError, ShapeError
from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.01
LAYER_NORM_EPS = 1e-5
MASK_NEG = -1e9  # additive score for padded keys; underflows to weight 0 in softmax


def param_rng(seed, name):
    """Deterministic per-parameter RNG derived from the global seed and name."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    )


class Parameter:
    """Named trainable tensor.

    ``trainable=False`` opts out of optimizer updates entirely; ``lr_scale``
    rescales the learning rate for this parameter (pretrained weights are
    typically adapted more gently than freshly initialized ones).
    """

    __slots__ = ("name", "tensor", "trainable", "lr_scale")

    def __init__(self, name, data, trainable=True, lr_scale=1.0):
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self.name = name
        self.tensor = t
        self.trainable = trainable
        self.lr_scale = lr_scale

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = value

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape}, trainable={self.trainable})"


class ParamSet:
    """Ordered registry of uniquely named parameters for one model."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ConfigError(f"duplicate parameter name: {param.name}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def trainable(self):
        return [p for p in self._params.values() if p.trainable]

    def set_trainable(self, flag, prefix=""):
        """Toggle trainability for every parameter whose name starts with prefix."""
        for p in self._params.values():
            if p.name.startswith(prefix):
                p.trainable = bool(flag)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def state_arrays(self):
        """name -> raw array view, in registration order."""
        return {name: p.tensor.data for name, p in self._params.items()}


def gaussian_param(pset, name, shape, seed, std=INIT_STD):
    if std == "fan_in":
        std = 1.0 / np.sqrt(shape[0])
    rng = param_rng(seed, name)
    data = rng.normal(0.0, std, size=shape).astype(T.default_dtype())
    return pset.add(Parameter(name, data))


def const_param(pset, name, value, shape):
    data = np.full(shape, value, dtype=T.default_dtype())
    return pset.add(Parameter(name, data))


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of a bidirectional transformer encoder stack."""

    num_layers: int
    num_heads: int
    model_dim: int
    ffn_dim: int
    max_seq_len: int

    def __post_init__(self):
        for field in ("num_heads", "model_dim", "ffn_dim", "max_seq_len"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"EncoderConfig.{field} must be positive")
        if self.num_layers < 0:
            raise ConfigError("EncoderConfig.num_layers must be >= 0")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self):
        return self.model_dim // self.num_heads


class Linear:
    def __init__(self, pset, name, d_in, d_out, seed, bias=True, std=INIT_STD):
        self.w = gaussian_param(pset, f"{name}/w", (d_in, d_out), seed, std=std)
        self.b = const_param(pset, f"{name}/b", 0.0, (d_out,)) if bias else None

    def __call__(self, x):
        if self.b is not None:
            return T.affine(x, self.w.tensor, self.b.tensor)
        return T.matmul(x, self.w.tensor)


class LayerNorm:
    """Normalization over the last axis with learned scale and shift."""

    def __init__(self, pset, name, dim, eps=LAYER_NORM_EPS):
        self.gamma = const_param(pset, f"{name}/gamma", 1.0, (dim,))
        self.beta = const_param(pset, f"{name}/beta", 0.0, (dim,))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma.tensor, self.beta.tensor, self.eps)


class Embedding:
    """Lookup table mapping integer ids to rows."""

    def __init__(self, pset, name, rows, dim, seed, std=INIT_STD):
        self.param = gaussian_param(pset, name, (rows, dim), seed, std=std)
        self.rows = rows

    def __call__(self, indices):
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= self.rows):
            bad = indices[(indices < 0) | (indices >= self.rows)].ravel()[0]
            raise IndexOutOfRangeError(
                f"index {int(bad)} out of range [0, {self.rows}) for table {self.param.name!r}"
            )
        return T.gather_rows(self.param.tensor, indices)


def _normalize_mask(mask, batch, n):
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (batch, n))
    if mask.shape != (batch, n):
        raise ShapeError(f"mask shape {mask.shape} incompatible with sequence ({batch}, {n})")
    return mask


class MultiHeadAttention:
    """Scaled dot-product attention over full (bidirectional) sequences.

    ``mask`` marks valid positions with True; padded keys receive zero
    attention weight from every query.
    """

    def __init__(self, pset, name, cfg: EncoderConfig, seed):
        d = cfg.model_dim
        self.cfg = cfg
        self.wq = Linear(pset, f"{name}/wq", d, d, seed)
        # key bias shifts every score of a query equally and cancels in the
        # softmax, so it is omitted rather than carried as a dead parameter
        self.wk = Linear(pset, f"{name}/wk", d, d, seed, bias=False)
        self.wv = Linear(pset, f"{name}/wv", d, d, seed)
        self.wo = Linear(pset, f"{name}/wo", d, d, seed)

    def __call__(self, q, k, v, mask=None):
        squeeze = q.ndim == 2
        if squeeze:
            q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
        cfg = self.cfg
        b, n, d = q.shape
        for other in (k, v):
            if other.shape != (b, n, d):
                raise ShapeError(f"attention operands differ: expected {(b, n, d)}, got {other.shape}")
        if d != cfg.model_dim:
            raise ShapeError(f"expected model_dim {cfg.model_dim}, got input dim {d}")
        if n > cfg.max_seq_len:
            raise ShapeError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")

        h, dh = cfg.num_heads, cfg.head_dim

        def split_heads(t):
            return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        qh = split_heads(self.wq(q))
        kh = split_heads(self.wk(k))
        vh = split_heads(self.wv(v))

        scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        if mask is not None:
            m = _normalize_mask(mask, b, n)
            additive = np.where(m, 0.0, MASK_NEG).astype(scores.dtype)
            scores = scores + Tensor(additive.reshape(b, 1, 1, n))
        weights = T.softmax(scores, axis=-1)
        context = T.matmul(weights, vh)
        merged = T.reshape(T.transpose(context, (0, 2, 1, 3)), (b, n, d))
        out = self.wo(merged)
        if squeeze:
            out = T.reshape(out, (n, d))
        return out


class FeedForward:
    def __init__(self, pset, name, d, hidden, seed):
        self.fc1 = Linear(pset, f"{name}/fc1", d, hidden, seed)
        self.fc2 = Linear(pset, f"{name}/fc2", hidden, d, seed)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class EncoderLayer:
    """Post-norm block: x -> LN(x + attn(x)) -> LN(. + ffn(.))."""

    def __init__(self, pset, name, cfg, seed):
        self.attn = MultiHeadAttention(pset, f"{name}/attn", cfg, seed)
        self.ln1 = LayerNorm(pset, f"{name}/ln1", cfg.model_dim)
        self.ffn = FeedForward(pset, f"{name}/ffn", cfg.model_dim, cfg.ffn_dim, seed)
        self.ln2 = LayerNorm(pset, f"{name}/ln2", cfg.model_dim)

    def __call__(self, x, mask=None):
        x = self.ln1(x + self.attn(x, x, x, mask))
        return self.ln2(x + self.ffn(x))


class TransformerEncoder:
    """Stack of bidirectional encoder layers; num_layers=0 is the identity."""

    def __init__(self, pset, name, cfg: EncoderConfig, seed):
        self.cfg = cfg
        self.layers = [
            EncoderLayer(pset, f"{name}/layer{i}", cfg, seed) for i in range(cfg.num_layers)
        ]

    def __call__(self, h, mask=None):
        for layer in self.layers:
            h = layer(h, mask)
        return h


class MLP:
    """Fully connected stack with ReLU between layers, linear output."""

    def __init__(self, pset, name, dims, seed, std=INIT_STD):
        if len(dims) < 2:
            raise ConfigError("MLP needs at least input and output dims")
        self.layers = [
            Linear(pset, f"{name}/fc{i}", dims[i], dims[i + 1], seed, std=std)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


def masked_mean(h, mask):
    """Mean over valid (True) sequence positions of a [b, n, d] tensor."""
    squeeze = h.ndim == 2
    if squeeze:
        h = T.reshape(h, (1,) + h.shape)
    b, n, _ = h.shape
    m = _normalize_mask(mask, b, n)
    counts = m.sum(axis=1)
    if (counts == 0).any():
        raise ShapeError("masked_mean over a fully masked sequence")
    weights = (m / counts[:, None]).astype(h.dtype)
    out = (h * Tensor(weights[:, :, None])).sum(axis=1)
    if squeeze:
        out = T.reshape(out, (out.shape[-1],))
    return out
