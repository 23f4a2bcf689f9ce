"""Reusable network building blocks.

All learnable layers carry spectral normalization by default (one power
iteration per training forward, frozen estimates in eval mode). The blocks
here are the ingredients of the translation transformer: positional
normalization, fixed sinusoidal position encoding, coordinate attention,
the adaptive convolution block, and SPADE-/AdaIN-style feature modulation.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, avg_pool2d, concat, conv2d, matmul, upsample_nearest


class Module:
    """Minimal container: tracks parameters, persistent buffers, train mode."""

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def _children(self):
        for name, val in self.__dict__.items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, val in self.__dict__.items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, val in self._buffers.items():
            yield prefix + name, val
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def named_state(self, prefix: str = ""):
        """Parameters and buffers, as name -> ndarray (shared, not copied)."""
        state = {name: p.data for name, p in self.named_parameters(prefix)}
        state.update(dict(self.named_buffers(prefix)))
        return state

    def _all_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._children():
            yield from child._all_modules(prefix + name + ".")

    def load_state(self, state: dict, prefix: str = ""):
        for name, p in self.named_parameters(prefix):
            p.data = np.array(state[name], dtype=np.float64)
            p.grad = None
        for mprefix, mod in self._all_modules(prefix):
            for bname in mod._buffers:
                mod._buffers[bname] = np.array(state[mprefix + bname], dtype=np.float64)

    def train(self, flag: bool = True):
        self.training = flag
        for _, child in self._children():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def spectral_normalize(w: Tensor, u: np.ndarray, n_iters: int = 1,
                       floor: float = 1e-12) -> tuple[Tensor, np.ndarray]:
    """One (or more) power-iteration steps; returns w / sigma_hat and the new u.

    sigma_hat = u'^T W v with u', v treated as constants, so gradients flow
    through W only.
    """
    w2 = w.data.reshape(w.data.shape[0], -1)
    u = u.copy()
    v = np.zeros(w2.shape[1])
    for _ in range(n_iters):
        v = w2.T @ u
        nv = np.linalg.norm(v)
        v = v / nv if nv > 0 else v
        u = w2 @ v
        nu = np.linalg.norm(u)
        u = u / nu if nu > 0 else u
    w_sn = _apply_sigma(w, u, v, floor)
    return w_sn, u


def _apply_sigma(w: Tensor, u: np.ndarray, v: np.ndarray, floor: float) -> Tensor:
    out = w.data.shape[0]
    sigma = (w.reshape((out, -1)) * Tensor(np.outer(u, v))).sum()
    return w / sigma.clamp(lo=floor)


class ConvLayer(Module):
    """2-D convolution with optional spectral normalization.

    The power-iteration vectors u, v persist across forwards; they advance
    only in training mode so that eval-mode forwards are pure functions of
    the weights.
    """

    def __init__(self, in_ch, out_ch, k, rng, stride=1, pad=None, groups=1,
                 bias=True, spectral=True, zero_init=False, bias_init=0.0):
        super().__init__()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.groups = groups
        self.spectral = spectral
        fan_in = (in_ch // groups) * k * k
        if zero_init:
            w = np.zeros((out_ch, in_ch // groups, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch // groups, k, k))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.full(out_ch, bias_init), requires_grad=True) if bias else None
        if spectral:
            u = rng.normal(size=out_ch)
            u /= max(np.linalg.norm(u), 1e-12)
            w2 = self.weight.data.reshape(out_ch, -1)
            v = w2.T @ u
            nv = np.linalg.norm(v)
            v = v / nv if nv > 0 else v
            u = w2 @ v
            nu = np.linalg.norm(u)
            u = u / nu if nu > 0 else u
            self.register_buffer("u", u)
            self.register_buffer("v", v)

    def effective_weight(self) -> Tensor:
        if not self.spectral:
            return self.weight
        if self.training:
            w2 = self.weight.data.reshape(self.weight.data.shape[0], -1)
            v = w2.T @ self._buffers["u"]
            nv = np.linalg.norm(v)
            v = v / nv if nv > 0 else v
            u = w2 @ v
            nu = np.linalg.norm(u)
            u = u / nu if nu > 0 else u
            self._buffers["u"] = u
            self._buffers["v"] = v
        return _apply_sigma(self.weight, self._buffers["u"], self._buffers["v"], 1e-12)

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.effective_weight(), self.stride, self.pad, self.groups)
        if self.bias is not None:
            y = y + self.bias.reshape((-1, 1, 1))
        return y


class Linear(Module):
    """Fully-connected layer on 1-D vectors, spectral-normalized by default."""

    def __init__(self, in_dim, out_dim, rng, bias=True, spectral=True):
        super().__init__()
        self.spectral = spectral
        w = rng.normal(0.0, np.sqrt(2.0 / in_dim), (out_dim, in_dim))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None
        if spectral:
            u = rng.normal(size=out_dim)
            u /= max(np.linalg.norm(u), 1e-12)
            v = self.weight.data.T @ u
            v /= max(np.linalg.norm(v), 1e-12)
            u = self.weight.data @ v
            u /= max(np.linalg.norm(u), 1e-12)
            self.register_buffer("u", u)
            self.register_buffer("v", v)

    def effective_weight(self) -> Tensor:
        if not self.spectral:
            return self.weight
        if self.training:
            v = self.weight.data.T @ self._buffers["u"]
            nv = np.linalg.norm(v)
            v = v / nv if nv > 0 else v
            u = self.weight.data @ v
            nu = np.linalg.norm(u)
            u = u / nu if nu > 0 else u
            self._buffers["u"] = u
            self._buffers["v"] = v
        return _apply_sigma(self.weight, self._buffers["u"], self._buffers["v"], 1e-12)

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(self.effective_weight(), x.reshape((-1, 1))).reshape((-1,))
        if self.bias is not None:
            y = y + self.bias
        return y


def _normalize_over(x: Tensor, axis: int, eps: float):
    mu = x.mean(axes=axis, keepdims=True)
    sigma = (x.var(axes=axis, keepdims=True) + eps).sqrt()
    return (x - mu) / sigma, mu, sigma


def pono(x: Tensor, eps: float = 1e-5) -> tuple[Tensor, Tensor, Tensor]:
    """Positional normalization: zero mean, unit std over channels at each position.

    Input is C×H×W; returns (normalized, mu, sigma) with mu/sigma shaped 1×H×W.
    """
    return _normalize_over(x, 0, eps)


def pono_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """PONO on position-major features (HW×C): normalize each row."""
    return _normalize_over(x, 1, eps)[0]


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over all spatial positions of a C×H×W grid."""
    return _normalize_over(x, (1, 2), eps)[0]


class LayerNorm(Module):
    """Channel-last layer norm on grids: normalize the channel vector at each
    position, then apply a learnable per-channel affine."""

    def __init__(self, channels, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones((channels, 1, 1)), requires_grad=True)
        self.beta = Tensor(np.zeros((channels, 1, 1)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return _normalize_over(x, 0, self.eps)[0] * self.gamma + self.beta


def positional_encoding(h: int, w: int, c: int) -> Tensor:
    """Fixed 2-D sinusoidal position encoding, shaped C×H×W with values in [-1, 1].

    Channels split into four bands: sin/cos over the row index, then sin/cos
    over the column index, each at C/4 geometrically spaced frequencies.
    """
    if c % 4:
        raise ValueError(f"positional encoding needs channels divisible by 4, got {c}")
    c4 = c // 4
    freqs = 1.0 / (10000.0 ** (np.arange(c4) / c4))
    ys = np.arange(h)[None, :, None] * freqs[:, None, None]
    xs = np.arange(w)[None, None, :] * freqs[:, None, None]
    bands = [
        np.broadcast_to(np.sin(ys), (c4, h, w)),
        np.broadcast_to(np.cos(ys), (c4, h, w)),
        np.broadcast_to(np.sin(xs), (c4, h, w)),
        np.broadcast_to(np.cos(xs), (c4, h, w)),
    ]
    return Tensor(np.concatenate(bands, axis=0))


class CoordAttention(Module):
    """Axis-pooled attention producing per-height and per-width channel gates.

    The two gate convolutions start at zero, so the block begins as a benign
    0.25 scaling (sigmoid(0)^2) and learns away from it. The gates are
    sigmoid-bounded, so they stay unnormalized (no spectral constraint).
    """

    def __init__(self, channels, rng, reduction=None):
        super().__init__()
        cr = reduction if reduction is not None else max(4, channels // 4)
        self.shared = ConvLayer(channels, cr, 1, rng)
        self.gate_h = ConvLayer(cr, channels, 1, rng, spectral=False, zero_init=True)
        self.gate_w = ConvLayer(cr, channels, 1, rng, spectral=False, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = x.shape[1]
        pool_h = x.mean(axes=2, keepdims=True)                     # C×H×1
        pool_w = x.mean(axes=1, keepdims=True).transpose((0, 2, 1))  # C×W×1
        y = self.shared(concat([pool_h, pool_w], axis=1)).relu()
        a_h = self.gate_h(y[:, :h]).sigmoid()                      # C×H×1
        a_w = self.gate_w(y[:, h:].transpose((0, 2, 1))).sigmoid()  # C×1×W
        return x * a_h * a_w


class AdaConvBlock(Module):
    """Depthwise conv -> coordinate attention -> pointwise expand -> GELU ->
    layer norm -> pointwise contract. Shape preserving."""

    def __init__(self, channels, rng, k: int = 3, expansion: int = 4):
        super().__init__()
        self.dwise = ConvLayer(channels, channels, k, rng, groups=channels)
        self.coord = CoordAttention(channels, rng)
        self.pwise1 = ConvLayer(channels, expansion * channels, 1, rng)
        self.norm = LayerNorm(expansion * channels)
        self.pwise2 = ConvLayer(expansion * channels, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.coord(self.dwise(x))
        y = self.norm(self.pwise1(y).gelu())
        return self.pwise2(y)


def modulate(q: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Denormalize q with spatial scale/bias: gamma * (q - mu) / sigma + beta.

    mu/sigma are per-channel statistics of q over all positions; sigma is
    floored at 1e-5.
    """
    mu = q.mean(axes=(1, 2), keepdims=True)
    sigma = (q.var(axes=(1, 2), keepdims=True) + 1e-10).sqrt()
    return gamma * ((q - mu) / sigma) + beta


def resize_to(img: Tensor, h: int, w: int) -> Tensor:
    """Match a C×H×W grid to the target spatial size by integer-average pooling
    or nearest upsampling."""
    ih, iw = img.shape[1], img.shape[2]
    if ih == h and iw == w:
        return img
    if ih >= h:
        if ih % h or iw % w or ih // h != iw // w:
            raise ValueError(f"cannot resize {ih}x{iw} to {h}x{w}")
        return avg_pool2d(img, ih // h)
    if h % ih or w % iw or h // ih != w // iw:
        raise ValueError(f"cannot resize {ih}x{iw} to {h}x{w}")
    return upsample_nearest(img, h // ih)


class SpadeModulation(Module):
    """Spatially varying scale/bias for query features, predicted from the
    conditioning image (resized to the feature resolution)."""

    def __init__(self, channels, cond_ch, rng, hidden: int = 64):
        super().__init__()
        self.shared = ConvLayer(cond_ch, hidden, 3, rng)
        # gamma head starts near 1 so the modulated path carries signal at init
        self.head_gamma = ConvLayer(hidden, channels, 3, rng, bias_init=1.0)
        self.head_beta = ConvLayer(hidden, channels, 3, rng)

    def __call__(self, q: Tensor, cond: Tensor) -> Tensor:
        a = self.shared(resize_to(cond, q.shape[1], q.shape[2])).relu()
        return modulate(q, self.head_gamma(a), self.head_beta(a))


class AdainModulation(Module):
    """Channel-wise scale/bias from a global style code, applied to
    instance-normalized features."""

    def __init__(self, channels, style_dim, rng):
        super().__init__()
        self.channels = channels
        self.fc = Linear(style_dim, 2 * channels, rng)
        self.fc.bias.data[:channels] = 1.0  # scale half starts at identity

    def __call__(self, x: Tensor, z: Tensor) -> Tensor:
        sb = self.fc(z)
        c = self.channels
        scale = sb[:c].reshape((c, 1, 1))
        bias = sb[c:].reshape((c, 1, 1))
        return instance_norm(x) * scale + bias
