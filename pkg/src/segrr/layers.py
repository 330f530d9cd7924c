"""Differentiable layers: dilated/strided 2D convolution, transposed
convolution, pooling, batch normalization, spatial dropout, activations,
and nearest-neighbor upsampling.

Convolution is cross-correlation (no kernel flip). "same" padding zero
fills floor(d*(k-1)/2) per side, which preserves H and W at stride 1 for
every odd kernel.
"""

import numpy as np

from .tensor import Tensor


# ----------------------------------------------------------------------
# convolution numeric cores (shared by conv2d forward/backward and by
# conv_transpose2d, which is the exact adjoint of a strided conv)

def _conv_out_size(size, k, stride, dilation, pad):
    eff = k + (k - 1) * (dilation - 1)
    return (size + 2 * pad - eff) // stride + 1


def _im2col(x, k, stride, dilation, pad):
    """Padded sliding-window matrix: (N*Ho*Wo, Ci*k*k) plus (ho, wo)."""
    n, ci, h, w = x.shape
    ho = _conv_out_size(h, k, stride, dilation, pad)
    wo = _conv_out_size(w, k, stride, dilation, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(n, ci, k, k, ho, wo),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False)
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, ci * k * k), ho, wo


def _conv_forward(x, w, stride, dilation, pad, return_cols=False):
    """x: (N,Ci,H,W), w: (Co,Ci,k,k) -> (N,Co,Ho,Wo) via im2col + GEMM."""
    n = x.shape[0]
    co, ci, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, dilation, pad)
    y = cols @ w.reshape(co, ci * k * k).T
    y = y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return (y, cols) if return_cols else y


def _conv_grad_x(dy, w, x_shape, stride, dilation, pad):
    """Gradient of _conv_forward w.r.t. x (also the transposed-conv forward)."""
    n, ci, h, ww = x_shape
    co, _, k, _ = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    if stride == 1:
        # adjoint of a stride-1 conv is a conv with swapped channel axes,
        # flipped kernel, and complementary padding
        w_adj = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        return _conv_forward(dy, w_adj, 1, dilation, dilation * (k - 1) - pad)
    dcols = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, co) @ w.reshape(co, ci * k * k)
    dcols = dcols.reshape(n, ho, wo, ci, k, k)
    dxp = np.zeros((n, ci, h + 2 * pad, ww + 2 * pad), dtype=dy.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :,
                ki * dilation: ki * dilation + (ho - 1) * stride + 1: stride,
                kj * dilation: kj * dilation + (wo - 1) * stride + 1: stride] += \
                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _conv_grad_w(dy, x, w_shape, stride, dilation, pad, cols=None):
    co, ci, k, _ = w_shape
    n, _, ho, wo = dy.shape
    if cols is None:
        cols, _, _ = _im2col(x, k, stride, dilation, pad)
    dym = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    return (dym.T @ cols).reshape(w_shape)


def same_padding(k, dilation):
    return (dilation * (k - 1)) // 2


# ----------------------------------------------------------------------
# functional ops on Tensors

def conv2d(x, w, b=None, stride=1, dilation=1, padding="same"):
    """Dilated cross-correlation. w: (Co, Ci, k, k); b: (Co,) or None."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    k = w.shape[2]
    pad = same_padding(k, dilation) if padding == "same" else 0
    needs = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    parents = [t for t in (x, w, b) if t is not None]
    y, cols = _conv_forward(x.data, w.data, stride, dilation, pad, return_cols=True)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1)
    if not w.requires_grad:
        cols = None  # drop the cached patch matrix when unused
    out = Tensor(y, requires_grad=needs, _parents=tuple(parents) if needs else ())
    if needs:
        def _bw(g):
            if x.requires_grad:
                x._accumulate(_conv_grad_x(g, w.data, x.shape, stride, dilation, pad))
            if w.requires_grad:
                w._accumulate(_conv_grad_w(g, x.data, w.shape, stride, dilation, pad, cols=cols))
            if b is not None and b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2, 3)))
        out._backward = _bw
    return out


def conv_transpose2d(x, w, b=None):
    """Stride-2 transposed convolution that exactly doubles H and W.

    w: (Ci, Co, k, k) with k=3. Defined as the adjoint of
    conv2d(stride=2, padding=1) so that <convT(x), y> == <x, conv(y)>.
    """
    ci, co, k, _ = w.shape
    if x.shape[1] != ci:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {ci}")
    n, _, h, ww = x.shape
    out_shape = (n, co, 2 * h, 2 * ww)
    stride, pad, dil = 2, same_padding(k, 1), 1
    needs = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    parents = [t for t in (x, w, b) if t is not None]
    y = _conv_grad_x(x.data, w.data.transpose(0, 1, 2, 3), out_shape, stride, dil, pad)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1)
    out = Tensor(y, requires_grad=needs, _parents=tuple(parents) if needs else ())
    if needs:
        def _bw(g):
            if x.requires_grad:
                x._accumulate(_conv_forward(g, w.data, stride, dil, pad))
            if w.requires_grad:
                w._accumulate(_conv_grad_w(x.data, g, w.shape, stride, dil, pad))
            if b is not None and b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2, 3)))
        out._backward = _bw
    return out


def max_pool2(x):
    """2x2 max pooling, stride 2. Ties route the gradient to the first max."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 requires even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out = Tensor(y, requires_grad=x.requires_grad, _parents=(x,) if x.requires_grad else ())
    if out.requires_grad:
        def _bw(g):
            gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            x._accumulate(gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
        out._backward = _bw
    return out


def avg_pool(x, p):
    """Non-overlapping p x p average pooling; rejects indivisible sizes."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"avg_pool: spatial dims {h}x{w} not divisible by p={p}")
    ho, wo = h // p, w // p
    y = x.data.reshape(n, c, ho, p, wo, p).mean(axis=(3, 5))
    out = Tensor(y, requires_grad=x.requires_grad, _parents=(x,) if x.requires_grad else ())
    if out.requires_grad:
        def _bw(g):
            gx = np.repeat(np.repeat(g, p, axis=2), p, axis=3) / (p * p)
            x._accumulate(gx)
        out._backward = _bw
    return out


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C, 1, 1) channel means."""
    return x.mean(axis=(2, 3), keepdims=True)


def upsample_nn(x, factor=2):
    """Nearest-neighbor upsampling; each pixel becomes a factor x factor block."""
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    out = Tensor(y, requires_grad=x.requires_grad, _parents=(x,) if x.requires_grad else ())
    if out.requires_grad:
        def _bw(g):
            gx = g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
            x._accumulate(gx)
        out._backward = _bw
    return out


def softmax_channel(x):
    """Softmax over the channel axis at every spatial location."""
    shifted = x - Tensor(x.data.max(axis=1, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=1, keepdims=True).broadcast_to(x.shape)


def relu(x):
    return x.relu()


def sigmoid(x):
    return x.sigmoid()


# ----------------------------------------------------------------------
# module system

class Module:
    """Base for parameterized layers: parameter registry plus train/eval mode."""

    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._children = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def register_parameter(self, name, array):
        t = Tensor(array, requires_grad=True, name=name)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def register_buffer(self, name, array):
        self._buffers[name] = np.asarray(array)
        object.__setattr__(self, name, self._buffers[name])
        return self._buffers[name]

    def _set_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def parameters(self, prefix=""):
        """Yield (qualified_name, Tensor) in a stable order."""
        for name, p in self._params.items():
            yield (prefix + name if not prefix else f"{prefix}.{name}"), p
        for cname, child in self._children.items():
            sub = cname if not prefix else f"{prefix}.{cname}"
            yield from child.parameters(sub)

    def buffers(self, prefix=""):
        for name, owner, bname in self.named_buffer_slots(prefix):
            yield name, owner._buffers[bname]

    def named_buffer_slots(self, prefix=""):
        """Yield (qualified_name, owning_module, buffer_name)."""
        for name in self._buffers:
            yield (name if not prefix else f"{prefix}.{name}"), self, name
        for cname, child in self._children.items():
            sub = cname if not prefix else f"{prefix}.{cname}"
            yield from child.named_buffer_slots(sub)

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def to_dtype(self, dtype):
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for m in self.modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name in list(m._buffers):
                m._set_buffer(name, m._buffers[name].astype(dtype))
        return self

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, k, rng, dilation=1, stride=1, padding="same"):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = k
        self.dilation = dilation
        self.stride = stride
        self.padding = padding if k > 1 else "valid"
        fan_in = in_channels * k * k
        self.register_parameter("weight", _fan_in_uniform(rng, (out_channels, in_channels, k, k), fan_in))
        self.register_parameter("bias", np.zeros(out_channels, dtype=np.float32))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      dilation=self.dilation, padding=self.padding)


class ConvTranspose2d(Module):
    """One stride-2 doubling stage, kernel 3."""

    def __init__(self, in_channels, out_channels, rng):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = in_channels * 9
        self.register_parameter("weight", _fan_in_uniform(rng, (in_channels, out_channels, 3, 3), fan_in))
        self.register_parameter("bias", np.zeros(out_channels, dtype=np.float32))

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """Spatial batch normalization with running statistics.

    Training uses biased batch variance over (N, H, W) per channel and
    rejects batch size 1; inference is an affine map from running stats.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.register_parameter("scale", np.ones(channels, dtype=np.float32))
        self.register_parameter("shift", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        c = x.shape[1]
        if c != self.channels:
            raise ValueError(f"batch_norm: expected {self.channels} channels, got {c}")
        shape = (1, c, 1, 1)
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("batch_norm: training mode requires batch size >= 2")
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = (x - mu.broadcast_to(x.shape)).square().mean(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self._set_buffer("running_mean",
                             ((1 - m) * self.running_mean + m * mu.data.reshape(-1)).astype(x.dtype))
            self._set_buffer("running_var",
                             ((1 - m) * self.running_var + m * var.data.reshape(-1)).astype(x.dtype))
            xhat = (x - mu.broadcast_to(x.shape)) * (var + self.eps).sqrt().reciprocal().broadcast_to(x.shape)
        else:
            mu = Tensor(self.running_mean.reshape(shape).astype(x.dtype))
            inv = Tensor((1.0 / np.sqrt(self.running_var + self.eps)).reshape(shape).astype(x.dtype))
            xhat = (x - mu.broadcast_to(x.shape)) * inv.broadcast_to(x.shape)
        g = self.scale.reshape(shape).broadcast_to(x.shape)
        b = self.shift.reshape(shape).broadcast_to(x.shape)
        return xhat * g + b


class SpatialDropout(Module):
    """Zeroes whole channels with probability rate during training.

    Survivors are scaled by 1/(1-rate); inference is the identity. The
    mask is drawn from the rng passed per call so runs stay reproducible.
    """

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, rng=None):
        if not self.training or self.rate == 0.0:
            return x
        if rng is None:
            raise ValueError("spatial_dropout needs an rng in training mode")
        n, c = x.shape[0], x.shape[1]
        keep = (rng.random((n, c, 1, 1)) >= self.rate).astype(x.dtype)
        mask = Tensor(keep / (1.0 - self.rate))
        return x * mask.broadcast_to(x.shape)
