"""
Dense 4-D tensors with reverse-mode differentiation.

Every differentiable operation is a Function subclass with a numpy forward
and a backward returning one gradient per parent. Calling Tensor.backward()
on a scalar loss traverses the graph in reverse topological order and
accumulates gradients into the leaves that require them.

All data is stored in double precision, row-major with W fastest.
"""

import numpy as np

from .errors import RejectedInputError


class Tensor:
    """
    Numeric array participating in a differentiation graph.

    Input:
        data: array-like, converted to float64
        requires_grad: if True, the tensor is a leaf whose grad buffer is populated by backward()
        ctx: Function that produced this tensor (None for leaves and constants)
    """
    def __init__(self, data, requires_grad=False, ctx=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.ctx = ctx

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self):
        """True if gradients flow into or through this tensor."""
        return self.requires_grad or self.ctx is not None

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


class Function:
    """
    Node of the differentiation graph.

    Subclasses implement forward(*arrays, **kwargs) -> array and
    backward(grad) -> tuple with one gradient (or None) per parent.
    """
    def __init__(self, *parents):
        self.parents = parents

    @classmethod
    def apply(cls, *parents, **kwargs):
        fn = cls(*parents)
        out = fn.forward(*[p.data for p in parents], **kwargs)
        return fn.wrap(out)

    def wrap(self, out):
        tracked = any(p.tracked for p in self.parents)
        return Tensor(out, ctx=self if tracked else None)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a, b, opname):
    if a.shape != b.shape:
        raise RejectedInputError(f'{opname}: shape mismatch {a.shape} vs {b.shape}')


### Elementwise ###

class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    def forward(self, a, factor=1.0):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum())

    def backward(self, grad):
        return (np.full(self.shape, float(grad)),)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, 'add')
    return Add.apply(a, b)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, 'mul')
    return Mul.apply(a, b)


def scale(a, factor):
    return Scale.apply(_as_tensor(a), factor=float(factor))


def tsum(a):
    """Sum of all elements as a scalar tensor."""
    return Sum.apply(_as_tensor(a))


def relu(a):
    return Relu.apply(_as_tensor(a))


### Convolution ###

def conv_output_size(size, k, stride, pad, dilation):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def im2col(x, kh, kw, stride=1, pad=0, dilation=1):
    """
    Unfold (N, C, H, W) into rows of receptive-field patches.

    Return:
        col: array with shape (N*out_h*out_w, C*kh*kw)
        out_h, out_w: output spatial extents
    """
    N, C, H, W = x.shape
    out_h = conv_output_size(H, kh, stride, pad, dilation)
    out_w = conv_output_size(W, kw, stride, pad, dilation)
    img = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)], mode='constant')
    col = np.empty((N, C, kh, kw, out_h, out_w))
    for y in range(kh):
        y0 = y * dilation
        y_max = y0 + stride * out_h
        for x_ in range(kw):
            x0 = x_ * dilation
            x_max = x0 + stride * out_w
            col[:, :, y, x_, :, :] = img[:, :, y0:y_max:stride, x0:x_max:stride]
    # (N, C, kh, kw, out_h, out_w) -> (N*out_h*out_w, C*kh*kw)
    col = col.transpose(0, 4, 5, 1, 2, 3).reshape(N * out_h * out_w, -1)
    return col, out_h, out_w


def col2im(col, input_shape, kh, kw, stride=1, pad=0, dilation=1):
    """Adjoint of im2col: scatter-add patch rows back into (N, C, H, W)."""
    N, C, H, W = input_shape
    out_h = conv_output_size(H, kh, stride, pad, dilation)
    out_w = conv_output_size(W, kw, stride, pad, dilation)
    col = col.reshape(N, out_h, out_w, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    for y in range(kh):
        y0 = y * dilation
        y_max = y0 + stride * out_h
        for x_ in range(kw):
            x0 = x_ * dilation
            x_max = x0 + stride * out_w
            img[:, :, y0:y_max:stride, x0:x_max:stride] += col[:, :, y, x_, :, :]
    return img[:, :, pad:H + pad, pad:W + pad]


class Conv2d(Function):
    def forward(self, x, w, b=None, stride=1, pad=0, dilation=1):
        self.x_shape = x.shape
        self.w = w
        self.has_bias = b is not None
        self.hyper = (stride, pad, dilation)
        Co, Ci, kh, kw = w.shape
        col, out_h, out_w = im2col(x, kh, kw, stride, pad, dilation)
        w_col = w.reshape(Co, -1)
        out = col @ w_col.T
        if self.has_bias:
            out = out + b
        self.col = col
        return out.reshape(x.shape[0], out_h, out_w, Co).transpose(0, 3, 1, 2)

    def backward(self, grad):
        Co, Ci, kh, kw = self.w.shape
        stride, pad, dilation = self.hyper
        dout = grad.transpose(0, 2, 3, 1).reshape(-1, Co)
        dw = (dout.T @ self.col).reshape(self.w.shape)
        dcol = dout @ self.w.reshape(Co, -1)
        dx = col2im(dcol, self.x_shape, kh, kw, stride, pad, dilation)
        if self.has_bias:
            return dx, dw, dout.sum(axis=0)
        return dx, dw


def conv2d(x, kernel, bias=None, stride=1, pad=0, dilation=1):
    """
    2-D convolution (cross-correlation) of x with kernel.

    Input:
        x: Tensor (N, C_in, H, W)
        kernel: Tensor (C_out, C_in, kH, kW)
        bias: optional Tensor (C_out,)
        stride, pad, dilation: integers (>=1, >=0, >=1)

    Return:
        Tensor (N, C_out, out_h, out_w) with
        out = floor((H + 2*pad - dilation*(k-1) - 1)/stride) + 1
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise RejectedInputError(f'conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}')
    if stride < 1 or pad < 0 or dilation < 1:
        raise RejectedInputError(f'conv2d: invalid stride={stride} pad={pad} dilation={dilation}')
    Co, Ci, kh, kw = kernel.shape
    if kh < 1 or kw < 1:
        raise RejectedInputError('conv2d: kernel extents must be >= 1')
    if x.shape[1] != Ci:
        raise RejectedInputError(f'conv2d: input has {x.shape[1]} channels, kernel expects {Ci}')
    out_h = conv_output_size(x.shape[2], kh, stride, pad, dilation)
    out_w = conv_output_size(x.shape[3], kw, stride, pad, dilation)
    if out_h < 1 or out_w < 1:
        raise RejectedInputError(f'conv2d: kernel does not fit input {x.shape[2:]} (pad={pad}, dilation={dilation})')
    if bias is None:
        return Conv2d.apply(x, kernel, stride=stride, pad=pad, dilation=dilation)
    bias = _as_tensor(bias)
    if bias.shape != (Co,):
        raise RejectedInputError(f'conv2d: bias shape {bias.shape} does not match {Co} output channels')
    return Conv2d.apply(x, kernel, bias, stride=stride, pad=pad, dilation=dilation)


### Pooling ###

class MaxPool2d(Function):
    def forward(self, x, k=2, stride=2):
        N, C, H, W = x.shape
        out_h = (H - k) // stride + 1
        out_w = (W - k) // stride + 1
        self.x_shape = x.shape
        windows = np.empty((N, C, k * k, out_h, out_w))
        flat = np.empty((k * k, out_h, out_w), dtype=np.int64)
        oy = np.arange(out_h)[:, None] * stride
        ox = np.arange(out_w)[None, :] * stride
        for y in range(k):
            for x_ in range(k):
                j = y * k + x_
                windows[:, :, j] = x[:, :, y:y + stride * out_h:stride, x_:x_ + stride * out_w:stride]
                flat[j] = (oy + y) * W + (ox + x_)
        # argmax returns the first maximum: ties resolve to the first row-major index
        best = windows.argmax(axis=2)
        self.argmax = np.take_along_axis(
            np.broadcast_to(flat, (N, C) + flat.shape), best[:, :, None], axis=2)[:, :, 0]
        return np.take_along_axis(windows, best[:, :, None], axis=2)[:, :, 0]

    def backward(self, grad):
        N, C, H, W = self.x_shape
        dx = np.zeros((N, C, H * W))
        n_idx, c_idx = np.meshgrid(np.arange(N), np.arange(C), indexing='ij')
        np.add.at(dx, (n_idx[:, :, None, None], c_idx[:, :, None, None], self.argmax), grad)
        return (dx.reshape(self.x_shape),)


def maxpool2d(x, k=2, stride=2):
    """
    Max pooling without padding.

    Return:
        out: Tensor (N, C, out_h, out_w), out = floor((H - k)/stride) + 1
        argmax: int array (N, C, out_h, out_w) of flat indices (row*W + col) into the input plane
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise RejectedInputError(f'maxpool2d expects 4-D input, got {x.shape}')
    if k < 1 or stride < 1:
        raise RejectedInputError(f'maxpool2d: invalid k={k} stride={stride}')
    if k > x.shape[2] or k > x.shape[3]:
        raise RejectedInputError(f'maxpool2d: window {k} exceeds input extent {x.shape[2:]}')
    fn = MaxPool2d(x)
    out = fn.forward(x.data, k=k, stride=stride)
    return fn.wrap(out), fn.argmax


### Resampling, normalisation, concatenation ###

_interp_cache = {}


def _interp_matrix(n):
    """(2n, n) align-corners bilinear interpolation weights."""
    if n not in _interp_cache:
        m = 2 * n
        mat = np.zeros((m, n))
        if n == 1:
            mat[:, 0] = 1.0
        else:
            pos = np.arange(m) * (n - 1) / (m - 1)
            i0 = np.minimum(np.floor(pos).astype(int), n - 2)
            frac = pos - i0
            mat[np.arange(m), i0] = 1.0 - frac
            mat[np.arange(m), i0 + 1] += frac
        _interp_cache[n] = mat
    return _interp_cache[n]


class Upsample2x(Function):
    def forward(self, x):
        self.uh = _interp_matrix(x.shape[2])
        self.uw = _interp_matrix(x.shape[3])
        return self.uh @ x @ self.uw.T

    def backward(self, grad):
        return (self.uh.T @ grad @ self.uw,)


def bilinear_upsample2x(x):
    """Exact x2 spatial upsampling with fixed align-corners bilinear weights."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise RejectedInputError(f'bilinear_upsample2x expects 4-D input, got {x.shape}')
    return Upsample2x.apply(x)


class SoftmaxChannel(Function):
    def forward(self, x):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        self.s = e / e.sum(axis=1, keepdims=True)
        return self.s

    def backward(self, grad):
        s = self.s
        return (s * (grad - (grad * s).sum(axis=1, keepdims=True)),)


def softmax_channel(x):
    """Per-pixel softmax over the channel axis."""
    return SoftmaxChannel.apply(_as_tensor(x))


def softmax_array(x, axis=1):
    """Softmax of a plain array (no graph)."""
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class ConcatChannels(Function):
    def forward(self, a, b):
        self.split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, grad):
        return grad[:, :self.split], grad[:, self.split:]


def concat_channels(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise RejectedInputError(f'concat_channels: extents differ {a.shape} vs {b.shape}')
    return ConcatChannels.apply(a, b)


### Loss ###

class CrossEntropy(Function):
    def forward(self, logits, labels=None, ignore_index=255, reduction='mean'):
        valid = labels != ignore_index
        safe = np.where(valid, labels, 0)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logsum
        picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
        count = int(valid.sum())
        self.valid, self.safe = valid, safe
        self.prob = np.exp(logp)
        self.denom = max(count, 1) if reduction == 'mean' else 1
        if count == 0:
            return np.asarray(0.0)
        return np.asarray(-(picked * valid).sum() / self.denom)

    def backward(self, grad):
        onehot = np.zeros_like(self.prob)
        np.put_along_axis(onehot, self.safe[:, None], 1.0, axis=1)
        g = (self.prob - onehot) * self.valid[:, None] / self.denom
        return (g * float(grad),)


def cross_entropy(logits, labels, ignore_index=255, reduction='mean'):
    """
    Negative log-likelihood of the channel softmax at integer labels.

    Input:
        logits: Tensor (N, K, H, W)
        labels: int array (N, H, W) in {0..K-1} or ignore_index
        reduction: 'mean' over non-ignored entries or 'sum'

    Return:
        scalar Tensor; 0 with zero gradient when every label is ignored
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise RejectedInputError(f'cross_entropy: labels {labels.shape} do not match logits {logits.shape}')
    valid = labels != ignore_index
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= logits.shape[1]):
        raise RejectedInputError('cross_entropy: label outside class range')
    if reduction not in ('mean', 'sum'):
        raise RejectedInputError(f'cross_entropy: unknown reduction {reduction}')
    return CrossEntropy.apply(logits, labels=labels, ignore_index=ignore_index, reduction=reduction)


### Reverse traversal ###

def _topological_order(root):
    """Post-order of graph nodes reachable from root (parents before children)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.ctx is not None:
            for parent in node.ctx.parents:
                if parent.tracked and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss):
    """
    Populate grad buffers of all leaves reachable from a scalar loss.

    Gradients accumulate into existing leaf buffers; call zero_grad() between steps.
    """
    if loss.data.size != 1:
        raise RejectedInputError(f'backward needs a scalar loss, got shape {loss.shape}')
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.ctx is None:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, pgrad in zip(node.ctx.parents, node.ctx.backward(grad)):
            if pgrad is None or not parent.tracked:
                continue
            pgrad = np.reshape(pgrad, parent.shape)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pgrad
            else:
                grads[id(parent)] = pgrad


def finite_diff_grad(f, x, eps=1e-5):
    """
    Central-difference gradient of a scalar evaluator.

    x.data is perturbed in place (and restored) so that closures over x see the change.

    Input:
        f: callable taking x and returning a float or scalar Tensor
        x: Tensor
        eps: step size (> 0)

    Return:
        Tensor with the same shape as x
    """
    if eps <= 0:
        raise RejectedInputError('finite_diff_grad: eps must be positive')

    def value(out):
        return out.item() if isinstance(out, Tensor) else float(out)

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = value(f(x))
        flat[i] = orig - eps
        fm = value(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return Tensor(grad)
