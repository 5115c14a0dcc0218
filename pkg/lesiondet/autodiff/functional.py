import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from lesiondet.autodiff.tensor import Tensor, make_result
from lesiondet.core.errors import InvalidArgumentError, ShapeError


"""
    functional.py

    The differentiable layers of the u-net: same-padded convolution,
    ReLU, batch normalization, 2x2 max pooling, 2x2 stride-2 transposed
    convolution, channel concatenation, sigmoid and the weighted logistic
    loss. Every function takes and returns Tensors and preserves the
    floating dtype of its inputs, so the same code runs in float32 for
    training and float64 for gradient checks.

    Per-channel vectors (biases, batch-norm affine parameters and running
    statistics) are stored with shape (1, C, 1, 1).
"""

CHANNEL_AXES = (0, 2, 3)


def _correlate(x: np.ndarray, weights: np.ndarray, pad: int) -> np.ndarray:
    """ Stride-1 cross-correlation of (N, C, H, W) with (O, C, k, k). """
    k = weights.shape[-1]

    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    if k == 1:
        out = np.tensordot(x, weights[:, :, 0, 0], axes=([1], [1]))
    else:
        cols = sliding_window_view(x, (k, k), axis=(2, 3))
        out = np.tensordot(cols, weights, axes=([1, 4, 5], [1, 2, 3]))

    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weights: Tensor, bias: Tensor = None) -> Tensor:
    """ Zero-padded "same" convolution with a 3x3 or 1x1 kernel.

    :param x: input (N, C, H, W)
    :param weights: kernel (O, C, k, k), k in {1, 3}
    :param bias: optional (1, O, 1, 1)
    :return: output (N, O, H, W)
    """
    w = weights.data
    if w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
        raise ShapeError(f"Convolution kernels must be 1x1 or 3x3, got {w.shape[2]}x{w.shape[3]}.")

    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"Convolution expects {w.shape[1]} input channels, got {x.shape[1]}.")

    if bias is not None and bias.shape != (1, w.shape[0], 1, 1):
        raise ShapeError(f"Bias shape {bias.shape} does not match {w.shape[0]} output channels.")

    k = w.shape[2]
    pad = k // 2

    out = _correlate(x.data, w, pad)
    if bias is not None:
        out = out + bias.data

    parents = (x, weights) if bias is None else (x, weights, bias)

    def backward(g):
        grad_x = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            grad_x = _correlate(g, flipped, pad)

        if k == 1:
            grad_w = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        else:
            padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            cols = sliding_window_view(padded, (k, k), axis=(2, 3))
            grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))

        grads = (grad_x, grad_w)
        if bias is not None:
            grads += (g.sum(axis=CHANNEL_AXES, keepdims=True),)
        return grads

    return make_result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    """ Elementwise max(0, x); the subgradient at 0 is 0. """
    active = x.data > 0
    return make_result(np.where(active, x.data, 0).astype(x.dtype), (x,), lambda g: (g * active,))


def sigmoid(x: Tensor) -> Tensor:
    """ Elementwise logistic function, stable for large |x|. """
    out = expit(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),))


class BatchNormState:
    def __init__(self, channels: int, dtype=np.float32):
        """ Running statistics of one batch-normalization layer.

        :param channels: number of channels
        :param dtype: storage dtype
        """
        self.running_mean: np.ndarray = np.zeros((1, channels, 1, 1), dtype=dtype)
        self.running_var: np.ndarray = np.ones((1, channels, 1, 1), dtype=dtype)

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float) -> None:
        """ running <- momentum * running + (1 - momentum) * batch """
        dtype = self.running_mean.dtype
        self.running_mean = (momentum * self.running_mean + (1 - momentum) * mean).astype(dtype)
        self.running_var = (momentum * self.running_var + (1 - momentum) * var).astype(dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool,
               eps: float = 1e-5, momentum: float = 0.9) -> Tensor:
    """ Batch normalization over (batch, height, width) per channel.

    In training mode the batch statistics normalize the input and are
    folded into the running statistics; in evaluation mode the running
    statistics are used and nothing is mutated.

    :param x: input (N, C, H, W)
    :param gamma: scale (1, C, 1, 1)
    :param beta: shift (1, C, 1, 1)
    :param state: running statistics for this layer
    :param training: use batch statistics and update the running ones
    :param eps: variance floor
    :param momentum: weight of the previous running statistics
    :return: normalized tensor
    """
    channels = x.shape[1]
    expected = (1, channels, 1, 1)

    if gamma.shape != expected or beta.shape != expected or state.running_mean.shape != expected:
        raise ShapeError(f"Batch-norm parameters must have shape {expected} for {channels} channels.")

    data = x.data

    if training:
        mean = data.mean(axis=CHANNEL_AXES, keepdims=True)
        var = data.var(axis=CHANNEL_AXES, keepdims=True)
        state.update(mean, var, momentum)
    else:
        mean = state.running_mean.astype(data.dtype)
        var = state.running_var.astype(data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (data - mean) * inv_std
    out = gamma.data * x_hat + beta.data

    count = data.size // channels

    def backward(g):
        grad_gamma = (g * x_hat).sum(axis=CHANNEL_AXES, keepdims=True)
        grad_beta = g.sum(axis=CHANNEL_AXES, keepdims=True)
        d_hat = g * gamma.data

        if training:
            # Batch statistics depend on every input element.
            grad_x = (inv_std / count) * (count * d_hat
                                          - d_hat.sum(axis=CHANNEL_AXES, keepdims=True)
                                          - x_hat * (d_hat * x_hat).sum(axis=CHANNEL_AXES, keepdims=True))
        else:
            grad_x = d_hat * inv_std

        return grad_x, grad_gamma, grad_beta

    return make_result(out, (x, gamma, beta), backward)


def maxpool2(x: Tensor) -> Tensor:
    """ 2x2 stride-2 max pooling. Ties route the gradient to the first
    element of the window in raster order.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"Max pooling needs even height and width, got {h}x{w}.")

    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    argmax = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, argmax, axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros_like(windows)
        np.put_along_axis(routed, argmax, g[..., None], axis=-1)
        return (routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def upconv2(x: Tensor, weights: Tensor) -> Tensor:
    """ Transposed 2x2 convolution with stride 2, doubling height and
    width.

    :param x: input (N, C, H, W)
    :param weights: kernel (C, O, 2, 2)
    :return: output (N, O, 2H, 2W)
    """
    w = weights.data
    if w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError(f"Up-convolution kernels must be (in, out, 2, 2), got {w.shape}.")

    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"Up-convolution expects {w.shape[0]} input channels, got {x.shape[1]}.")

    n, _, h, width = x.shape
    out_ch = w.shape[1]

    # (N, H, W, O, 2, 2) -> (N, O, H, 2, W, 2)
    taps = np.tensordot(x.data, w, axes=([1], [0]))
    out = taps.transpose(0, 3, 1, 4, 2, 5).reshape(n, out_ch, 2 * h, 2 * width)

    def backward(g):
        g_taps = g.reshape(n, out_ch, h, 2, width, 2).transpose(0, 2, 4, 1, 3, 5)
        grad_x = np.tensordot(g_taps, w, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_w = np.tensordot(x.data, g_taps, axes=([0, 2, 3], [0, 1, 2]))
        return np.ascontiguousarray(grad_x), grad_w

    return make_result(np.ascontiguousarray(out), (x, weights), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """ Stacks b after a along the channel axis. """
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"Cannot concatenate {a.shape} and {b.shape}: batch and spatial sizes differ.")

    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    return make_result(out, (a, b), lambda g: (g[:, :split], g[:, split:]))


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """ Spatial window of x; the gradient outside the window is zero. """
    _, _, h, w = x.shape
    if top < 0 or left < 0 or top + height > h or left + width > w or height < 1 or width < 1:
        raise ShapeError(f"Crop {height}x{width} at ({top}, {left}) does not fit inside {h}x{w}.")

    out = np.ascontiguousarray(x.data[:, :, top:top + height, left:left + width])

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[:, :, top:top + height, left:left + width] = g
        return (grad,)

    return make_result(out, (x,), backward)


def weighted_logistic_loss(logits: Tensor, target, negative_weight: float = 0.25) -> Tensor:
    """ Weighted binary cross-entropy computed from logits.

    Each pixel contributes w(y) * BCE(sigmoid(z), y) with w(1) = 1 and
    w(0) = negative_weight; the sum is divided by the total weight.

    :param logits: pre-sigmoid map (N, 1, H, W)
    :param target: binary map of the same shape (Tensor or array)
    :param negative_weight: weight of background pixels
    :return: single-element tensor (1, 1, 1, 1)
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target)

    if y.shape != logits.shape:
        raise ShapeError(f"Target shape {y.shape} does not match logits shape {logits.shape}.")

    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgumentError("Loss targets must be binary (0 or 1).")

    if negative_weight < 0:
        raise InvalidArgumentError(f"Negative weight must be non-negative, got {negative_weight}.")

    z = logits.data
    y = y.astype(z.dtype)
    weights = np.where(y == 1, 1.0, negative_weight).astype(z.dtype)
    total = weights.sum()

    if total == 0:
        return make_result(np.zeros((1, 1, 1, 1), dtype=z.dtype), (logits,), lambda g: (np.zeros_like(z),))

    # softplus(z) - z*y == -[y log s(z) + (1 - y) log(1 - s(z))]
    terms = weights * (np.logaddexp(0, z) - z * y)
    loss = (terms.sum() / total).reshape(1, 1, 1, 1)

    def backward(g):
        return (g * weights * (expit(z) - y) / total,)

    return make_result(loss.astype(z.dtype), (logits,), backward)
