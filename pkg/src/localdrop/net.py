"""Bias-free dense / conv networks with drop sites, exact forward and backward passes.

A network is an ordered list of :class:`LayerSpec`. Dense and conv layers carry
weights; a layer with ``drop_attached`` multiplies its *input* by a drop
multiplier before applying its weights: a binary mask in the stochastic pass,
the keep probabilities in the expected pass.

Weight layouts: dense ``(in_units, out_units)``; conv ``(in_channels,
out_channels, kernel_h, kernel_w)``, so ``w[i, j]`` is the kernel block from
input channel ``i`` to output channel ``j``. Convolutions are valid-mode
cross-correlations and max-pooling uses stride equal to the window.
"""
import zlib
from dataclasses import dataclass, field

import numpy as np

from ._backend import get_kernels
from .drop import DropBlockParams, KeepRateVector, keep_values, sample_dropblock_mask, sample_dropout_mask
from .linalg import ShapeError

KINDS = ("dense", "conv", "maxpool", "relu", "flatten")
LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_units: int = 0
    out_units: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    window: int = 0
    drop_attached: bool = False
    keep_init: float = 1.0
    block_size: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and (self.in_units < 1 or self.out_units < 1):
            raise ValueError("dense layers need in_units, out_units >= 1")
        if self.kind == "conv" and min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w) < 1:
            raise ValueError("conv layers need positive channel counts and kernel dims")
        if self.kind == "maxpool" and self.window < 1:
            raise ValueError("maxpool window must be >= 1")
        if self.drop_attached and self.kind not in ("dense", "conv"):
            raise ValueError("drop sites attach to dense or conv layers only")

    @property
    def has_weights(self):
        return self.kind in ("dense", "conv")

    @classmethod
    def dense(cls, in_units, out_units, drop=False, keep_init=1.0):
        return cls("dense", in_units=in_units, out_units=out_units, drop_attached=drop, keep_init=keep_init)

    @classmethod
    def conv(cls, in_channels, out_channels, kernel_h, kernel_w=None, drop=False, block_size=3):
        return cls(
            "conv",
            in_channels=in_channels,
            out_channels=out_channels,
            kernel_h=kernel_h,
            kernel_w=kernel_h if kernel_w is None else kernel_w,
            drop_attached=drop,
            block_size=block_size,
        )

    @classmethod
    def maxpool(cls, window):
        return cls("maxpool", window=window)

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def flatten(cls):
        return cls("flatten")

    def to_dict(self):
        d = {"kind": self.kind}
        for name in ("in_units", "out_units", "in_channels", "out_channels", "kernel_h", "kernel_w", "window"):
            val = getattr(self, name)
            if val:
                d[name] = val
        if self.drop_attached:
            d["drop_attached"] = True
            d["keep_init"] = self.keep_init
            d["block_size"] = self.block_size
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    num_classes: int
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        shapes = [self.input_shape]
        for idx, layer in enumerate(self.layers):
            shapes.append(_out_shape(layer, shapes[-1], idx))
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"network output shape {shapes[-1]} != ({self.num_classes},)")
        object.__setattr__(self, "_shapes", tuple(shapes))

    def in_shape(self, idx):
        """Per-example input shape of layer ``idx``."""
        return self._shapes[idx]

    @property
    def weight_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.has_weights]

    @property
    def depth(self):
        """Number of weight layers L."""
        return len(self.weight_layers)

    @property
    def drop_sites(self):
        return [i for i, layer in enumerate(self.layers) if layer.drop_attached]

    def weight_shape(self, idx):
        layer = self.layers[idx]
        if layer.kind == "dense":
            return (layer.in_units, layer.out_units)
        if layer.kind == "conv":
            return (layer.in_channels, layer.out_channels, layer.kernel_h, layer.kernel_w)
        return None

    def without_drops(self):
        layers = [
            LayerSpec(**{**layer.__dict__, "drop_attached": False}) if layer.drop_attached else layer
            for layer in self.layers
        ]
        return NetworkSpec(layers, self.num_classes, self.input_shape)

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([LayerSpec.from_dict(x) for x in d["layers"]], d["num_classes"], d["input_shape"])


def _out_shape(layer, shape, idx):
    kind = layer.kind
    if kind == "dense":
        if shape != (layer.in_units,):
            raise ShapeError(f"layer {idx}: dense expects input ({layer.in_units},), got {shape}")
        return (layer.out_units,)
    if kind == "conv":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"layer {idx}: conv expects ({layer.in_channels}, H, W) input, got {shape}")
        c, h, w = shape
        if layer.kernel_h > h or layer.kernel_w > w:
            raise ShapeError(f"layer {idx}: kernel {layer.kernel_h}x{layer.kernel_w} exceeds feature map {h}x{w}")
        return (layer.out_channels, h - layer.kernel_h + 1, w - layer.kernel_w + 1)
    if kind == "maxpool":
        if len(shape) != 3 or shape[1] < layer.window or shape[2] < layer.window:
            raise ShapeError(f"layer {idx}: maxpool window {layer.window} does not fit {shape}")
        return (shape[0], shape[1] // layer.window, shape[2] // layer.window)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


def init_weights(net, rng):
    """He-normal initialisation for every weight layer; ``None`` for the rest."""
    weights = []
    for idx, layer in enumerate(net.layers):
        shape = net.weight_shape(idx)
        if shape is None:
            weights.append(None)
            continue
        fan_in = layer.in_units if layer.kind == "dense" else layer.in_channels * layer.kernel_h * layer.kernel_w
        weights.append(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))
    return weights


def init_keep_states(net, d_init=0.0):
    """Initial drop-site states: keep_init vectors for dense, DropBlock at ``d_init`` for conv."""
    states = []
    for idx, layer in enumerate(net.layers):
        if not layer.drop_attached:
            states.append(None)
        elif layer.kind == "dense":
            states.append(KeepRateVector.full(layer.in_units, layer.keep_init))
        else:
            _, h, w = net.in_shape(idx)
            states.append(DropBlockParams(d_init, layer.block_size, (h, w)))
    return states


def sample_masks(net, states, batch, rng, backend=None):
    """Draw one binary mask per drop site for a batch of ``batch`` examples."""
    masks = []
    for idx, layer in enumerate(net.layers):
        state = states[idx] if states is not None else None
        if not layer.drop_attached or state is None:
            masks.append(None)
        elif isinstance(state, KeepRateVector):
            masks.append(sample_dropout_mask(state, rng, size=batch))
        else:
            masks.append(sample_dropblock_mask(state, layer.in_channels, rng, batch=batch, backend=backend))
    return masks


@dataclass
class ActivationCache:
    """Everything ``backward`` needs from one forward pass."""

    mode: str
    inputs: list = field(default_factory=list)  # layer input before the drop multiplier
    multipliers: list = field(default_factory=list)  # mask / keep values used, or None
    pool_args: list = field(default_factory=list)
    output: np.ndarray = None
    fingerprint: tuple = ()


@dataclass
class Gradients:
    weights: list
    keep: list = None

    def flat(self):
        return np.concatenate([g.ravel() for g in self.weights if g is not None])


def _fingerprint(weights):
    parts = []
    for w in weights:
        if w is None:
            parts.append(None)
            continue
        flat = w.reshape(-1)
        sample = flat[:: max(1, flat.size // 256)]
        parts.append((id(w), w.shape, zlib.crc32(np.ascontiguousarray(sample).tobytes())))
    return tuple(parts)


def _check_weights(net, weights):
    if len(weights) != len(net.layers):
        raise ShapeError(f"expected {len(net.layers)} weight slots, got {len(weights)}")
    for idx in net.weight_layers:
        if weights[idx] is None or tuple(weights[idx].shape) != net.weight_shape(idx):
            got = None if weights[idx] is None else weights[idx].shape
            raise ShapeError(f"layer {idx}: weight shape {got} != {net.weight_shape(idx)}")


def _forward(net, weights, x, multipliers, mode, backend):
    _check_weights(net, weights)
    kern = get_kernels(backend)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != network input {net.input_shape}")
    cache = ActivationCache(mode=mode, fingerprint=_fingerprint(weights))
    h = x
    for idx, layer in enumerate(net.layers):
        cache.inputs.append(h)
        mult = multipliers[idx] if multipliers is not None else None
        cache.multipliers.append(mult)
        cache.pool_args.append(None)
        if mult is not None:
            h = h * mult
        if layer.kind == "dense":
            h = h @ weights[idx]
        elif layer.kind == "conv":
            h = kern.conv2d_valid_batch(h, weights[idx])
        elif layer.kind == "relu":
            h = np.maximum(h, 0.0)
        elif layer.kind == "maxpool":
            h, arg = kern.maxpool_forward(h, layer.window)
            cache.pool_args[-1] = arg
        elif layer.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
    cache.output = h
    return h, cache


def _check_multiplier(net, idx, value, batch, binary):
    layer = net.layers[idx]
    target = net.in_shape(idx)
    value = np.asarray(value, dtype=np.float64)
    if layer.kind == "dense":
        ok = value.shape in ((batch,) + target, target)
    else:
        ok = value.shape in ((batch,) + target, target, target[1:], (batch, 1) + target[1:])
    if not ok:
        raise ShapeError(f"layer {idx}: drop multiplier shape {value.shape} does not match input {target}")
    if binary and not np.all((value == 0.0) | (value == 1.0)):
        raise ValueError(f"layer {idx}: stochastic masks must be binary")
    if not binary and (np.any(value < 0.0) or np.any(value > 1.0)):
        raise ValueError(f"layer {idx}: keep rates must lie in [0, 1]")
    return value


def forward_stochastic(net, weights, masks, x, backend=None):
    """Forward pass with sampled binary masks at each drop site (None = no drop)."""
    x = np.asarray(x, dtype=np.float64)
    mults = [None] * len(net.layers)
    if masks is not None:
        for idx, m in enumerate(masks):
            if m is not None:
                if not net.layers[idx].drop_attached:
                    raise ShapeError(f"layer {idx}: mask given but no drop site attached")
                mults[idx] = _check_multiplier(net, idx, m, x.shape[0], binary=True)
    return _forward(net, weights, x, mults, "stochastic", backend)


def forward_expected(net, weights, keep_rates, x, backend=None):
    """Forward pass with every mask replaced by its expectation (mask scaling)."""
    x = np.asarray(x, dtype=np.float64)
    mults = [None] * len(net.layers)
    if keep_rates is not None:
        for idx, state in enumerate(keep_rates):
            if state is not None and net.layers[idx].drop_attached:
                mults[idx] = _check_multiplier(net, idx, keep_values(state), x.shape[0], binary=False)
    return _forward(net, weights, x, mults, "expected", backend)


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss(output, y_onehot):
    """Softmax cross-entropy, averaged over the batch when ``output`` is 2-D."""
    output = np.asarray(output, dtype=np.float64)
    y = np.asarray(y_onehot, dtype=np.float64)
    if output.shape != y.shape:
        raise ShapeError(f"logits {output.shape} and labels {y.shape} differ")
    p = np.maximum(softmax(output), LOG_FLOOR)
    per = -np.sum(y * np.log(p), axis=-1)
    return float(np.mean(per))


def predict(net, weights, keep_states, x, batch_size=1000, backend=None):
    """Class predictions with the expected forward pass, evaluated in chunks."""
    preds = []
    for start in range(0, len(x), batch_size):
        out, _ = forward_expected(net, weights, keep_states, x[start : start + batch_size], backend=backend)
        preds.append(out.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def backward(net, weights, cache, y_onehot, keep_grads=False, backend=None):
    """Exact gradient of the batch-mean loss for the pass recorded in ``cache``.

    With ``keep_grads`` (expected-mode caches only), also returns d loss / d keep
    values per drop site: shape (width,) for dense sites, (u, v) for DropBlock
    sites whose keep matrix is shared across channels and examples.
    """
    if cache.fingerprint != _fingerprint(weights):
        raise ValueError("activation cache is stale: weights changed since the forward pass")
    if keep_grads and cache.mode != "expected":
        raise ValueError("keep-rate gradients require an expected-mode cache")
    kern = get_kernels(backend)
    y = np.asarray(y_onehot, dtype=np.float64)
    n = y.shape[0]
    g = (softmax(cache.output) - y) / n
    wgrads = [None] * len(net.layers)
    kgrads = [None] * len(net.layers) if keep_grads else None
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        x_in = cache.inputs[idx]
        mult = cache.multipliers[idx]
        a = x_in if mult is None else x_in * mult
        if layer.kind == "dense":
            wgrads[idx] = a.T @ g
            g = g @ weights[idx].T
        elif layer.kind == "conv":
            w = weights[idx]
            wgrads[idx] = kern.conv2d_grad_weight(a, g, w.shape[2], w.shape[3])
            g = kern.conv2d_grad_input(g, w, a.shape[2], a.shape[3])
        elif layer.kind == "relu":
            g = g * (x_in > 0.0)
        elif layer.kind == "maxpool":
            g = kern.maxpool_backward(g, cache.pool_args[idx], x_in.shape, layer.window)
        elif layer.kind == "flatten":
            g = g.reshape(x_in.shape)
        if mult is not None:
            if keep_grads:
                prod = g * x_in
                if layer.kind == "dense":
                    kgrads[idx] = prod.sum(axis=0)
                else:
                    kgrads[idx] = prod.sum(axis=(0, 1))
            g = g * mult
    return Gradients(weights=wgrads, keep=kgrads)


def onehot(labels, k):
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out
