"""Local Rademacher complexity upper bounds and the tail-singular-value regularizer.

All bounds share one shape. With per-layer factors ``f_i`` (i = 1..L),

    total = k * [ sqrt(delta_L)
                  + (B / n) * 2^(L-1) * prod_{i=1..L} f_i
                  + sum_{i=2..L} 2^(i-1) * sqrt(S_{L-i+1} * delta_{L-i+1})
                                 * prod_{j=1..i-1} f_{L-j+1} ]

where ``f_i = sqrt(S_i) * g_i`` and ``g_i`` is ``||theta^{i-1}||_2 * tail_i`` (dense
or single-channel conv), or ``sum_m ||theta_m^{i-1}||_2 * sum_r tail(W^i_{mr})``
(multichannel conv). Dense layers have S_i = 1. No-drop variants fix every keep
norm at 1.
"""
from dataclasses import dataclass, field

import numpy as np

from .drop import channel_keep_norms, keep_norm
from .linalg import svd_batch, tail_from_sigma


class BoundInputError(ValueError):
    """Per-layer data needed by a bound is missing or invalid."""


@dataclass
class LayerTerms:
    """Inputs for weight layer i: the tail sum of W^i and the keep norm of its input."""

    tail: float = None
    keep_norm: float = 1.0
    area: float = 1.0
    channel_keep_norms: np.ndarray = None
    block_tails: np.ndarray = None


@dataclass
class BoundInputs:
    k: int
    n: int
    B: float
    layers: list
    delta: list = None

    def __post_init__(self):
        if self.delta is None:
            self.delta = [1.0] * len(self.layers)

    @property
    def L(self):
        return len(self.layers)


@dataclass
class BoundReport:
    total: float
    term_const: float
    term_product: float
    term_sum: float
    factors: list = field(default_factory=list)


def _validate(inputs, need_area=False, need_channels=False):
    if inputs.L < 1:
        raise BoundInputError("at least one layer is required")
    if len(inputs.delta) != inputs.L:
        raise BoundInputError(f"delta has {len(inputs.delta)} entries for {inputs.L} layers")
    if inputs.k < 1 or inputs.n < 1 or inputs.B < 0:
        raise BoundInputError("k and n must be positive and B nonnegative")
    for i, (lt, d) in enumerate(zip(inputs.layers, inputs.delta), start=1):
        if d is None or d < 0:
            raise BoundInputError(f"layer {i}: delta must be nonnegative")
        if need_channels:
            if lt.channel_keep_norms is None or lt.block_tails is None:
                raise BoundInputError(f"layer {i}: channel keep norms and block tails are required")
            bt = np.asarray(lt.block_tails)
            if bt.ndim != 2 or bt.shape[0] != len(lt.channel_keep_norms) or np.any(bt < 0):
                raise BoundInputError(f"layer {i}: block tails must be a nonnegative (c_in, c_out) array")
        elif lt.tail is None or lt.tail < 0:
            raise BoundInputError(f"layer {i}: tail sum missing or negative")
        if lt.keep_norm is None or lt.keep_norm < 0:
            raise BoundInputError(f"layer {i}: keep norm missing or negative")
        if need_area and (lt.area is None or lt.area <= 0):
            raise BoundInputError(f"layer {i}: area cap S must be positive")


def _compose(inputs, factors, areas):
    L, k = inputs.L, inputs.k
    delta = inputs.delta
    const = k * np.sqrt(delta[L - 1])
    product = k * inputs.B / inputs.n * 2.0 ** (L - 1) * float(np.prod(factors))
    total_sum = 0.0
    for i in range(2, L + 1):
        layer = L - i + 1  # 1-indexed
        prod = 1.0
        for j in range(1, i):
            prod *= factors[L - j]  # factor of layer L-j+1
        total_sum += 2.0 ** (i - 1) * np.sqrt(areas[layer - 1] * delta[layer - 1]) * prod
    term_sum = k * total_sum
    return BoundReport(
        total=float(const + product + term_sum),
        term_const=float(const),
        term_product=float(product),
        term_sum=float(term_sum),
        factors=list(factors),
    )


def fcn_bound(inputs):
    """Bound for dense networks with dropout keep rates."""
    _validate(inputs)
    factors = [lt.keep_norm * lt.tail for lt in inputs.layers]
    return _compose(inputs, factors, [1.0] * inputs.L)


def fcn_bound_nodrop(inputs):
    """Dense-network bound with every keep norm fixed at 1."""
    _validate(inputs)
    factors = [1.0 * lt.tail for lt in inputs.layers]
    return _compose(inputs, factors, [1.0] * inputs.L)


def cnn_bound(inputs, drop=True):
    """Single-channel conv bound: each factor gains sqrt(S_i); ``drop=False`` gives the no-DropBlock form."""
    _validate(inputs, need_area=True)
    areas = [float(lt.area) for lt in inputs.layers]
    factors = [np.sqrt(s) * (lt.keep_norm if drop else 1.0) * lt.tail for s, lt in zip(areas, inputs.layers)]
    return _compose(inputs, factors, areas)


def cnn_bound_nodrop(inputs):
    return cnn_bound(inputs, drop=False)


def multichannel_bound(inputs, drop=True):
    """Multichannel conv bound with per-channel keep norms and per-block tail sums.

    ``area`` must cap c_in * c_out * p * q for each layer.
    """
    _validate(inputs, need_area=True, need_channels=True)
    areas = [float(lt.area) for lt in inputs.layers]
    factors = []
    for s, lt in zip(areas, inputs.layers):
        norms = np.asarray(lt.channel_keep_norms, dtype=np.float64)
        if not drop:
            norms = np.ones_like(norms)
        g = float(np.sum(norms * np.asarray(lt.block_tails, dtype=np.float64).sum(axis=1)))
        factors.append(np.sqrt(s) * g)
    return _compose(inputs, factors, areas)


# -- network-level helpers ----------------------------------------------------


def layer_spectra(net, weights, backend=None):
    """Singular values per weight layer: (r,) for dense, (c_in, c_out, r) for conv."""
    spectra = [None] * len(net.layers)
    for idx in net.weight_layers:
        w = weights[idx]
        if net.layers[idx].kind == "dense":
            spectra[idx] = svd_batch(w[None], compute_uv=False, backend=backend)[1][0]
        else:
            cin, cout, p, q = w.shape
            sig = svd_batch(w.reshape(cin * cout, p, q), compute_uv=False, backend=backend)[1]
            spectra[idx] = sig.reshape(cin, cout, -1)
    return spectra


def _block_tails(sig, h):
    cin, cout, _ = sig.shape
    out = np.empty((cin, cout))
    for m in range(cin):
        for j in range(cout):
            out[m, j] = tail_from_sigma(sig[m, j], h)
    return out


def _check_variant(net, variant):
    if variant not in ("fcn", "cnn", "multichannel"):
        raise ValueError(f"unknown variant {variant!r}")
    for idx in net.weight_layers:
        layer = net.layers[idx]
        if layer.kind == "conv":
            if variant == "fcn":
                raise ValueError(f"layer {idx}: the fcn variant covers dense layers only")
            if variant == "cnn" and (layer.in_channels != 1 or layer.out_channels != 1):
                raise ValueError(f"layer {idx}: the cnn variant needs single-channel kernels")


def reg_value(net, weights, keep_states, h, variant="multichannel", drop=True, spectra=None, backend=None):
    """Regularizer sum over weight layers; returns ``(total, per_layer_terms)``.

    Dense layer: ||theta^{l-1}||_2 * sum_{j>h} sigma_j(W^l). Conv layer:
    sum_m ||theta_m^{l-1}||_2 * sum_j sum_{k>h} sigma_k(W^l_{mj}). With
    ``drop=False`` all keep norms are 1.
    """
    if h < 0:
        raise ValueError(f"h must be nonnegative, got {h}")
    _check_variant(net, variant)
    if spectra is None:
        spectra = layer_spectra(net, weights, backend=backend)
    terms = []
    for idx in net.weight_layers:
        layer = net.layers[idx]
        state = keep_states[idx] if (drop and keep_states is not None) else None
        if layer.kind == "dense":
            terms.append(keep_norm(state) * tail_from_sigma(spectra[idx], h))
        else:
            norms = channel_keep_norms(state, layer.in_channels)
            terms.append(float(np.sum(norms * _block_tails(spectra[idx], h).sum(axis=1))))
    return float(sum(terms)), terms


def network_bound_inputs(net, weights, keep_states, h, n, B, delta=None, drop=True, spectra=None, backend=None):
    """Assemble :class:`BoundInputs` for a network, one entry per weight layer."""
    if spectra is None:
        spectra = layer_spectra(net, weights, backend=backend)
    layers = []
    for idx in net.weight_layers:
        layer = net.layers[idx]
        state = keep_states[idx] if (drop and keep_states is not None) else None
        if layer.kind == "dense":
            tail = tail_from_sigma(spectra[idx], h)
            kn = keep_norm(state)
            layers.append(
                LayerTerms(tail=tail, keep_norm=kn, area=1.0, channel_keep_norms=np.array([kn]), block_tails=np.array([[tail]]))
            )
        else:
            bt = _block_tails(spectra[idx], h)
            norms = channel_keep_norms(state, layer.in_channels)
            area = layer.in_channels * layer.out_channels * layer.kernel_h * layer.kernel_w
            layers.append(
                LayerTerms(
                    tail=float(bt.sum()),
                    keep_norm=float(norms[0]),
                    area=float(area),
                    channel_keep_norms=norms,
                    block_tails=bt,
                )
            )
    return BoundInputs(k=net.num_classes, n=n, B=B, layers=layers, delta=delta)


def network_bound(net, weights, keep_states, h, n, B, delta=None, drop=True, spectra=None, backend=None):
    """Bound for a whole network: the dense form for dense stacks, the multichannel form once conv layers appear."""
    inputs = network_bound_inputs(net, weights, keep_states, h, n, B, delta, drop, spectra, backend)
    if any(net.layers[i].kind == "conv" for i in net.weight_layers):
        return multichannel_bound(inputs, drop=drop)
    return fcn_bound(inputs) if drop else fcn_bound_nodrop(inputs)
