"""Two-stage LocalDrop training.

Stage one is minibatch SGD on the data loss with sampled drop masks, followed
by one projected-gradient step on the keep-rate block (weights fixed). Stage
two runs every ``m`` epochs once ``epoch >= k1``: every eligible weight matrix
is replaced by its singular-value-thresholded version, keeping the top ``h``
singular values and soft-thresholding the rest by ``lambda * ||theta||_2`` of
the layer input.

Random streams are spawned from ``SeedSequence(seed)`` in a fixed order:
weight init, minibatch shuffling, mask sampling. Keep-rate steps use the first
``theta_batch`` examples of each epoch's shuffle, so they draw nothing.
"""
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .bound import layer_spectra, network_bound, reg_value
from .drop import THETA_MIN, DropBlockParams, KeepRateVector, keep_norm, keep_prob_matrix, keep_prob_matrix_grad_d
from .linalg import svd, svd_batch, tail_from_sigma
from .net import backward, forward_expected, forward_stochastic, init_keep_states, init_weights, loss, onehot, predict, sample_masks

D_MAX = 0.25


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, value):
        super().__init__(f"training diverged at epoch {epoch} (loss {value})")
        self.epoch = epoch
        self.value = value


@dataclass
class TrainConfig:
    lam: float = 0.1
    m: int = 10
    h: int = 2000
    k1: int = 0
    lr0: float = 0.005
    lr_halving_period: int = 200
    epochs_max: int = 800
    batch_size: int = 128
    theta_lr: float = 0.01
    theta_batch: int = 1024
    seed: int = 0
    drops: bool = True
    d_init: float = 0.0
    d_max: float = D_MAX
    dropblock_warmup_epochs: int = None
    conv_h: int = None
    delta: float = 1.0
    log_bound: bool = True
    record_wall_time: bool = False

    def validate(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.h < 0 or (self.conv_h is not None and self.conv_h < 0):
            raise ConfigError(f"h must be >= 0, got {self.h}")
        if self.k1 < 0:
            raise ConfigError(f"k1 must be >= 0, got {self.k1}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.lr_halving_period < 1 or self.epochs_max < 0 or self.batch_size < 1:
            raise ConfigError("lr_halving_period and batch_size must be >= 1, epochs_max >= 0")
        if self.theta_lr < 0 or self.theta_batch < 1:
            raise ConfigError("theta_lr must be >= 0 and theta_batch >= 1")
        if not 0.0 <= self.d_init <= self.d_max < 1.0:
            raise ConfigError("need 0 <= d_init <= d_max < 1")
        if self.delta < 0:
            raise ConfigError("delta must be >= 0")
        return self

    @property
    def block_h(self):
        return self.h if self.conv_h is None else self.conv_h

    def lr(self, epoch):
        """Learning rate for 1-indexed ``epoch``: halved every ``lr_halving_period`` epochs."""
        return self.lr0 * 0.5 ** ((epoch - 1) // self.lr_halving_period)

    def warmup_factor(self, epoch):
        period = self.epochs_max if self.dropblock_warmup_epochs is None else self.dropblock_warmup_epochs
        if period <= 0:
            return 1.0
        return min(1.0, epoch / period)


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_error_pct: float
    test_error_pct: float
    reg_value: float
    bound_total: float
    wall_ms: float

    FIELDS = ("epoch", "train_loss", "train_error_pct", "test_error_pct", "reg_value", "bound_total", "wall_ms")


@dataclass
class TrainState:
    weights: list
    keep_states: list
    epoch: int = 0
    rngs: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    projections: list = field(default_factory=list)


def spawn_rngs(seed):
    init, shuffle, masks = np.random.SeedSequence(seed).spawn(3)
    return {
        "init": np.random.default_rng(init),
        "shuffle": np.random.default_rng(shuffle),
        "masks": np.random.default_rng(masks),
    }


# -- stage two ----------------------------------------------------------------


def _threshold(sigma, h, c):
    s = np.array(sigma, dtype=np.float64, copy=True)
    s[..., h:] = np.maximum(s[..., h:] - c, 0.0)
    return s


def svt_project(w_hat, h, c, backend=None):
    """argmin_W 1/2||W - w_hat||_F^2 + c * sum_{j>h} sigma_j(W): shrink the tail singular values by c."""
    if c < 0:
        raise ValueError(f"threshold c must be >= 0, got {c}")
    if h < 0:
        raise ValueError(f"h must be >= 0, got {h}")
    f = svd(w_hat, backend=backend)
    s = _threshold(f.sigma, h, c)
    return (f.u * s) @ f.v.T


def svt_project_batch(stack, h, c, backend=None):
    """:func:`svt_project` on every matrix of a (batch, p, q) stack; ``c`` may be per-matrix."""
    u, sigma, v = svd_batch(stack, compute_uv=True, backend=backend)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), (sigma.shape[0],))[:, None]
    s = _threshold(sigma, h, c)
    return np.einsum("bik,bk,bjk->bij", u, s, v)


def compute_c(lam, keep_state_prev):
    """Soft threshold ``lambda * ||theta^{l-1}||_2`` (keep norm 1 when the layer has no drop site)."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return lam * keep_norm(keep_state_prev)


def projectable_layers(net):
    """Dense layers before the output layer, and conv layers whose kernels are at least 2x2."""
    out = []
    wl = net.weight_layers
    for idx in wl:
        layer = net.layers[idx]
        if layer.kind == "dense" and idx != wl[-1]:
            out.append(idx)
        elif layer.kind == "conv" and min(layer.kernel_h, layer.kernel_w) > 1 and idx != wl[-1]:
            out.append(idx)
    return out


def project_weights(net, weights, keep_states, config, backend=None):
    """Apply stage two to every eligible layer; returns new weight list (inputs untouched)."""
    new = list(weights)
    for idx in projectable_layers(net):
        state = keep_states[idx] if keep_states is not None else None
        c = compute_c(config.lam, state)
        if c == 0.0:
            continue
        layer = net.layers[idx]
        if layer.kind == "dense":
            new[idx] = svt_project(weights[idx], config.h, c, backend=backend)
        else:
            cin, cout, p, q = weights[idx].shape
            blocks = svt_project_batch(weights[idx].reshape(cin * cout, p, q), config.block_h, c, backend=backend)
            new[idx] = blocks.reshape(cin, cout, p, q)
    return new


# -- keep-rate block ----------------------------------------------------------


def effective_states(keep_states, factor):
    """Apply the DropBlock warmup multiplier to every DropBlock drop rate."""
    if factor == 1.0:
        return list(keep_states)
    return [s.with_d(s.d * factor) if isinstance(s, DropBlockParams) else s for s in keep_states]


def _layer_tail(net, weights, idx, h_dense, h_block, backend):
    """Per-input-channel tail sums of layer idx (one entry for dense layers)."""
    w = weights[idx]
    if net.layers[idx].kind == "dense":
        sig = svd_batch(w[None], compute_uv=False, backend=backend)[1][0]
        return np.array([tail_from_sigma(sig, h_dense)])
    cin, cout, p, q = w.shape
    sig = svd_batch(w.reshape(cin * cout, p, q), compute_uv=False, backend=backend)[1]
    tails = np.array([tail_from_sigma(s, h_block) for s in sig]).reshape(cin, cout)
    return tails.sum(axis=1)


def keep_rate_objective(net, weights, keep_states, x, y_onehot, lam, h, h_block=None, factor=1.0, backend=None):
    """Mean expected-forward loss plus lambda * regularizer, as a function of the keep states."""
    h_block = h if h_block is None else h_block
    eff = effective_states(keep_states, factor)
    out, _ = forward_expected(net, weights, eff, x, backend=backend)
    total = loss(out, y_onehot)
    for idx in net.drop_sites:
        if eff[idx] is None:
            continue
        tails = _layer_tail(net, weights, idx, h, h_block, backend)
        total += lam * keep_norm(eff[idx]) * float(tails.sum())
    return total


def keep_rate_gradients(net, weights, keep_states, x, y_onehot, lam, h, h_block=None, factor=1.0, backend=None):
    """Gradient of :func:`keep_rate_objective` per drop site.

    Dense sites get an array shaped like theta; DropBlock sites get the scalar
    derivative with respect to the drop rate d.
    """
    h_block = h if h_block is None else h_block
    eff = effective_states(keep_states, factor)
    out, cache = forward_expected(net, weights, eff, x, backend=backend)
    grads = backward(net, weights, cache, y_onehot, keep_grads=True, backend=backend)
    result = [None] * len(net.layers)
    for idx in net.drop_sites:
        state = eff[idx]
        if state is None:
            continue
        tails = _layer_tail(net, weights, idx, h, h_block, backend)
        g_loss = grads.keep[idx]
        if isinstance(state, KeepRateVector):
            theta = state.theta
            nrm = float(np.linalg.norm(theta))
            g_reg = lam * float(tails.sum()) * theta / nrm if nrm > 0 else np.zeros_like(theta)
            result[idx] = g_loss + g_reg
        else:
            that = keep_prob_matrix(state, warn=False)
            dthat = keep_prob_matrix_grad_d(state)
            nrm = float(np.linalg.norm(that))
            dnorm = float(np.sum(that * dthat)) / nrm if nrm > 0 else 0.0
            g = float(np.sum(g_loss * dthat)) + lam * float(tails.sum()) * dnorm
            result[idx] = g * factor
    return result


def bcd_update_keep_rates(net, weights, keep_states, x, y_onehot, lr_theta, lam, h, h_block=None,
                          factor=1.0, d_max=D_MAX, backend=None):
    """One projected-gradient step on the keep-rate block with the weights held fixed."""
    grads = keep_rate_gradients(net, weights, keep_states, x, y_onehot, lam, h, h_block, factor, backend)
    new = list(keep_states)
    for idx in net.drop_sites:
        state = keep_states[idx]
        g = grads[idx]
        if state is None or g is None:
            continue
        if isinstance(state, KeepRateVector):
            new[idx] = KeepRateVector(np.clip(state.theta - lr_theta * g, THETA_MIN, 1.0))
        else:
            new[idx] = state.with_d(float(np.clip(state.d - lr_theta * g, 0.0, d_max)))
    return new


# -- driver -------------------------------------------------------------------


def error_pct(net, weights, keep_states, x, labels, backend=None):
    if len(x) == 0:
        return float("nan")
    pred = predict(net, weights, keep_states, x, backend=backend)
    return 100.0 * float(np.mean(pred != labels))


def input_bound(x):
    """Largest Frobenius norm over the examples of ``x``."""
    flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    return float(np.sqrt(np.max(np.sum(flat * flat, axis=1)))) if len(flat) else 0.0


def init_state(config, net):
    rngs = spawn_rngs(config.seed)
    weights = init_weights(net, rngs["init"])
    states = init_keep_states(net, d_init=config.d_init) if config.drops else [None] * len(net.layers)
    return TrainState(weights=weights, keep_states=states, rngs=rngs)


def _evaluate(config, net, state, train, test, n, B, backend):
    states = effective_states(state.keep_states, config.warmup_factor(max(state.epoch, 1)))
    spectra = layer_spectra(net, state.weights, backend=backend)
    reg, _ = reg_value(net, state.weights, states, config.h, spectra=_conv_h_spectra(net, spectra, config), drop=config.drops)
    bound = float("nan")
    if config.log_bound:
        delta = [config.delta] * net.depth
        bound = network_bound(net, state.weights, states, config.h, n, B, delta=delta, drop=config.drops,
                              spectra=spectra).total
    return reg, bound, states


def _conv_h_spectra(net, spectra, config):
    # reg_value takes one h; conv layers with a separate conv_h get their spectra pre-truncated
    if config.conv_h is None or config.conv_h == config.h:
        return spectra
    out = list(spectra)
    for idx in net.weight_layers:
        if net.layers[idx].kind == "conv":
            sig = np.array(spectra[idx], copy=True)
            shift = config.conv_h - config.h
            if shift > 0:
                sig = np.concatenate([sig[..., shift:], np.zeros(sig.shape[:-1] + (shift,))], axis=-1)
            else:
                pad = np.repeat(sig[..., :1], -shift, axis=-1)
                sig = np.concatenate([pad, sig], axis=-1)
            out[idx] = sig
    return out


def train_two_stage(config, net, train, test=None, state=None, callback=None, backend=None):
    """Run the two-stage optimisation; returns the final :class:`TrainState`.

    ``train`` and ``test`` are objects with ``x`` (examples), ``y`` (int labels)
    and ``num_classes``. ``callback(row, state)`` is invoked after every epoch.
    """
    config.validate()
    if len(train.x) == 0:
        raise ConfigError("training set is empty")
    if state is None:
        state = init_state(config, net)
    n = len(train.x)
    k = net.num_classes
    y_all = onehot(train.y, k)
    B = input_bound(train.x)
    rng_shuffle = state.rngs["shuffle"]
    rng_masks = state.rngs["masks"]
    has_sites = config.drops and any(state.keep_states[i] is not None for i in net.drop_sites)

    for _ in range(config.epochs_max):
        t0 = time.perf_counter()
        epoch = state.epoch + 1
        lr = config.lr(epoch)
        factor = config.warmup_factor(epoch)
        order = rng_shuffle.permutation(n)
        run_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = train.x[idx], y_all[idx]
            masks = None
            if has_sites:
                eff = effective_states(state.keep_states, factor)
                masks = sample_masks(net, eff, len(idx), rng_masks, backend=backend)
            out, cache = forward_stochastic(net, state.weights, masks, xb, backend=backend)
            batch_loss = loss(out, yb)
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, batch_loss)
            run_loss += batch_loss * len(idx)
            grads = backward(net, state.weights, cache, yb, backend=backend)
            for w_idx in net.weight_layers:
                state.weights[w_idx] = state.weights[w_idx] - lr * grads.weights[w_idx]
        if has_sites and config.theta_lr > 0:
            tb = order[: config.theta_batch]
            state.keep_states = bcd_update_keep_rates(
                net, state.weights, state.keep_states, train.x[tb], y_all[tb], config.theta_lr, config.lam,
                config.h, config.block_h, factor, config.d_max, backend=backend,
            )
        state.epoch = epoch

        if epoch >= config.k1 and epoch % config.m == 0 and config.lam > 0:
            reg_before, bound_before, eff = _evaluate(config, net, state, train, test, n, B, backend)
            state.weights = project_weights(net, state.weights, eff, config, backend=backend)
            state.projections.append({"epoch": epoch, "reg_before": reg_before, "bound_before": bound_before})

        reg, bound, eff = _evaluate(config, net, state, train, test, n, B, backend)
        if state.projections and state.projections[-1]["epoch"] == epoch:
            state.projections[-1].update(reg_after=reg, bound_after=bound)
        train_err = error_pct(net, state.weights, eff, train.x, train.y, backend)
        test_err = error_pct(net, state.weights, eff, test.x, test.y, backend) if test is not None else float("nan")
        wall = (time.perf_counter() - t0) * 1000.0 if config.record_wall_time else 0.0
        row = MetricsRow(epoch, run_loss / n, train_err, test_err, reg, bound, wall)
        state.history.append(row)
        if callback is not None:
            callback(row, state)
    return state


def config_dict(config):
    return asdict(config)
