"""Shared fixtures for the test modules: small networks and finite differences."""
from pathlib import Path

import numpy as np

from localdrop.bound import BoundInputs, LayerTerms
from localdrop.drop import KeepRateVector
from localdrop.net import LayerSpec, NetworkSpec, forward_expected

DATA = Path(__file__).resolve().parent / "data"
MNIST = {
    "train_images": DATA / "mnist5k-train-images-idx3-ubyte.gz",
    "train_labels": DATA / "mnist5k-train-labels-idx1-ubyte.gz",
    "test_images": DATA / "mnist5k-test-images-idx3-ubyte.gz",
    "test_labels": DATA / "mnist5k-test-labels-idx1-ubyte.gz",
}
FD_STEP = 1e-5

# criterion number -> (passed, detail); printed by conftest at the end of the session
ACCEPTANCE = {}


def dense_6543(drop=True):
    layers = [
        LayerSpec.dense(6, 5, drop=drop), LayerSpec.relu(),
        LayerSpec.dense(5, 4, drop=drop), LayerSpec.relu(),
        LayerSpec.dense(4, 3, drop=drop),
    ]
    return NetworkSpec(layers, 3, (6,))


def conv_net(drop=True, block_size=3, pool=False):
    """1x8x8 input -> 4 channels of 3x3 kernels -> dense; optionally with a 2x2 max-pool."""
    layers = [LayerSpec.conv(1, 4, 3, drop=drop, block_size=block_size), LayerSpec.relu()]
    flat = 4 * 6 * 6
    if pool:
        layers.append(LayerSpec.maxpool(2))
        flat = 4 * 3 * 3
    layers += [LayerSpec.flatten(), LayerSpec.dense(flat, 3, drop=drop)]
    return NetworkSpec(layers, 3, (1, 8, 8))


def net_332(drop=True):
    layers = [LayerSpec.dense(3, 3, drop=drop), LayerSpec.relu(), LayerSpec.dense(3, 2, drop=drop)]
    return NetworkSpec(layers, 2, (3,))


def random_keep_rates(net, rng, low=0.3):
    states = []
    for idx, layer in enumerate(net.layers):
        if layer.drop_attached and layer.kind == "dense":
            states.append(KeepRateVector(rng.uniform(low, 1.0, layer.in_units)))
        else:
            states.append(None)
    return states


def central_difference(f, x, step=FD_STEP):
    """Central-difference gradient of scalar ``f`` at array ``x`` (x is restored afterwards)."""
    g = np.zeros_like(x)
    for ix in np.ndindex(x.shape):
        old = x[ix]
        x[ix] = old + step
        fp = f()
        x[ix] = old - step
        fm = f()
        x[ix] = old
        g[ix] = (fp - fm) / (2 * step)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def relu_margin(net, weights, states, x):
    """Smallest |input| to any ReLU; central differences are unreliable when it is below the step."""
    _, cache = forward_expected(net, weights, states, x)
    vals = [np.abs(cache.inputs[i]).min() for i, layer in enumerate(net.layers) if layer.kind == "relu"]
    return min(vals) if vals else np.inf


def random_fixture(rng, channels=True):
    L = int(rng.integers(1, 5))
    fx = {"k": int(rng.integers(1, 11)), "n": int(rng.integers(1, 1000)), "B": float(rng.uniform(0.1, 30)),
          "delta": rng.uniform(0.1, 2, L).tolist(), "area": [], "norms": [], "tails": []}
    for _ in range(L):
        cin = int(rng.integers(1, 4)) if channels else 1
        cout = int(rng.integers(1, 4)) if channels else 1
        fx["area"].append(float(cin * cout * rng.integers(1, 10)))
        fx["norms"].append(rng.uniform(0.1, 3, cin).tolist())
        fx["tails"].append(rng.uniform(0, 1.5, (cin, cout)).tolist())
    return fx


def to_inputs(fx):
    layers = []
    for norms, tails, area in zip(fx["norms"], fx["tails"], fx["area"]):
        tails = np.array(tails)
        layers.append(LayerTerms(tail=float(tails.sum()), keep_norm=norms[0], area=area,
                                 channel_keep_norms=np.array(norms), block_tails=tails))
    return BoundInputs(fx["k"], fx["n"], fx["B"], layers, list(fx["delta"]))


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)
