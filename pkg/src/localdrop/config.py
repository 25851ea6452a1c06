"""Run configuration: flat ``key = value`` files, flag overrides and model presets.

Recognised keys (``#`` starts a comment, blank lines are ignored)::

    dataset_kind      idx | cifar10-binary | csv
    train_images      IDX images, or the CIFAR/CSV training file
    train_labels      IDX labels (idx only)
    test_images       test split, same conventions (optional)
    test_labels
    model             fcn-small | zhai-cnn | path to a JSON network spec
    subset_size       number of training examples to keep; unset means min(10000, n),
                      a value larger than the dataset is an error
    test_subset_size  cap on test examples
    output_dir        where metrics.csv, weights.ldw and manifest.json go
    gcn, zca          preprocessing toggles (true / false)
    zca_eps           eigenvalue floor for ZCA
    block_size        DropBlock block size for conv presets
    keep_init         initial dense keep rate for presets
    lambda m h k1 lr0 lr_halving_period epochs batch_size theta_lr theta_batch
    seed drops d_init drop_rate_max dropblock_warmup_epochs conv_h delta
    record_wall_time log_bound backend

The ``LOCALDROP_SEED`` environment variable, when set, overrides ``seed``.
"""
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .net import LayerSpec, NetworkSpec
from .optim import ConfigError, TrainConfig

PRESETS = ("fcn-small", "zhai-cnn")
DATASET_KINDS = ("idx", "cifar10-binary", "csv")
DEFAULT_SUBSET = 10000

# config key -> TrainConfig field
TRAIN_KEYS = {
    "lambda": "lam",
    "m": "m",
    "h": "h",
    "k1": "k1",
    "lr0": "lr0",
    "lr_halving_period": "lr_halving_period",
    "epochs": "epochs_max",
    "batch_size": "batch_size",
    "theta_lr": "theta_lr",
    "theta_batch": "theta_batch",
    "seed": "seed",
    "drops": "drops",
    "d_init": "d_init",
    "drop_rate_max": "d_max",
    "dropblock_warmup_epochs": "dropblock_warmup_epochs",
    "conv_h": "conv_h",
    "delta": "delta",
    "record_wall_time": "record_wall_time",
    "log_bound": "log_bound",
}


@dataclass
class RunConfig:
    dataset_kind: str = "idx"
    train_images: str = None
    train_labels: str = None
    test_images: str = None
    test_labels: str = None
    model: str = "fcn-small"
    subset_size: int = None
    test_subset_size: int = None
    output_dir: str = "run"
    gcn: bool = False
    zca: bool = False
    zca_eps: float = 0.01
    block_size: int = 3
    keep_init: float = 0.8
    backend: str = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.train.validate()
        if self.dataset_kind not in DATASET_KINDS:
            raise ConfigError(f"dataset_kind must be one of {DATASET_KINDS}, got {self.dataset_kind!r}")
        if self.subset_size is not None and self.subset_size < 1:
            raise ConfigError("subset_size must be >= 1")
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ConfigError("block_size must be odd and positive")
        if not 0.05 <= self.keep_init <= 1.0:
            raise ConfigError("keep_init must lie in [0.05, 1]")
        if self.zca_eps < 0:
            raise ConfigError("zca_eps must be >= 0")
        if self.backend not in (None, "python", "cython"):
            raise ConfigError(f"backend must be python or cython, got {self.backend!r}")
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name}: {path} does not exist")
        if self.train_images is None:
            raise ConfigError("train_images is required")
        if self.dataset_kind == "idx" and self.train_labels is None:
            raise ConfigError("idx datasets need train_labels")
        if self.model not in PRESETS and not Path(self.model).exists():
            raise ConfigError(f"model must be a preset {PRESETS} or a spec file, got {self.model!r}")
        return self

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        out["train"] = {f.name: getattr(self.train, f.name) for f in fields(self.train)}
        return out


_RUN_TYPES = {f.name: f.type for f in fields(RunConfig) if f.name != "train"}
_INT_KEYS = {"subset_size", "test_subset_size", "block_size", "m", "h", "k1", "lr_halving_period", "epochs",
             "batch_size", "theta_batch", "seed", "dropblock_warmup_epochs", "conv_h"}
_FLOAT_KEYS = {"zca_eps", "keep_init", "lambda", "lr0", "theta_lr", "d_init", "drop_rate_max", "delta"}
_BOOL_KEYS = {"gcn", "zca", "drops", "record_wall_time", "log_bound"}


def _coerce(key, raw):
    if raw is None:
        return None
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    try:
        if key in _INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    if key in _BOOL_KEYS:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    return text


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _RUN_TYPES and key not in TRAIN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = val
    return values


def build_config(values, env=None):
    """RunConfig from a mapping of config keys (strings or typed values)."""
    env = os.environ if env is None else env
    run = RunConfig()
    train = TrainConfig()
    for key, raw in values.items():
        key = key.replace("-", "_")
        val = _coerce(key, raw)
        if key in TRAIN_KEYS:
            setattr(train, TRAIN_KEYS[key], val)
        elif key in _RUN_TYPES:
            setattr(run, key, val)
        else:
            raise ConfigError(f"unknown key {key!r}")
    if env.get("LOCALDROP_SEED"):
        try:
            train.seed = int(env["LOCALDROP_SEED"])
        except ValueError:
            raise ConfigError(f"LOCALDROP_SEED must be an integer, got {env['LOCALDROP_SEED']!r}") from None
    for name in ("lam", "m", "h", "epochs_max", "batch_size", "seed", "d_max", "delta", "lr0"):
        if getattr(train, name) is None:
            raise ConfigError(f"{name} may not be empty")
    run.train = train
    return run


def load_config(path=None, overrides=None, env=None):
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values, env)


# -- model presets ------------------------------------------------------------


def fcn_small(input_shape=(784,), num_classes=10, keep_init=0.8):
    """784-256-256-10 ReLU net with dropout on both hidden layers."""
    d = 1
    for s in input_shape:
        d *= s
    layers = [LayerSpec.dense(d, 256), LayerSpec.relu(),
              LayerSpec.dense(256, 256, drop=True, keep_init=keep_init), LayerSpec.relu(),
              LayerSpec.dense(256, num_classes, drop=True, keep_init=keep_init)]
    return NetworkSpec(layers, num_classes, (d,))


def zhai_cnn(input_shape=(3, 32, 32), num_classes=10, block_size=3, keep_init=0.8):
    """Three 3x3 conv layers (32/64/128 channels) each followed by ReLU and 2x2 max-pooling,
    then dense layers of 2048, 2048 and ``num_classes`` units.

    DropBlock sits on the inputs of the second and third conv layers, dropout on the
    dense inputs after the first.
    """
    c, hgt, wid = input_shape
    layers = []
    chans = (c, 32, 64, 128)
    for i in range(3):
        side = min(hgt, wid)
        drop = i > 0 and block_size <= side
        layers += [LayerSpec.conv(chans[i], chans[i + 1], 3, drop=drop, block_size=block_size),
                   LayerSpec.relu(), LayerSpec.maxpool(2)]
        hgt, wid = (hgt - 2) // 2, (wid - 2) // 2
    flat = 128 * hgt * wid
    layers += [LayerSpec.flatten(), LayerSpec.dense(flat, 2048), LayerSpec.relu(),
               LayerSpec.dense(2048, 2048, drop=True, keep_init=keep_init), LayerSpec.relu(),
               LayerSpec.dense(2048, num_classes, drop=True, keep_init=keep_init)]
    return NetworkSpec(layers, num_classes, tuple(input_shape))


def build_model(run, input_shape, num_classes):
    if run.model == "fcn-small":
        return fcn_small(input_shape, num_classes, run.keep_init)
    if run.model == "zhai-cnn":
        shape = tuple(input_shape)
        if len(shape) == 2:
            shape = (1,) + shape
        return zhai_cnn(shape, num_classes, run.block_size, run.keep_init)
    return NetworkSpec.from_dict(json.loads(Path(run.model).read_text()))
