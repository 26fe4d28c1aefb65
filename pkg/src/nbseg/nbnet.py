"""Nucleus-boundary encoder-decoder network.

Encoder stage ``s`` runs two 3x3 'same' convolutions with ``base * 2**s``
channels followed by a 2x2 max-pool; a bottleneck of two convolutions sits
below the last stage. Each decoder stage upsamples with a stride-2
transposed convolution, concatenates the matching encoder output and runs two
more 3x3 convolutions. A final 1x1 convolution produces class logits.
Every convolution is followed by SELU; every 3x3 convolution also by dropout.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensorcore as tc
from .augment import AugmentParams, random_augment
from .errors import CorruptCheckpointError, InvalidArgumentError, InvalidStateError
from .masks import BACKGROUND, BOUNDARY, INSIDE
from .tiler import loss_weight_map, sample_training_patches

log = logging.getLogger(__name__)

CLASS_SCHEMES = ("ternary", "binary_inside", "binary_boundary")


@dataclass
class NetworkConfig:
    input_size: int = 128
    depth: int = 4
    base_channels: int = 32
    dropout_rate: float = 0.2
    class_scheme: str = "ternary"
    seed: int = 0
    dtype: str = "float32"

    def validate(self):
        if self.depth < 0 or self.input_size < 1 or self.input_size % (2 ** self.depth):
            raise InvalidArgumentError(
                f"input_size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}"
            )
        if self.base_channels < 1:
            raise InvalidArgumentError("base_channels must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidArgumentError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.class_scheme not in CLASS_SCHEMES:
            raise InvalidArgumentError(f"class_scheme must be one of {CLASS_SCHEMES}, got {self.class_scheme!r}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgumentError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    @property
    def n_classes(self):
        return 3 if self.class_scheme == "ternary" else 2


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    patches_per_epoch: int = 64
    val_patches: int = 16
    elastic: bool = True
    rotate: bool = True
    flip: bool = True
    shift: bool = True
    rescale: bool = True
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgumentError("batch_size and epochs must be >= 1")
        if self.patches_per_epoch < 1:
            raise InvalidArgumentError("patches_per_epoch must be >= 1")
        return self

    def augment_params(self, base: AugmentParams | None = None) -> AugmentParams:
        base = base or AugmentParams()
        kw = asdict(base)
        kw.update(elastic=self.elastic, rotate=self.rotate, flip=self.flip, shift=self.shift, rescale=self.rescale)
        return AugmentParams(**kw)

    @property
    def any_augmentation(self):
        return any((self.elastic, self.rotate, self.flip, self.shift, self.rescale))


class Model:
    def __init__(self, config: NetworkConfig, params: dict):
        self.config = config
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def __repr__(self):
        return f"Model({self.config}, {self.parameter_count()} parameters)"


def stage_channels(config: NetworkConfig):
    return [config.base_channels * 2 ** s for s in range(config.depth + 1)]


def layer_specs(config: NetworkConfig):
    """(name, kind, k, c_in, c_out) for every weighted layer in forward order."""
    ch = stage_channels(config)
    specs = []
    cin = 3
    for s in range(config.depth):
        specs += [(f"enc{s}.conv1", "conv", 3, cin, ch[s]), (f"enc{s}.conv2", "conv", 3, ch[s], ch[s])]
        cin = ch[s]
    d = config.depth
    specs += [("bottleneck.conv1", "conv", 3, cin, ch[d]), ("bottleneck.conv2", "conv", 3, ch[d], ch[d])]
    for s in reversed(range(config.depth)):
        specs += [
            (f"dec{s}.up", "up", 2, ch[s + 1], ch[s]),
            (f"dec{s}.conv1", "conv", 3, 2 * ch[s], ch[s]),
            (f"dec{s}.conv2", "conv", 3, ch[s], ch[s]),
        ]
    specs.append(("head", "conv", 1, ch[0], config.n_classes))
    return specs


def build_network(config: NetworkConfig, rng: Optional[np.random.Generator] = None) -> Model:
    config.validate()
    rng = rng if rng is not None else tc.make_rng(config.seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, _, k, cin, cout in layer_specs(config):
        params[f"{name}.w"] = tc.glorot_uniform_init(k * k * cin, k * k * cout, (k, k, cin, cout), rng, dtype=dtype)
        params[f"{name}.b"] = tc.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return Model(config, params)


def forward_logits(model: Model, batch, training: bool = False, rng: Optional[np.random.Generator] = None) -> tc.Tensor:
    cfg = model.config
    x = np.asarray(batch.data if isinstance(batch, tc.Tensor) else batch)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[3] != 3:
        raise InvalidArgumentError(f"expected a (B, H, W, 3) batch, got {x.shape}")
    div = 2 ** cfg.depth
    if x.shape[1] % div or x.shape[2] % div:
        raise InvalidArgumentError(f"spatial size {x.shape[1]}x{x.shape[2]} is not divisible by {div}")
    if training and cfg.dropout_rate > 0 and rng is None:
        raise InvalidArgumentError("training-mode forward needs an rng for dropout")
    P = model.params
    h = tc.Tensor(x.astype(cfg.dtype, copy=False))

    def conv(h, name):
        h = tc.selu(tc.conv2d_same(h, P[f"{name}.w"], P[f"{name}.b"]))
        return tc.dropout(h, cfg.dropout_rate, rng, training)

    skips = []
    for s in range(cfg.depth):
        h = conv(conv(h, f"enc{s}.conv1"), f"enc{s}.conv2")
        skips.append(h)
        h = tc.max_pool2(h)
    h = conv(conv(h, "bottleneck.conv1"), "bottleneck.conv2")
    for s in reversed(range(cfg.depth)):
        h = tc.selu(tc.transposed_conv2(h, P[f"dec{s}.up.w"], P[f"dec{s}.up.b"]))
        h = tc.concat_channels([h, skips[s]])
        h = conv(conv(h, f"dec{s}.conv1"), f"dec{s}.conv2")
    return tc.conv2d_same(h, P["head.w"], P["head.b"])


def forward(model: Model, batch, training: bool = False, rng: Optional[np.random.Generator] = None) -> tc.Tensor:
    """Per-pixel class probabilities, same spatial size as the input."""
    return tc.softmax_channels(forward_logits(model, batch, training, rng))


def predict_probs(model: Model, batch) -> np.ndarray:
    return forward(model, batch, training=False).data


# ---------------------------------------------------------------------------
# targets for the class schemes


def scheme_target(target: np.ndarray, scheme: str) -> np.ndarray:
    """Collapse a ternary one-hot target to the channels a scheme trains on."""
    t = np.asarray(target)
    if scheme == "ternary":
        return t
    if scheme == "binary_inside":
        return np.stack([t[..., BACKGROUND] + t[..., BOUNDARY], t[..., INSIDE]], axis=-1)
    if scheme == "binary_boundary":
        return np.stack([t[..., BACKGROUND] + t[..., INSIDE], t[..., BOUNDARY]], axis=-1)
    raise InvalidArgumentError(f"unknown class scheme {scheme!r}")


def merge_binary_predictions(inside_probs: np.ndarray, boundary_probs: np.ndarray) -> np.ndarray:
    """Combine an inside model and a boundary model into ternary probabilities."""
    pi = np.asarray(inside_probs)[..., 1]
    pb = np.asarray(boundary_probs)[..., 1]
    return np.stack([(1 - pi) * (1 - pb), pb, pi * (1 - pb)], axis=-1)


def as_ternary_probs(probs: np.ndarray, scheme: str) -> np.ndarray:
    """Ternary view of a single model's output (missing class gets 0)."""
    p = np.asarray(probs)
    if scheme == "ternary":
        return p
    z = np.zeros(p.shape[:-1])
    if scheme == "binary_inside":
        return np.stack([p[..., 0], z, p[..., 1]], axis=-1)
    return np.stack([p[..., 0], p[..., 1], z], axis=-1)


# ---------------------------------------------------------------------------
# data


class PatchDataset:
    """Random crops drawn from whole images and their ternary targets."""

    def __init__(self, images: Sequence[np.ndarray], targets: Sequence[np.ndarray], patch_size: int):
        self.images = list(images)
        self.targets = list(targets)
        self.patch_size = patch_size
        if len(self.images) != len(self.targets):
            raise InvalidArgumentError("images and targets differ in length")

    def __len__(self):
        return len(self.images)

    def sample(self, count: int, rng: np.random.Generator):
        return sample_training_patches(self.images, self.targets, count, self.patch_size, rng)


class FixedPatches:
    """A fixed pool of (patch, target) pairs sampled with replacement."""

    def __init__(self, pairs):
        self.pairs = list(pairs)

    def __len__(self):
        return len(self.pairs)

    def sample(self, count: int, rng: np.random.Generator):
        idx = rng.integers(len(self.pairs), size=count)
        return [self.pairs[i] for i in idx]


def _as_dataset(d):
    if d is None or hasattr(d, "sample"):
        return d
    return FixedPatches(d)


def _batch_loss(model, pairs, weights, training, rng):
    x = np.stack([p for p, _ in pairs]).astype(model.config.dtype)
    t = np.stack([scheme_target(t, model.config.class_scheme) for _, t in pairs]).astype(model.config.dtype)
    probs = forward(model, x, training=training, rng=rng)
    return tc.weighted_cross_entropy(probs, t, weights)


def evaluate_loss(model: Model, pairs, weight_map: np.ndarray, batch_size: int = 8) -> float:
    total, n = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        total += float(_batch_loss(model, chunk, weight_map, False, None).data) * len(chunk)
        n += len(chunk)
    return total / max(n, 1)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float = float("nan")


def train(
    model: Model,
    dataset,
    tcfg: TrainConfig,
    weight_map: Optional[np.ndarray] = None,
    val_dataset=None,
    augment_params: Optional[AugmentParams] = None,
    callback: Optional[Callable[[EpochRecord], None]] = None,
    optimizer_state: Optional[tc.AdamState] = None,
):
    """Adam on the weighted cross-entropy; returns (model, history).

    Each epoch draws ``patches_per_epoch`` samples, augments each with its
    own stream derived from (seed, epoch, index) and runs mini-batches of
    ``batch_size``. ``history`` holds one :class:`EpochRecord` per epoch;
    validation loss is measured in inference mode on a fixed sample set.
    """
    tcfg.validate()
    dataset = _as_dataset(dataset)
    if dataset is None or len(dataset) == 0:
        raise InvalidStateError("training dataset is empty")
    size = model.config.input_size
    if weight_map is None:
        weight_map = loss_weight_map(size, size)
    weight_map = np.asarray(weight_map, dtype=model.config.dtype)
    aug = tcfg.augment_params(augment_params)
    params = model.parameters()
    state = optimizer_state or tc.init_adam(params, tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.epsilon)

    val_pairs = None
    val_dataset = _as_dataset(val_dataset)
    if val_dataset is not None and len(val_dataset):
        val_pairs = val_dataset.sample(tcfg.val_patches, tc.make_rng(tcfg.seed, 0x5EED, 1))

    history = []
    for epoch in range(1, tcfg.epochs + 1):
        samples = dataset.sample(tcfg.patches_per_epoch, tc.make_rng(tcfg.seed, epoch, 0))
        if tcfg.any_augmentation:
            samples = [random_augment(p, t, aug, tc.make_rng(tcfg.seed, epoch, 1, i)) for i, (p, t) in enumerate(samples)]
        drop_rng = tc.make_rng(tcfg.seed, epoch, 2)
        losses = []
        for i in range(0, len(samples), tcfg.batch_size):
            chunk = samples[i:i + tcfg.batch_size]
            for p in params:
                p.zero_grad()
            loss = _batch_loss(model, chunk, weight_map, True, drop_rng)
            loss.backward()
            tc.adam_step(params, [p.grad for p in params], state)
            losses.append((float(loss.data), len(chunk)))
        train_loss = sum(l * n for l, n in losses) / sum(n for _, n in losses)
        rec = EpochRecord(epoch, train_loss)
        if val_pairs is not None:
            rec.val_loss = evaluate_loss(model, val_pairs, weight_map, tcfg.batch_size)
        history.append(rec)
        log.info("epoch %d train_loss=%.5f val_loss=%.5f", epoch, rec.train_loss, rec.val_loss)
        if callback is not None:
            callback(rec)
    for p in params:
        p.zero_grad()
    return model, history


def history_csv(history) -> str:
    lines = ["epoch,train_loss,val_loss"]
    for r in history:
        val = "" if np.isnan(r.val_loss) else repr(r.val_loss)
        lines.append(f"{r.epoch},{r.train_loss!r},{val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"NBCK"
VERSION = 1


def _config_text(config: NetworkConfig) -> str:
    return "".join(f"{f.name}={getattr(config, f.name)}\n" for f in fields(NetworkConfig))


def _parse_config(text: str) -> NetworkConfig:
    types = {f.name: f.type for f in fields(NetworkConfig)}
    kw = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        k, _, v = line.partition("=")
        if k not in types:
            continue
        kw[k] = int(v) if types[k] in ("int", int) else float(v) if types[k] in ("float", float) else v
    return NetworkConfig(**kw)


def save_checkpoint(model: Model, path) -> None:
    cfg = _config_text(model.config).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(cfg))
    out += cfg
    out += struct.pack("<I", len(model.params))
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"truncated checkpoint while reading {what}", offset=self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Model:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise CorruptCheckpointError("bad magic, not an NBCK checkpoint", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}", offset=4)
    (clen,) = r.unpack("<I", "config length")
    start = r.pos
    try:
        config = _parse_config(r.take(clen, "config block").decode("utf-8"))
        config.validate()
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"bad config block: {exc}", offset=start) from exc
    model = build_network(config, tc.make_rng(0))
    (count,) = r.unpack("<I", "tensor count")
    if count != len(model.params):
        raise CorruptCheckpointError(f"checkpoint has {count} tensors, architecture needs {len(model.params)}", offset=r.pos - 4)
    dtype = np.dtype(config.dtype)
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{rank}I", f"extents of {name}")
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * n, f"data of {name}"), dtype="<f4").reshape(shape)
        if name not in model.params or model.params[name].shape != tuple(shape):
            raise CorruptCheckpointError(f"unexpected tensor {name!r} with shape {tuple(shape)}", offset=at)
        model.params[name] = tc.Tensor(data.astype(dtype), requires_grad=True)
    if r.pos != len(r.buf):
        raise CorruptCheckpointError(f"{len(r.buf) - r.pos} trailing bytes", offset=r.pos)
    return model
