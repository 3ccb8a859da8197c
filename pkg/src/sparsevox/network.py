"""Sparse residual UNet for binary signal/background site classification."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .sparse_ops import BatchNorm, ConfigError, Conv, Layer, ReLU
from .sparse_tensor import SparseTensor, concat_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_good: "Checkpoint"):
        self.epoch = epoch
        self.last_good = last_good
        super().__init__(f"non-finite loss in epoch {epoch}")


@dataclass
class UNetConfig:
    widths: tuple = (32, 64, 128, 256)
    encoder_blocks: tuple = (2, 3, 4, 6)
    decoder_blocks: tuple = (2, 2, 2, 2)
    stem_channels: int = 16
    kernel_size: int = 3
    down_kernel: int = 2
    in_channels: int = 1
    num_classes: int = 2

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.encoder_blocks = tuple(int(b) for b in self.encoder_blocks)
        self.decoder_blocks = tuple(int(b) for b in self.decoder_blocks)
        if not self.widths:
            raise ConfigError("need at least one level (depth >= 1)")
        if not len(self.widths) == len(self.encoder_blocks) == len(self.decoder_blocks):
            raise ConfigError("widths, encoder_blocks and decoder_blocks must have equal length")
        if min(self.widths) < 1 or self.stem_channels < 1:
            raise ConfigError("channel widths must be positive")
        if min(self.encoder_blocks + self.decoder_blocks) < 0:
            raise ConfigError("block counts must be non-negative")
        if self.kernel_size % 2 == 0:
            raise ConfigError("submanifold kernel size must be odd")

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def decoder_widths(self) -> tuple:
        return (self.stem_channels,) + self.widths[:-1]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    epochs: int = 10
    seed: int = 0
    class_weights: object = "inverse_frequency"  # "inverse_frequency", None, or a list
    loss: str = "cross_entropy"  # cross_entropy | dice
    dtype: str = "float32"
    checkpoint_every: int = 0
    patience: Optional[int] = None

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in ("cross_entropy", "dice"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")


# ---------------------------------------------------------------- modules


class ConvBNReLU(Layer):
    def __init__(self, c_in, c_out, kernel_size, stride=1, mode="submanifold", relu=True, dtype=np.float32):
        super().__init__()
        self.conv = Conv(c_in, c_out, kernel_size, stride, mode, bias=False, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype=dtype)
        self.act = ReLU() if relu else None

    def children(self):
        return [("conv", self.conv), ("bn", self.bn)]

    def forward(self, x, target=None):
        x = self.bn.forward(self.conv.forward(x, target))
        return self.act.forward(x) if self.act else x

    def backward(self, grad):
        if self.act:
            grad = self.act.backward(grad)
        return self.conv.backward(self.bn.backward(grad))


class ResBlock(Layer):
    """Two K^3 submanifold convs with norm/relu and an identity (or 1^3 projection) skip."""

    def __init__(self, c_in, c_out, kernel_size=3, dtype=np.float32):
        super().__init__()
        self.a = ConvBNReLU(c_in, c_out, kernel_size, dtype=dtype)
        self.b = ConvBNReLU(c_out, c_out, kernel_size, relu=False, dtype=dtype)
        self.proj = ConvBNReLU(c_in, c_out, 1, relu=False, dtype=dtype) if c_in != c_out else None
        self.act = ReLU()

    def children(self):
        kids = [("a", self.a), ("b", self.b)]
        return kids + [("proj", self.proj)] if self.proj else kids

    def forward(self, x):
        y = self.b.forward(self.a.forward(x))
        skip = self.proj.forward(x) if self.proj else x
        return self.act.forward(y.with_feats(y.feats + skip.feats))

    def backward(self, grad):
        grad = self.act.backward(grad)
        gx = self.a.backward(self.b.backward(grad))
        return gx + (self.proj.backward(grad) if self.proj else grad)


class Stage(Layer):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = list(blocks)

    def children(self):
        return [(str(i), b) for i, b in enumerate(self.blocks)]

    def forward(self, x):
        for b in self.blocks:
            x = b.forward(x)
        return x

    def backward(self, grad):
        for b in reversed(self.blocks):
            grad = b.backward(grad)
        return grad


class SparseUNet(Layer):
    """stem -> [down, res blocks] x depth -> [up, concat skip, res blocks] x depth -> 1^3 head."""

    def __init__(self, cfg: UNetConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        k = cfg.kernel_size
        self.stem = ConvBNReLU(cfg.in_channels, cfg.stem_channels, k, dtype=dtype)
        self.down, self.enc = [], []
        prev = cfg.stem_channels
        for w, n in zip(cfg.widths, cfg.encoder_blocks):
            self.down.append(ConvBNReLU(prev, w, cfg.down_kernel, 2, "strided", dtype=dtype))
            self.enc.append(Stage(ResBlock(w, w, k, dtype) for _ in range(n)))
            prev = w
        self.up, self.dec = [None] * cfg.depth, [None] * cfg.depth
        dws = cfg.decoder_widths
        for lvl in reversed(range(cfg.depth)):
            dw, skip_w = dws[lvl], dws[lvl]
            self.up[lvl] = ConvBNReLU(prev, dw, cfg.down_kernel, 2, "transposed", dtype=dtype)
            n = cfg.decoder_blocks[lvl]
            blocks = [ResBlock(dw + skip_w if i == 0 else dw, dw, k, dtype) for i in range(n)]
            # with zero blocks the concatenation still has to be folded back to dw channels
            self.dec[lvl] = Stage(blocks or [ConvBNReLU(dw + skip_w, dw, 1, dtype=dtype)])
            prev = dw
        self.head = Conv(cfg.stem_channels, cfg.num_classes, 1, bias=True, dtype=dtype)

    def children(self):
        kids = [("stem", self.stem)]
        for i in range(self.cfg.depth):
            kids += [(f"down{i}", self.down[i]), (f"enc{i}", self.enc[i])]
        for i in reversed(range(self.cfg.depth)):
            kids += [(f"up{i}", self.up[i]), (f"dec{i}", self.dec[i])]
        return kids + [("head", self.head)]

    def forward(self, x: SparseTensor) -> SparseTensor:
        if x.channels != self.cfg.in_channels:
            raise ConfigError(f"network expects {self.cfg.in_channels} input channels, got {x.channels}")
        x = x.with_feats(x.feats.astype(self.dtype, copy=False))
        x = self.stem.forward(x)
        skips = [x]
        for lvl in range(self.cfg.depth):
            x = self.enc[lvl].forward(self.down[lvl].forward(x))
            skips.append(x)
        self._split = {}
        for lvl in reversed(range(self.cfg.depth)):
            skip = skips[lvl]
            x = self.up[lvl].forward(x, target=skip)
            self._split[lvl] = x.channels
            x = self.dec[lvl].forward(x.with_feats(np.concatenate([x.feats, skip.feats], axis=1)))
        return self.head.forward(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad = self.head.backward(grad)
        skip_grads = {}
        for lvl in range(self.cfg.depth):
            grad = self.dec[lvl].backward(grad)
            split = self._split[lvl]
            skip_grads[lvl] = grad[:, split:]
            grad = self.up[lvl].backward(grad[:, :split])
        # grad is now w.r.t. the bottom encoder output
        for lvl in reversed(range(self.cfg.depth)):
            grad = self.down[lvl].backward(self.enc[lvl].backward(grad))
            grad = grad + skip_grads[lvl]
        return self.stem.backward(grad)


def count_parameters(net: Layer) -> int:
    return int(sum(layer.params[name].size for _, layer, name in net.named_parameters()))
def init_parameters(net: Layer, seed: int) -> None:
    """He-uniform conv weights in graph order; norms start at identity, biases at zero."""
    rng = np.random.default_rng(seed)
    for _, layer, name in net.named_parameters():
        arr = layer.params[name]
        if isinstance(layer, Conv) and name == "weight":
            bound = math.sqrt(6.0 / layer.fan_in)
            layer.params[name] = rng.uniform(-bound, bound, arr.shape).astype(arr.dtype)


def build_unet(cfg: UNetConfig, dtype="float32", seed: int = 0) -> SparseUNet:
    net = SparseUNet(cfg, np.dtype(dtype))
    init_parameters(net, seed)
    return net


# ---------------------------------------------------------------- loss


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray, class_weights=None) -> tuple:
    """Weighted mean cross-entropy, sum_i w_i * ce_i / sum_i w_i, and its gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"need one label per site: {labels.shape} vs {n} sites")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in 0..{c - 1}")
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = _log_softmax(logits)
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    total = w.sum()
    loss = -(w * logp[np.arange(n), labels]).sum() / total
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / total)[:, None]
    return float(loss), grad.astype(logits.dtype)


def dice_loss(logits: np.ndarray, labels: np.ndarray, smooth: float = 1.0) -> tuple:
    """1 - soft Dice of the signal-class probability, with gradient."""
    labels = np.asarray(labels)
    p = np.exp(_log_softmax(logits))
    y = (labels != 0).astype(np.float64)
    p1 = p[:, 1]
    inter, denom = (p1 * y).sum(), p1.sum() + y.sum() + smooth
    dice = (2 * inter + smooth) / denom
    g1 = -(2 * y * denom - (2 * inter + smooth)) / denom ** 2  # dL/dp1
    grad = -p * (g1 * p1)[:, None]
    grad[:, 1] += g1 * p1
    return float(1.0 - dice), grad.astype(logits.dtype)


def inverse_frequency_weights(labels_list: Sequence[np.ndarray], num_classes: int = 2) -> np.ndarray:
    counts = np.zeros(num_classes)
    for lab in labels_list:
        counts += np.bincount(np.asarray(lab, dtype=np.int64), minlength=num_classes)[:num_classes]
    counts = np.maximum(counts, 1)
    return counts.sum() / (num_classes * counts)


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, named: list) -> None:
        """``named``: (name, layer, attr) triples as from ``named_parameters``."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, layer, attr in named:
            p = layer.params[attr]
            g = layer.grads[attr]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            layer.params[attr] = (p - update).astype(p.dtype)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    unet: UNetConfig
    train: TrainConfig
    params: "OrderedDict[str, np.ndarray]"
    buffers: "OrderedDict[str, np.ndarray]"
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    rng_state: Optional[dict] = None
    class_weights: Optional[list] = None


def snapshot(net: SparseUNet, opt: Optional[Adam], train_cfg: TrainConfig, epoch: int, rng, class_weights) -> Checkpoint:
    params = OrderedDict((n, l.params[a].copy()) for n, l, a in net.named_parameters())
    buffers = OrderedDict((n, l.buffers[a].copy()) for n, l, a in net.named_buffers())
    return Checkpoint(
        net.cfg, train_cfg, params, buffers,
        {k: v.copy() for k, v in (opt.m if opt else {}).items()},
        {k: v.copy() for k, v in (opt.v if opt else {}).items()},
        opt.t if opt else 0, epoch,
        rng.bit_generator.state if rng is not None else None,
        None if class_weights is None else [float(w) for w in class_weights],
    )


def network_from_checkpoint(ckpt: Checkpoint) -> SparseUNet:
    net = SparseUNet(ckpt.unet, np.dtype(ckpt.train.dtype))
    for n, layer, attr in net.named_parameters():
        layer.params[attr] = ckpt.params[n].copy()
    for n, layer, attr in net.named_buffers():
        layer.buffers[attr] = ckpt.buffers[n].copy()
    return net.eval()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian arrays in graph order)."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    dtype = np.dtype(ckpt.train.dtype).newbyteorder("<")
    entries, chunks, offset = [], [], 0
    groups = [("param", ckpt.params), ("buffer", ckpt.buffers),
              ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)]
    for kind, arrays in groups:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "format": "sparsevox-checkpoint-1",
        "dtype": ckpt.train.dtype,
        "byte_order": "little",
        "unet": asdict(ckpt.unet),
        "train": asdict(ckpt.train),
        "epoch": ckpt.epoch,
        "adam_t": ckpt.adam_t,
        "rng_state": ckpt.rng_state,
        "class_weights": ckpt.class_weights,
        "payload": base.name + ".bin",
        "arrays": entries,
    }
    base.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(base.with_name(base.name + ".bin"), b"".join(chunks))
    _atomic_write(base.with_name(base.name + ".json"), json.dumps(manifest, indent=1).encode())
    return base.with_name(base.name + ".json")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest_path = path if path.suffix == ".json" else path.with_name(path.name + ".json")
    if path.suffix == ".bin":
        manifest_path = path.with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    payload = manifest_path.with_name(manifest["payload"]).read_bytes()
    dtype = np.dtype(manifest["dtype"]).newbyteorder("<")
    groups = {"param": OrderedDict(), "buffer": OrderedDict(), "adam_m": {}, "adam_v": {}}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=e["offset"])
        groups[e["kind"]][e["name"]] = arr.reshape(e["shape"]).astype(manifest["dtype"])
    return Checkpoint(
        UNetConfig(**manifest["unet"]), TrainConfig(**manifest["train"]),
        groups["param"], groups["buffer"], groups["adam_m"], groups["adam_v"],
        manifest["adam_t"], manifest["epoch"], manifest["rng_state"], manifest["class_weights"],
    )


# ---------------------------------------------------------------- training


def signal_dice(pred: np.ndarray, truth: np.ndarray) -> float:
    p, t = np.asarray(pred) != 0, np.asarray(truth) != 0
    denom = p.sum() + t.sum()
    return 1.0 if denom == 0 else float(2 * (p & t).sum() / denom)


def predict_logits(net: SparseUNet, t: SparseTensor) -> np.ndarray:
    was = net.training
    net.eval()
    try:
        return net.forward(t).feats
    finally:
        net.train(was)


def predict(model, t: SparseTensor) -> np.ndarray:
    """Per-site argmax class; ties resolve to the lower class id."""
    net = network_from_checkpoint(model) if isinstance(model, Checkpoint) else model
    return np.argmax(predict_logits(net, t), axis=1).astype(np.uint8)


class _BatchCache:
    """Concatenated batches keyed by sample indices, so kernel maps survive across epochs."""

    def __init__(self, samples, limit=256):
        self.samples = samples
        self.limit = limit
        self.store: "OrderedDict[tuple, tuple]" = OrderedDict()

    def get(self, idx: tuple) -> tuple:
        if idx in self.store:
            self.store.move_to_end(idx)
            return self.store[idx]
        if len(idx) == 1:
            t, lab = self.samples[idx[0]]
        else:
            t = concat_batch([self.samples[i][0] for i in idx])
            lab = np.concatenate([self.samples[i][1] for i in idx])
        item = (t, np.asarray(lab, dtype=np.int64))
        self.store[idx] = item
        if len(self.store) > self.limit:
            self.store.popitem(last=False)
        return item


def _binarize(labels) -> np.ndarray:
    return (np.asarray(labels) != 0).astype(np.int64)


def train(dataset: Sequence[tuple], train_cfg: TrainConfig, unet_cfg: UNetConfig,
          val: Optional[Sequence[tuple]] = None, resume: Optional[Checkpoint] = None,
          on_epoch: Optional[Callable[[dict], None]] = None,
          checkpoint_path=None) -> tuple:
    """Fit the UNet on (SparseTensor, labels) samples; labels are binarized to signal/background.

    Returns ``(checkpoint, history)`` where history holds one dict per epoch
    (epoch, loss, dice, accuracy, seconds). Dice/accuracy are measured on
    ``val`` in inference mode when given, else on the training batches.
    """
    if not dataset:
        raise ValueError("training set is empty")
    samples = [(t, _binarize(lab)) for t, lab in dataset]
    dtype = np.dtype(train_cfg.dtype)
    if resume is not None:
        net = network_from_checkpoint(resume)
        opt = Adam(train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
        opt.m = {k: v.copy() for k, v in resume.adam_m.items()}
        opt.v = {k: v.copy() for k, v in resume.adam_v.items()}
        opt.t = resume.adam_t
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch
    else:
        net = build_unet(unet_cfg, dtype, train_cfg.seed)
        opt = Adam(train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
        rng = np.random.default_rng(train_cfg.seed)
        start = 0
    net.train()

    cw = train_cfg.class_weights
    if cw == "inverse_frequency":
        cw = inverse_frequency_weights([lab for _, lab in samples], unet_cfg.num_classes)
    elif cw is not None:
        cw = np.asarray(cw, dtype=np.float64)

    named = net.named_parameters()
    batches = _BatchCache(samples)
    history = []
    best = (-1.0, None)
    stale = 0
    for epoch in range(start, train_cfg.epochs):
        last_good = snapshot(net, opt, train_cfg, epoch, rng, cw)
        t0 = time.perf_counter()
        order = rng.permutation(len(samples))
        losses, inter, psum, tsum, correct, total = [], 0, 0, 0, 0, 0
        for b in range(0, len(order), train_cfg.batch_size):
            idx = tuple(int(i) for i in order[b:b + train_cfg.batch_size])
            x, y = batches.get(idx)
            net.zero_grad()
            # overflow shows up as a non-finite loss, which is handled below
            with np.errstate(over="ignore", invalid="ignore"):
                logits = net.forward(x).feats
                if train_cfg.loss == "dice":
                    loss, g = dice_loss(logits, y)
                else:
                    loss, g = cross_entropy(logits, y, cw)
                if not np.isfinite(loss):
                    raise TrainingDiverged(epoch, last_good)
                net.backward(g)
                opt.step(named)
            losses.append(loss)
            pred = logits.argmax(axis=1)
            inter += int(((pred == 1) & (y == 1)).sum())
            psum += int((pred == 1).sum())
            tsum += int((y == 1).sum())
            correct += int((pred == y).sum())
            total += y.size
        if val:
            inter = psum = tsum = correct = total = 0
            for vt, vl in val:
                with np.errstate(over="ignore", invalid="ignore"):
                    pred = predict(net, vt).astype(np.int64)
                vl = _binarize(vl)
                inter += int(((pred == 1) & (vl == 1)).sum())
                psum += int((pred == 1).sum())
                tsum += int((vl == 1).sum())
                correct += int((pred == vl).sum())
                total += vl.size
            net.train()
        record = {
            "epoch": epoch + 1,
            "loss": float(np.mean(losses)),
            "dice": 1.0 if psum + tsum == 0 else 2 * inter / (psum + tsum),
            "accuracy": correct / total if total else 1.0,
            "seconds": time.perf_counter() - t0,
        }
        history.append(record)
        log.info("epoch %d loss %.5f dice %.4f (%.2fs)", record["epoch"], record["loss"],
                 record["dice"], record["seconds"])
        if on_epoch:
            on_epoch(record)
        if checkpoint_path and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(snapshot(net, opt, train_cfg, epoch + 1, rng, cw), checkpoint_path)
        if train_cfg.patience is not None and val:
            if record["dice"] > best[0]:
                best, stale = (record["dice"], snapshot(net, opt, train_cfg, epoch + 1, rng, cw)), 0
            else:
                stale += 1
                if stale >= train_cfg.patience:
                    log.info("early stop after epoch %d", epoch + 1)
                    return best[1], history
    ckpt = snapshot(net, opt, train_cfg, max(start, train_cfg.epochs), rng, cw)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt, history
