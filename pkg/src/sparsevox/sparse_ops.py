"""Sparse convolution, batch norm and ReLU with explicit backward passes.

Convolution runs gather -> GEMM -> scatter once per kernel offset over a
:class:`KernelMap`. A pair ``(i, j)`` for offset ``d`` means input site
``i`` sits at ``out_coord[j] + d * input_stride``, so

    out[j] = bias + sum_d sum_{(i, j) in map[d]} in[i] @ W[d]

which is a cross-correlation, the same convention as dense conv layers.
Within one offset every output row and every input row appears at most
once, so plain fancy-indexed ``+=`` is a correct scatter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sparse_tensor import COORD_LIMIT, SparseTensor, offset_key_delta, pack_keys

MODES = ("submanifold", "strided", "transposed")


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """(K^3, 3) offsets as (dx, dy, dz), enumerated lexicographically in (dz, dy, dx).

    Odd kernels are centred (-K//2 .. K//2); even kernels span 0 .. K-1.
    """
    k = int(kernel_size)
    if k < 1:
        raise ConfigError("kernel size must be positive")
    r = np.arange(-(k // 2), k // 2 + 1) if k % 2 else np.arange(k)
    dz, dy, dx = np.meshgrid(r, r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel(), dz.ravel()], axis=1).astype(np.int64)


@dataclass
class KernelMap:
    offsets: np.ndarray
    in_rows: list
    out_rows: list
    out_coords: np.ndarray
    out_keys: np.ndarray
    in_stride: int
    out_stride: int
    mode: str
    n_in: int

    @property
    def n_out(self) -> int:
        return int(self.out_keys.shape[0])

    def pairs(self) -> set:
        """All (offset_index, in_row, out_row) triples; for tests and debugging."""
        return {
            (k, int(i), int(j))
            for k, (ii, jj) in enumerate(zip(self.in_rows, self.out_rows))
            for i, j in zip(ii, jj)
        }


def _check_range(coords: np.ndarray, reach: int) -> None:
    if coords.size and np.abs(coords[:, 1:]).max() + reach >= COORD_LIMIT:
        raise ValueError("coordinates too close to the packable limit for this kernel")


def _pairs_by_lookup(src: SparseTensor, out_keys: np.ndarray, offsets: np.ndarray, step: int) -> tuple:
    """For each offset, rows of ``src`` located at out + offset * step."""
    deltas = offset_key_delta(offsets * step)
    in_rows, out_rows = [], []
    all_out = np.arange(out_keys.shape[0], dtype=np.int64)
    for delta in deltas:
        rows = src.lookup_keys(out_keys + delta)
        hit = rows >= 0
        in_rows.append(rows[hit])
        out_rows.append(all_out[hit])
    return in_rows, out_rows


def build_kernel_map(t: SparseTensor, kernel_size: int = 3, stride: int = 1, mode: str = "submanifold",
                     out: Optional[SparseTensor] = None) -> KernelMap:
    """Enumerate (input row, output row) pairs for every kernel offset.

    * ``submanifold``: outputs are exactly the input sites; odd K, stride 1.
    * ``strided``: outputs at stride ``t.stride * stride``; by default the unique
      floor-downsampled input sites, or the sites of ``out`` if given (any
      output set is allowed, which gives generalized sparse convolution).
    * ``transposed``: ``t`` is the coarse tensor, ``out`` the finer target;
      the map is the strided fine->coarse map with roles swapped.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    offsets = kernel_offsets(kernel_size)
    reach = int(np.abs(offsets).max()) * t.stride * max(stride, 1) if offsets.size else 0
    _check_range(t.coords, reach)

    if mode == "submanifold":
        if kernel_size % 2 == 0:
            raise ConfigError("submanifold convolution needs an odd kernel size")
        if stride != 1:
            raise ConfigError("submanifold convolution has stride 1")
        in_rows, out_rows = _pairs_by_lookup(t, t.keys, offsets, t.stride)
        return KernelMap(offsets, in_rows, out_rows, t.coords, t.keys, t.stride, t.stride, mode, len(t))

    if mode == "strided":
        out_stride = t.stride * stride
        if out is None:
            cells = t.coords.copy()
            cells[:, 1:] = np.floor_divide(cells[:, 1:], out_stride) * out_stride
            out_keys, first = np.unique(pack_keys(cells), return_index=True)
            out_coords = cells[first]
        else:
            if out.stride != out_stride:
                raise ConfigError(f"output tensor stride {out.stride} != {out_stride}")
            out_keys, out_coords = out.keys, out.coords
        in_rows, out_rows = _pairs_by_lookup(t, out_keys, offsets, t.stride)
        return KernelMap(offsets, in_rows, out_rows, out_coords, out_keys, t.stride, out_stride, mode, len(t))

    if out is None:
        raise ConfigError("transposed convolution needs the target (finer) tensor")
    if out.stride * stride != t.stride:
        raise ConfigError(f"target stride {out.stride} x {stride} != input stride {t.stride}")
    fwd = build_kernel_map(out, kernel_size, stride, "strided", out=t)
    return KernelMap(offsets, fwd.out_rows, fwd.in_rows, out.coords, out.keys, t.stride, out.stride,
                     mode, len(t))


def cached_kernel_map(t: SparseTensor, kernel_size: int, stride: int, mode: str,
                      out: Optional[SparseTensor] = None) -> KernelMap:
    """``build_kernel_map`` memoized on the coordinate-set cache shared by derived tensors."""
    if mode == "submanifold":
        key = ("sub", kernel_size)
        if key not in t.cache:
            t.cache[key] = build_kernel_map(t, kernel_size, 1, mode)
        return t.cache[key]
    if mode == "strided" and out is None:
        key = ("down", kernel_size, stride)
        if key not in t.cache:
            kmap = build_kernel_map(t, kernel_size, stride, mode)
            t.cache[key] = (kmap, {})
        return t.cache[key][0]
    if mode == "transposed":
        entry = out.cache.get(("down", kernel_size, stride))
        if entry is not None and entry[0].out_keys is t.keys:
            key = ("up", kernel_size, stride)
            if key not in out.cache:
                fwd = entry[0]
                out.cache[key] = KernelMap(fwd.offsets, fwd.out_rows, fwd.in_rows, out.coords, out.keys,
                                           t.stride, out.stride, mode, len(t))
            return out.cache[key]
    return build_kernel_map(t, kernel_size, stride, mode, out)


def downsampled_cache(t: SparseTensor, kernel_size: int, stride: int) -> dict:
    """Cache dict to attach to the output of a default strided conv of ``t``."""
    return t.cache[("down", kernel_size, stride)][1]


# ---------------------------------------------------------------- functional ops


def conv_forward(feats: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray], kmap: KernelMap) -> np.ndarray:
    if feats.shape[0] != kmap.n_in:
        raise ShapeError(f"{feats.shape[0]} input rows, map expects {kmap.n_in}")
    if weight.shape[0] != len(kmap.offsets) or weight.shape[1] != feats.shape[1]:
        raise ShapeError(
            f"weight shape {weight.shape} incompatible with {len(kmap.offsets)} offsets x {feats.shape[1]} channels"
        )
    out = np.zeros((kmap.n_out, weight.shape[2]), dtype=np.result_type(feats, weight))
    for k, (ii, jj) in enumerate(zip(kmap.in_rows, kmap.out_rows)):
        if ii.size:
            out[jj] += feats[ii] @ weight[k]
    if bias is not None:
        out += bias
    return out


def conv_backward(grad_out: np.ndarray, feats: np.ndarray, weight: np.ndarray, kmap: KernelMap,
                  need_input_grad: bool = True) -> tuple:
    """Return (grad_feats, grad_weight, grad_bias); exact transposes of :func:`conv_forward`."""
    if grad_out.shape != (kmap.n_out, weight.shape[2]):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(kmap.n_out, weight.shape[2])}")
    grad_w = np.zeros_like(weight)
    grad_in = np.zeros_like(feats) if need_input_grad else None
    for k, (ii, jj) in enumerate(zip(kmap.in_rows, kmap.out_rows)):
        if not ii.size:
            continue
        g = grad_out[jj]
        grad_w[k] = feats[ii].T @ g
        if need_input_grad:
            grad_in[ii] += g @ weight[k].T
    return grad_in, grad_w, grad_out.sum(axis=0)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


# ---------------------------------------------------------------- layers


class Layer:
    """Minimal stateful layer: ``params``/``grads``/``buffers`` dicts and forward caches."""

    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}
        self.buffers: dict = {}
        self.training = True

    def children(self) -> list:
        return []

    def named_parameters(self, prefix: str = "") -> list:
        out = [(prefix + name, self, name) for name in self.params]
        for cname, child in self.children():
            out.extend(child.named_parameters(f"{prefix}{cname}."))
        return out

    def named_buffers(self, prefix: str = "") -> list:
        out = [(prefix + name, self, name) for name in self.buffers]
        for cname, child in self.children():
            out.extend(child.named_buffers(f"{prefix}{cname}."))
        return out

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def zero_grad(self) -> None:
        for name, arr in self.params.items():
            self.grads[name] = np.zeros_like(arr)
        for _, child in self.children():
            child.zero_grad()


class Conv(Layer):
    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, stride: int = 1,
                 mode: str = "submanifold", bias: bool = True, dtype=np.float32):
        super().__init__()
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        if mode == "submanifold" and (kernel_size % 2 == 0 or stride != 1):
            raise ConfigError("submanifold convolution needs odd K and stride 1")
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size, self.stride, self.mode = kernel_size, stride, mode
        self.params["weight"] = np.zeros((kernel_size ** 3, c_in, c_out), dtype=dtype)
        if bias:
            self.params["bias"] = np.zeros(c_out, dtype=dtype)
        self._x = None
        self._map = None

    @property
    def fan_in(self) -> int:
        return self.kernel_size ** 3 * self.c_in

    def forward(self, x: SparseTensor, target: Optional[SparseTensor] = None) -> SparseTensor:
        if x.channels != self.c_in:
            raise ShapeError(f"expected {self.c_in} input channels, got {x.channels}")
        kmap = cached_kernel_map(x, self.kernel_size, self.stride, self.mode, target)
        out = conv_forward(x.feats, self.params["weight"], self.params.get("bias"), kmap)
        self._x, self._map = x, kmap
        if self.mode == "submanifold":
            return x.with_feats(out)
        if self.mode == "transposed":
            return target.with_feats(out)
        cache = downsampled_cache(x, self.kernel_size, self.stride) if target is None else None
        return SparseTensor(kmap.out_coords, out, kmap.out_stride, _keys=kmap.out_keys, _cache=cache)

    def backward(self, grad: np.ndarray, need_input_grad: bool = True) -> Optional[np.ndarray]:
        gi, gw, gb = conv_backward(grad, self._x.feats, self.params["weight"], self._map, need_input_grad)
        self.grads["weight"] = self.grads.get("weight", 0) + gw
        if "bias" in self.params:
            self.grads["bias"] = self.grads.get("bias", 0) + gb
        return gi


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


class BatchNorm(Layer):
    """Per-channel normalization over all active sites of the batch."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    @property
    def state(self) -> BatchNormState:
        return BatchNormState(self.params["gamma"], self.params["beta"], self.buffers["running_mean"],
                              self.buffers["running_var"], self.momentum, self.eps)

    def forward(self, x: SparseTensor) -> SparseTensor:
        f = x.feats
        if f.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {f.shape[1]}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        if self.training:
            n = f.shape[0]
            if n == 0:
                raise ValueError("batch norm in training mode needs at least one active site")
            mean = f.mean(axis=0)
            centered = f - mean
            var = (centered * centered).mean(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = centered * inv_std
            m = self.momentum
            unbiased = var * n / (n - 1) if n > 1 else var
            self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(f.dtype)
            self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(f.dtype)
        else:
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            xhat = (f - self.buffers["running_mean"]) * inv_std
        self._cache = (xhat, inv_std, self.training)
        return x.with_feats((xhat * gamma + beta).astype(f.dtype))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        xhat, inv_std, training = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = self.grads.get("gamma", 0) + (grad * xhat).sum(axis=0)
        self.grads["beta"] = self.grads.get("beta", 0) + grad.sum(axis=0)
        dxhat = grad * gamma
        if not training:
            return dxhat * inv_std
        n = grad.shape[0]
        return (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


def batch_norm(x: SparseTensor, state: BatchNormState, training: bool) -> SparseTensor:
    """Functional batch norm; updates ``state`` running statistics in place when training."""
    layer = BatchNorm(len(state.gamma), state.momentum, state.eps, dtype=x.dtype)
    layer.params.update(gamma=state.gamma, beta=state.beta)
    layer.buffers.update(running_mean=state.running_mean, running_var=state.running_var)
    layer.train(training)
    out = layer.forward(x)
    state.running_mean = layer.buffers["running_mean"]
    state.running_var = layer.buffers["running_var"]
    return out


class ReLU(Layer):
    def forward(self, x: SparseTensor) -> SparseTensor:
        self._x = x.feats
        return x.with_feats(relu_forward(x.feats))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return relu_backward(grad, self._x)


def relu(x: SparseTensor) -> SparseTensor:
    return x.with_feats(relu_forward(x.feats))
