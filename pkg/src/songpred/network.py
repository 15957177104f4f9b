"""The learnable model: layer aggregation, shared trunk, per-task heads.

Everything runs on float64 numpy arrays with hand-written forward and
backward passes. Each trunk layer and each head hidden layer computes
linear -> batch norm -> GELU (exact erf form) -> dropout (inverted
scaling). Head output layers are plain linear projections; the logit is
squashed into the task's range, 100*sigmoid(logit) for the two popularity
tasks and 1 + 4*sigmoid(logit) for the five aesthetic tasks.

Batch norm uses epsilon 1e-5 and running-stat momentum 0.1
(running <- 0.9*running + 0.1*batch) with the biased variance estimator.
Train-phase forward updates running statistics in place; eval-phase
forward is a pure function of (params, input).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.special import erf, expit

from .errors import DimensionError, EmbeddingFormatError, NumericError
from .ioutil import atomic_write_bytes

TASK_NAMES = ("streams", "likes", "coherence", "musicality",
              "memorability", "clarity", "naturalness")
POPULARITY_TASKS = TASK_NAMES[:2]

CHECKPOINT_MAGIC = b"APEXMDL1"
CHECKPOINT_VERSION = 1

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx GELU(x) = Phi(x) + x * phi(x)."""
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def task_output_range(task_index: int) -> tuple[float, float]:
    """(offset, span) of the sigmoid output scaling for one task."""
    return (0.0, 100.0) if task_index < 2 else (1.0, 4.0)


@dataclass(frozen=True)
class ArchConfig:
    trunk_depth: int = 2
    task_mode: str = "full"            # "popularity" (2 heads) or "full" (7 heads)
    trunk_dropout: float = 0.3
    head_dropout: float = 0.1
    input_dim: int = 768
    trunk_dims: Optional[tuple[int, ...]] = None  # override for reduced test models
    head_hidden: tuple[int, int] = (128, 64)

    def __post_init__(self):
        if self.trunk_depth not in (2, 3):
            raise ValueError(f"trunk_depth must be 2 or 3, got {self.trunk_depth}")
        if self.task_mode not in ("popularity", "full"):
            raise ValueError(f"unknown task_mode {self.task_mode!r}")
        for rate in (self.trunk_dropout, self.head_dropout):
            if not (0.0 <= rate < 1.0):
                raise ValueError(f"dropout rate {rate} outside [0, 1)")
        if self.trunk_dims is not None and len(self.trunk_dims) != self.trunk_depth:
            raise ValueError("trunk_dims length must equal trunk_depth")

    @property
    def resolved_trunk_dims(self) -> tuple[int, ...]:
        if self.trunk_dims is not None:
            return self.trunk_dims
        return (512, 256) if self.trunk_depth == 2 else (512, 384, 256)

    @property
    def task_names(self) -> tuple[str, ...]:
        return POPULARITY_TASKS if self.task_mode == "popularity" else TASK_NAMES

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)


@dataclass
class LayerBN:
    """One linear layer plus its batch-norm state."""

    w: np.ndarray         # (out, in)
    b: np.ndarray         # (out,)
    gamma: np.ndarray
    beta: np.ndarray
    run_mean: np.ndarray
    run_var: np.ndarray


@dataclass
class HeadParams:
    hidden: list[LayerBN]
    out_w: np.ndarray     # (1, last_hidden)
    out_b: np.ndarray     # (1,)


@dataclass
class ModelParams:
    arch: ArchConfig
    agg_w: np.ndarray     # (4,) layer-aggregation weights
    agg_b: np.ndarray     # () shared bias
    trunk: list[LayerBN]
    heads: list[HeadParams]
    eta: np.ndarray       # (n_tasks,) log task variances for uncertainty loss

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """All parameter arrays (including running stats) in a fixed order."""
        yield "agg_w", self.agg_w
        yield "agg_b", self.agg_b
        for i, layer in enumerate(self.trunk):
            yield from _layer_arrays(f"trunk.{i}", layer)
        for t, head in enumerate(self.heads):
            for i, layer in enumerate(head.hidden):
                yield from _layer_arrays(f"heads.{t}.hidden.{i}", layer)
            yield f"heads.{t}.out_w", head.out_w
            yield f"heads.{t}.out_b", head.out_b
        yield "eta", self.eta

    def learnable_names(self) -> list[str]:
        return [name for name, _ in self.named_arrays()
                if not name.endswith(("run_mean", "run_var"))]

    def decayed_names(self) -> list[str]:
        """Linear weights and biases; batch-norm and eta are never decayed."""
        return [name for name in self.learnable_names()
                if name.endswith((".w", ".b", "out_w", "out_b", "agg_w", "agg_b"))]

    def copy(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            agg_w=self.agg_w.copy(),
            agg_b=self.agg_b.copy(),
            trunk=[_copy_layer(l) for l in self.trunk],
            heads=[HeadParams(hidden=[_copy_layer(l) for l in h.hidden],
                              out_w=h.out_w.copy(), out_b=h.out_b.copy())
                   for h in self.heads],
            eta=self.eta.copy(),
        )


def _layer_arrays(prefix: str, layer: LayerBN) -> Iterator[tuple[str, np.ndarray]]:
    yield f"{prefix}.w", layer.w
    yield f"{prefix}.b", layer.b
    yield f"{prefix}.gamma", layer.gamma
    yield f"{prefix}.beta", layer.beta
    yield f"{prefix}.run_mean", layer.run_mean
    yield f"{prefix}.run_var", layer.run_var


def _copy_layer(layer: LayerBN) -> LayerBN:
    return LayerBN(w=layer.w.copy(), b=layer.b.copy(), gamma=layer.gamma.copy(),
                   beta=layer.beta.copy(), run_mean=layer.run_mean.copy(),
                   run_var=layer.run_var.copy())


def _init_layer(rng: np.random.Generator, n_in: int, n_out: int) -> LayerBN:
    bound = np.sqrt(1.0 / n_in)
    return LayerBN(
        w=rng.uniform(-bound, bound, size=(n_out, n_in)),
        b=np.zeros(n_out),
        gamma=np.ones(n_out),
        beta=np.zeros(n_out),
        run_mean=np.zeros(n_out),
        run_var=np.ones(n_out),
    )


def init_model(arch: ArchConfig, seed: int) -> ModelParams:
    """Fan-in uniform weights, zero biases, identity batch norm, eta = 0."""
    rng = np.random.default_rng(seed)
    dims = (arch.input_dim,) + arch.resolved_trunk_dims
    trunk = [_init_layer(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    heads = []
    for _ in range(arch.n_tasks):
        hdims = (dims[-1],) + arch.head_hidden
        hidden = [_init_layer(rng, hdims[i], hdims[i + 1]) for i in range(len(hdims) - 1)]
        bound = np.sqrt(1.0 / hdims[-1])
        heads.append(HeadParams(
            hidden=hidden,
            out_w=rng.uniform(-bound, bound, size=(1, hdims[-1])),
            out_b=np.zeros(1),
        ))
    return ModelParams(
        arch=arch,
        agg_w=np.full(4, 0.25),
        agg_b=np.zeros(()),
        trunk=trunk,
        heads=heads,
        eta=np.zeros(arch.n_tasks),
    )


def aggregate_layers(segment: np.ndarray, weights: np.ndarray, bias: float) -> np.ndarray:
    """Collapse a (4, dim) per-layer embedding into one vector:
    out_d = sum_l weights_l * segment[l, d] + bias."""
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 2 or segment.shape[0] != 4:
        raise DimensionError(f"expected (4, dim) segment, got {segment.shape}")
    return np.asarray(weights, dtype=np.float64) @ segment + bias


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class _LayerCache:
    x: np.ndarray          # layer input
    xhat: np.ndarray       # normalized pre-activation
    invstd: np.ndarray     # 1/sqrt(var + eps), batch or running depending on phase
    u: np.ndarray          # batch-norm output (GELU input)
    mask: Optional[np.ndarray]
    rate: float


@dataclass
class ForwardCache:
    params: ModelParams
    phase: str
    batch: np.ndarray              # (B, 4, input_dim)
    agg_out: np.ndarray            # (B, input_dim)
    trunk: list[_LayerCache] = field(default_factory=list)
    heads: list[list[_LayerCache]] = field(default_factory=list)
    head_inputs: list[np.ndarray] = field(default_factory=list)   # final hidden per head
    sigmoids: list[np.ndarray] = field(default_factory=list)      # sigma(logit) per task


def _layer_forward(layer: LayerBN, x: np.ndarray, phase: str, rate: float,
                   rng: Optional[np.random.Generator], where: str) -> tuple[np.ndarray, _LayerCache]:
    z = x @ layer.w.T + layer.b
    if phase == "train":
        mu = z.mean(axis=0)
        var = z.var(axis=0)  # biased
        invstd = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mu) * invstd
        layer.run_mean *= 1.0 - BN_MOMENTUM
        layer.run_mean += BN_MOMENTUM * mu
        layer.run_var *= 1.0 - BN_MOMENTUM
        layer.run_var += BN_MOMENTUM * var
    else:
        invstd = 1.0 / np.sqrt(layer.run_var + BN_EPS)
        xhat = (z - layer.run_mean) * invstd
    u = layer.gamma * xhat + layer.beta
    g = gelu(u)
    mask = None
    if phase == "train" and rate > 0.0:
        mask = rng.random(g.shape) >= rate
        out = g * mask / (1.0 - rate)
    else:
        out = g
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite activations in {where}")
    return out, _LayerCache(x=x, xhat=xhat, invstd=invstd, u=u, mask=mask, rate=rate)


def forward(params: ModelParams, batch: np.ndarray, phase: str = "eval",
            rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, ForwardCache]:
    """Predictions (B, n_tasks) plus the cache backward needs.

    Train phase normalizes with batch statistics (B >= 2 required), draws
    dropout masks from `rng` and updates running statistics in place.
    Eval phase uses running statistics and applies no dropout.
    """
    arch = params.arch
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[1] != 4 or batch.shape[2] != arch.input_dim:
        raise DimensionError(f"expected (B, 4, {arch.input_dim}) batch, got {batch.shape}")
    if phase not in ("train", "eval"):
        raise ValueError(f"unknown phase {phase!r}")
    if phase == "train" and batch.shape[0] < 2:
        raise ValueError("train phase needs B >= 2 for batch statistics")
    if phase == "train" and rng is None and (arch.trunk_dropout > 0 or arch.head_dropout > 0):
        raise ValueError("train phase with dropout needs an rng")

    h = np.einsum("l,bld->bd", params.agg_w, batch) + params.agg_b
    cache = ForwardCache(params=params, phase=phase, batch=batch, agg_out=h)

    for i, layer in enumerate(params.trunk):
        h, lc = _layer_forward(layer, h, phase, arch.trunk_dropout, rng, f"trunk layer {i}")
        cache.trunk.append(lc)

    preds = np.empty((batch.shape[0], arch.n_tasks))
    for t, head in enumerate(params.heads):
        ht = h
        layer_caches = []
        for i, layer in enumerate(head.hidden):
            ht, lc = _layer_forward(layer, ht, phase, arch.head_dropout, rng,
                                    f"head {arch.task_names[t]} layer {i}")
            layer_caches.append(lc)
        logit = (ht @ head.out_w.T + head.out_b)[:, 0]
        sig = expit(logit)
        lo, span = task_output_range(t)
        preds[:, t] = lo + span * sig
        cache.heads.append(layer_caches)
        cache.head_inputs.append(ht)
        cache.sigmoids.append(sig)
    if not np.all(np.isfinite(preds)):
        raise NumericError("non-finite predictions")
    return preds, cache


def _layer_backward(layer: LayerBN, lc: _LayerCache, dout: np.ndarray,
                    grads: dict, prefix: str) -> np.ndarray:
    if lc.mask is not None:
        dout = dout * lc.mask / (1.0 - lc.rate)
    du = dout * gelu_grad(lc.u)
    grads[f"{prefix}.gamma"] = (du * lc.xhat).sum(axis=0)
    grads[f"{prefix}.beta"] = du.sum(axis=0)
    dxhat = du * layer.gamma
    b = dxhat.shape[0]
    # train-mode batch-norm backward: gradients flow through batch mean/var
    dz = (lc.invstd / b) * (b * dxhat - dxhat.sum(axis=0)
                            - lc.xhat * (dxhat * lc.xhat).sum(axis=0))
    grads[f"{prefix}.w"] = dz.T @ lc.x
    grads[f"{prefix}.b"] = dz.sum(axis=0)
    return dz @ layer.w


def backward(params: ModelParams, cache: ForwardCache,
             loss_grads: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the total loss for every learnable array.

    `loss_grads` holds d(loss)/d(prediction) per example and task, shape
    (B, n_tasks), already scaled by the loss strategy. The eta slot is
    returned zero-filled; the loss combiner owns d(loss)/d(eta).
    """
    if cache.params is not params:
        raise ValueError("cache was produced by a different ModelParams instance")
    if cache.phase != "train":
        raise ValueError("backward requires a train-phase cache")
    arch = params.arch
    loss_grads = np.asarray(loss_grads, dtype=np.float64)
    if loss_grads.shape != (cache.batch.shape[0], arch.n_tasks):
        raise DimensionError(
            f"loss_grads shape {loss_grads.shape} != {(cache.batch.shape[0], arch.n_tasks)}")

    grads: dict[str, np.ndarray] = {}
    dtrunk_out = np.zeros((cache.batch.shape[0], arch.resolved_trunk_dims[-1]))

    for t, head in enumerate(params.heads):
        _, span = task_output_range(t)
        sig = cache.sigmoids[t]
        dlogit = loss_grads[:, t] * span * sig * (1.0 - sig)
        ht = cache.head_inputs[t]
        grads[f"heads.{t}.out_w"] = (dlogit[None, :] @ ht)
        grads[f"heads.{t}.out_b"] = np.array([dlogit.sum()])
        dh = dlogit[:, None] @ head.out_w
        for i in range(len(head.hidden) - 1, -1, -1):
            dh = _layer_backward(head.hidden[i], cache.heads[t][i], dh,
                                 grads, f"heads.{t}.hidden.{i}")
        dtrunk_out += dh

    dh = dtrunk_out
    for i in range(len(params.trunk) - 1, -1, -1):
        dh = _layer_backward(params.trunk[i], cache.trunk[i], dh, grads, f"trunk.{i}")

    grads["agg_w"] = np.einsum("bd,bld->l", dh, cache.batch)
    grads["agg_b"] = np.asarray(dh.sum())
    grads["eta"] = np.zeros(arch.n_tasks)
    return grads


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Binary checkpoint: APEXMDL1 magic, arch descriptor, float32 arrays."""
    arch = params.arch
    trunk_dims = arch.resolved_trunk_dims
    header = bytearray(CHECKPOINT_MAGIC)
    header += struct.pack("<4I", CHECKPOINT_VERSION, arch.trunk_depth,
                          arch.n_tasks, arch.input_dim)
    header += struct.pack(f"<I{len(trunk_dims)}I", len(trunk_dims), *trunk_dims)
    header += struct.pack(f"<I{len(arch.head_hidden)}I",
                          len(arch.head_hidden), *arch.head_hidden)
    header += struct.pack("<2f", arch.trunk_dropout, arch.head_dropout)
    blobs = [np.ascontiguousarray(arr, dtype="<f4").tobytes()
             for _, arr in params.named_arrays()]
    atomic_write_bytes(path, bytes(header) + b"".join(blobs))


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad checkpoint magic {data[:8]!r}")
    off = 8
    version, depth, n_tasks, input_dim = struct.unpack_from("<4I", data, off)
    off += 16
    if version != CHECKPOINT_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported checkpoint version {version}")
    (n_trunk,) = struct.unpack_from("<I", data, off)
    off += 4
    trunk_dims = struct.unpack_from(f"<{n_trunk}I", data, off)
    off += 4 * n_trunk
    (n_head,) = struct.unpack_from("<I", data, off)
    off += 4
    head_hidden = struct.unpack_from(f"<{n_head}I", data, off)
    off += 4 * n_head
    trunk_dropout, head_dropout = struct.unpack_from("<2f", data, off)
    off += 8

    if n_tasks not in (2, 7):
        raise EmbeddingFormatError(f"{path}: checkpoint declares {n_tasks} tasks")
    arch = ArchConfig(
        trunk_depth=depth,
        task_mode="popularity" if n_tasks == 2 else "full",
        trunk_dropout=float(np.float32(trunk_dropout)),
        head_dropout=float(np.float32(head_dropout)),
        input_dim=input_dim,
        trunk_dims=tuple(int(d) for d in trunk_dims),
        head_hidden=tuple(int(d) for d in head_hidden),
    )
    params = init_model(arch, seed=0)
    for name, arr in params.named_arrays():
        count = arr.size
        need = count * 4
        if off + need > len(data):
            raise IOError(f"{path}: truncated checkpoint at array {name}")
        values = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        arr[...] = values.reshape(arr.shape).astype(np.float64)
        off += need
    if off != len(data):
        raise IOError(f"{path}: {len(data) - off} trailing bytes")
    return params
