"""From-scratch 3D convolutional network with analytic forward and backward.

Architecture: three conv blocks (3x3x3 kernels, same padding, stride 1),
each block ordered conv -> ReLU -> batch norm; 2x2x2 floor-mode max pooling
after blocks one and two; global average pooling; a single fully connected
output unit with sigmoid.  The spectral axis of a C x P x P patch is treated
as convolution depth, so the input tensor is (B, 1, C, P, P) and one kernel
mixes adjacent bands and pixels jointly.

Everything is plain numpy so the same code runs in float32 for training and
float64 for finite-difference verification.  Checkpoint container layout
(little-endian):

    b"DCK1" | u32 tensor count | per tensor:
        u16 name length | ASCII name | u8 rank | rank * u32 dims | f32 payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import BadMagicError, FormatError, ShapeMismatchError, TruncatedFileError

CHECKPOINT_MAGIC = b"DCK1"
KERNEL = 3
POOL = 2


@dataclass(frozen=True)
class ModelConfig:
    filters: tuple[int, int, int] = (32, 64, 128)
    in_depth: int = 38   # spectral channels, used as convolution depth
    patch_size: int = 5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.tensors["fc.weight"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class ForwardTrace:
    """Per-layer caches from one forward pass, consumed by backward."""

    mode: str
    input_shape: tuple
    caches: dict = field(default_factory=dict)
    shapes: list = field(default_factory=list)  # (stage, per-sample shape)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Tensor-name to shape template for one architecture."""
    shapes: dict[str, tuple] = {}
    in_ch = 1
    for i, out_ch in enumerate(config.filters, start=1):
        shapes[f"conv{i}.weight"] = (out_ch, in_ch, KERNEL, KERNEL, KERNEL)
        shapes[f"conv{i}.bias"] = (out_ch,)
        for stat in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"bn{i}.{stat}"] = (out_ch,)
        in_ch = out_ch
    shapes["fc.weight"] = (1, config.filters[-1])
    shapes["fc.bias"] = (1,)
    return shapes


def trainable_names(config: ModelConfig) -> list[str]:
    return [n for n in param_shapes(config) if not n.endswith(("running_mean", "running_var"))]


def init_params(seed: int, config: ModelConfig | None = None,
                dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform kernels, zero biases, identity batch norm."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight") and name.startswith("conv"):
            fan_in = shape[1] * KERNEL ** 3
            bound = np.sqrt(1.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif name == "fc.weight":
            bound = np.sqrt(1.0 / shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif name.endswith(".gamma") or name.endswith(".running_var"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def conv3d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Same-padded 3x3x3 convolution via an im2col matrix product.

    Column order is channel-major then depth, row, col, which fixes the
    logical accumulation order of every output element.
    """
    b, cin, d, h, w = x.shape
    cout = weight.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (KERNEL,) * 3, axis=(2, 3, 4))
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b * d * h * w, cin * KERNEL ** 3)
    out = cols @ weight.reshape(cout, -1).T
    out += bias
    y = out.reshape(b, d, h, w, cout).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(y), cols


def conv3d_backward(dy: np.ndarray, cols: np.ndarray, weight: np.ndarray,
                    x_shape: tuple, need_dx: bool = True):
    """Weight/bias gradients from the cached im2col matrix; the input
    gradient is the same-padded correlation of ``dy`` with the spatially
    flipped, channel-swapped kernels (skipped for the bottom layer)."""
    cout = weight.shape[0]
    dmat = np.ascontiguousarray(dy.transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
    dw = (dmat.T @ cols).reshape(weight.shape)
    db = dmat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    wt = np.ascontiguousarray(
        weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    )
    dx, _ = conv3d_forward(dy, wt, np.zeros(x_shape[1], dtype=dy.dtype))
    return dx, dw, db


def maxpool3d_forward(x: np.ndarray, want_indices: bool = True):
    """2x2x2, stride 2, floor mode; an axis shorter than the window is kept
    as-is (window clamps to the available extent).

    With ``want_indices`` the cache records each window's first argmax for
    gradient routing; without it the maximum is reduced over strided views,
    which yields bitwise-identical values at lower cost.
    """
    b, c, d, h, w = x.shape
    wins = (min(POOL, d), min(POOL, h), min(POOL, w))
    od, oh, ow = d // wins[0], h // wins[1], w // wins[2]
    trimmed = x[:, :, :od * wins[0], :oh * wins[1], :ow * wins[2]]
    if not want_indices:
        y = None
        for a in range(wins[0]):
            for bb in range(wins[1]):
                for cc in range(wins[2]):
                    view = trimmed[:, :, a::wins[0], bb::wins[1], cc::wins[2]]
                    y = view.copy() if y is None else np.maximum(y, view, out=y)
        return y, (x.shape, wins, None)
    xr = trimmed.reshape(b, c, od, wins[0], oh, wins[1], ow, wins[2])
    xr = np.ascontiguousarray(xr.transpose(0, 1, 2, 4, 6, 3, 5, 7))
    xr = xr.reshape(b, c, od, oh, ow, wins[0] * wins[1] * wins[2])
    idx = xr.argmax(axis=-1)  # first max wins ties
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, wins, idx)


def maxpool3d_backward(dy: np.ndarray, cache):
    x_shape, wins, idx = cache
    if idx is None:
        raise ValueError("pooling indices were not kept; forward ran without caches")
    b, c, d, h, w = x_shape
    od, oh, ow = idx.shape[2:]
    dxr = np.zeros((b, c, od, oh, ow, wins[0] * wins[1] * wins[2]), dtype=dy.dtype)
    np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
    dxr = dxr.reshape(b, c, od, oh, ow, wins[0], wins[1], wins[2])
    dxr = dxr.transpose(0, 1, 2, 5, 3, 6, 4, 7)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, :od * wins[0], :oh * wins[1], :ow * wins[2]] = \
        dxr.reshape(b, c, od * wins[0], oh * wins[1], ow * wins[2])
    return dx


def batchnorm_forward(x, gamma, beta, running_mean, running_var, *,
                      train: bool, eps: float, momentum: float,
                      update_running: bool, keep_cache: bool = True):
    bshape = (1, -1, 1, 1, 1)
    if train:
        m = x.size // x.shape[1]
        mean = x.mean(axis=(0, 2, 3, 4))
        xhat = x - mean.reshape(bshape)
        var = np.einsum("ncdhw,ncdhw->c", xhat, xhat) / m
        if update_running:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat *= inv.reshape(bshape)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(bshape)) * inv.reshape(bshape)
    if keep_cache:
        y = gamma.reshape(bshape) * xhat
        y += beta.reshape(bshape)
        return y, (xhat, inv, train)
    # same multiply/add sequence applied in place: bitwise-identical output
    xhat *= gamma.reshape(bshape)
    xhat += beta.reshape(bshape)
    return xhat, None


def batchnorm_backward(dy, gamma, cache):
    xhat, inv, train = cache
    axes = (0, 2, 3, 4)
    bshape = (1, -1, 1, 1, 1)
    dgamma = np.einsum("ncdhw,ncdhw->c", dy, xhat)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(bshape)
    if train:
        m = dy.size // dy.shape[1]
        dxhat -= (dbeta * gamma / m).reshape(bshape)
        dxhat -= xhat * ((dgamma * gamma / m).reshape(bshape))
        dxhat *= inv.reshape(bshape)
    else:
        dxhat *= inv.reshape(bshape)
    return dxhat, dgamma, dbeta


def global_avgpool_forward(x: np.ndarray):
    b, c, d, h, w = x.shape
    return x.mean(axis=(2, 3, 4)), (x.shape,)


def global_avgpool_backward(dy: np.ndarray, cache):
    (x_shape,) = cache
    _, _, d, h, w = x_shape
    return np.broadcast_to(dy[:, :, None, None, None] / (d * h * w), x_shape).astype(dy.dtype)


# ---------------------------------------------------------------------------
# Full network
# ---------------------------------------------------------------------------


def forward(params: ModelParams, x: np.ndarray, mode: str = "train",
            update_running_stats: bool | None = None,
            keep_caches: bool | None = None):
    """Run the network on a (B, 1, C, P, P) batch.

    Returns per-sample probabilities in (0, 1) plus a trace for backward.
    Train mode normalizes with batch statistics (and by default updates the
    running estimates in place); eval mode uses the running estimates and is
    a pure function of (params, x).  ``keep_caches`` (default: train mode
    only) controls whether the trace retains what backward needs; disabling
    it never changes the computed values, only memory and time.
    """
    cfg = params.config
    x = np.asarray(x)
    if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (cfg.in_depth, cfg.patch_size, cfg.patch_size):
        raise ShapeMismatchError(
            f"expected input (B, 1, {cfg.in_depth}, {cfg.patch_size}, {cfg.patch_size}), got {x.shape}"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite values in network input")
    if x.dtype != params.dtype:
        x = x.astype(params.dtype)

    train = mode == "train"
    if update_running_stats is None:
        update_running_stats = train
    if keep_caches is None:
        keep_caches = train
    t = params.tensors
    trace = ForwardTrace(mode=mode, input_shape=x.shape)
    trace.shapes.append(("input", x.shape[1:]))

    a = x
    n_blocks = len(cfg.filters)
    for i in range(1, n_blocks + 1):
        y, cols = conv3d_forward(a, t[f"conv{i}.weight"], t[f"conv{i}.bias"])
        in_shape = a.shape
        np.maximum(y, 0, out=y)
        bn, bn_cache = batchnorm_forward(
            y, t[f"bn{i}.gamma"], t[f"bn{i}.beta"],
            t[f"bn{i}.running_mean"], t[f"bn{i}.running_var"],
            train=train, eps=cfg.bn_eps, momentum=cfg.bn_momentum,
            update_running=update_running_stats, keep_cache=keep_caches,
        )
        if keep_caches:
            trace.caches[f"conv{i}"] = (cols, in_shape)
            trace.caches[f"relu{i}"] = y > 0
            trace.caches[f"bn{i}"] = bn_cache
        trace.shapes.append((f"block{i}", bn.shape[1:]))
        a = bn
        if i < n_blocks:
            a, pool_cache = maxpool3d_forward(a, want_indices=keep_caches)
            if keep_caches:
                trace.caches[f"pool{i}"] = pool_cache
            trace.shapes.append((f"pool{i}", a.shape[1:]))

    pooled, avg_cache = global_avgpool_forward(a)
    trace.shapes.append(("avgpool", (pooled.shape[1], 1, 1, 1)))

    z = pooled @ t["fc.weight"].T + t["fc.bias"]
    preds = expit(z[:, 0])
    if keep_caches:
        trace.caches["avgpool"] = avg_cache
        trace.caches["fc"] = pooled
        trace.caches["sigmoid"] = preds
    trace.shapes.append(("output", ()))
    return preds, trace


def backward(params: ModelParams, trace: ForwardTrace,
             dpreds: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable tensor.

    ``dpreds`` is the loss gradient at the sigmoid output, one value per
    sample.  Pure function of (params, trace, dpreds).
    """
    cfg = params.config
    t = params.tensors
    if "sigmoid" not in trace.caches:
        raise ValueError("trace was built with keep_caches=False; backward needs caches")
    if dpreds.shape != trace.caches["sigmoid"].shape:
        raise ShapeMismatchError(
            f"upstream gradient shape {dpreds.shape} does not match "
            f"predictions {trace.caches['sigmoid'].shape}"
        )
    grads: dict[str, np.ndarray] = {}

    s = trace.caches["sigmoid"]
    dz = (dpreds * s * (1.0 - s))[:, None]
    pooled = trace.caches["fc"]
    grads["fc.weight"] = dz.T @ pooled
    grads["fc.bias"] = dz.sum(axis=0)
    dpooled = dz @ t["fc.weight"]

    da = global_avgpool_backward(dpooled, trace.caches["avgpool"])
    n_blocks = len(cfg.filters)
    for i in range(n_blocks, 0, -1):
        if i < n_blocks:
            da = maxpool3d_backward(da, trace.caches[f"pool{i}"])
        da, dgamma, dbeta = batchnorm_backward(da, t[f"bn{i}.gamma"], trace.caches[f"bn{i}"])
        grads[f"bn{i}.gamma"] = dgamma
        grads[f"bn{i}.beta"] = dbeta
        np.multiply(da, trace.caches[f"relu{i}"], out=da)
        cols, x_shape = trace.caches[f"conv{i}"]
        da, dw, db = conv3d_backward(da, cols, t[f"conv{i}.weight"], x_shape,
                                     need_dx=(i > 1))
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    return grads


def predict(params: ModelParams, patches: np.ndarray) -> np.ndarray:
    """Eval-mode probabilities for (B, C, P, P) patches, computed per sample.

    Each sample goes through the network alone, so every arithmetic
    reduction sees exactly the same operand shapes no matter how callers
    group samples into batches: outputs are bitwise identical for any batch
    split.  Slower than a batched eval pass; used where that invariance is
    part of the contract (full-scene inference).
    """
    patches = np.asarray(patches)
    out = np.empty(len(patches), dtype=params.dtype)
    for i in range(len(patches)):
        p, _ = forward(params, patches[i:i + 1, None], mode="eval", keep_caches=False)
        out[i] = p[0]
    return out


def predict_batched(params: ModelParams, patches: np.ndarray,
                    batch_size: int = 1024) -> np.ndarray:
    """Eval-mode probabilities via the fast batched path (no bitwise
    batch-split invariance guarantee)."""
    chunks = []
    for start in range(0, len(patches), batch_size):
        p, _ = forward(params, patches[start:start + batch_size, None],
                       mode="eval", keep_caches=False)
        chunks.append(p)
    return np.concatenate(chunks) if chunks else np.empty(0, dtype=params.dtype)


def shape_ledger(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Stage-by-stage per-sample activation shapes for an architecture."""
    params = init_params(0, config)
    x = np.zeros((2, 1, config.in_depth, config.patch_size, config.patch_size),
                 dtype=np.float32)
    _, trace = forward(params, x, mode="train", update_running_stats=False)
    return trace.shapes


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            enc = name.encode("ascii")
            arr = np.asarray(arr, dtype="<f4")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack("<" + "I" * arr.ndim, *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint_tensors(path: str | Path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        head = f.read(8)
        if head[:4] != CHECKPOINT_MAGIC:
            raise BadMagicError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, found {head[:4]!r}")
        if len(head) != 8:
            raise TruncatedFileError(f"{path}: header truncated")
        (count,) = struct.unpack("<I", head[4:])
        for _ in range(count):
            raw = f.read(2)
            if len(raw) != 2:
                raise TruncatedFileError(f"{path}: tensor record truncated")
            (name_len,) = struct.unpack("<H", raw)
            name = f.read(name_len).decode("ascii")
            rank_raw = f.read(1)
            if len(rank_raw) != 1:
                raise TruncatedFileError(f"{path}: tensor record truncated")
            rank = rank_raw[0]
            dims_raw = f.read(4 * rank)
            if len(dims_raw) != 4 * rank:
                raise TruncatedFileError(f"{path}: tensor record truncated")
            dims = struct.unpack("<" + "I" * rank, dims_raw)
            n = int(np.prod(dims)) if rank else 1
            payload = f.read(4 * n)
            if len(payload) != 4 * n:
                raise TruncatedFileError(f"{path}: tensor payload truncated for {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if f.read(1):
            raise TruncatedFileError(f"{path}: trailing bytes after declared tensors")
    return tensors


def save_checkpoint(path: str | Path, params: ModelParams,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Serialize model tensors (+ architecture metadata, + optional extras
    such as optimizer moments under their own names)."""
    cfg = params.config
    tensors: dict[str, np.ndarray] = {
        "meta.filters": np.asarray(cfg.filters, dtype=np.float32),
        "meta.in_depth": np.float32(cfg.in_depth),
        "meta.patch_size": np.float32(cfg.patch_size),
        "meta.bn_eps": np.float32(cfg.bn_eps),
        "meta.bn_momentum": np.float32(cfg.bn_momentum),
    }
    tensors.update(params.tensors)
    if extra:
        tensors.update(extra)
    write_checkpoint_tensors(path, tensors)


def load_checkpoint(path: str | Path,
                    expected_config: ModelConfig | None = None
                    ) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Rebuild params (validated against the architecture) plus extras."""
    tensors = read_checkpoint_tensors(path)
    try:
        filters = tuple(int(v) for v in tensors.pop("meta.filters"))
        config = ModelConfig(
            filters=filters,  # type: ignore[arg-type]
            in_depth=int(tensors.pop("meta.in_depth")),
            patch_size=int(tensors.pop("meta.patch_size")),
            bn_eps=float(tensors.pop("meta.bn_eps")),
            bn_momentum=float(tensors.pop("meta.bn_momentum")),
        )
    except KeyError as e:
        raise FormatError(f"{path}: missing architecture metadata {e}") from e
    if expected_config is not None and (
        expected_config.filters != config.filters
        or expected_config.in_depth != config.in_depth
        or expected_config.patch_size != config.patch_size
    ):
        raise ShapeMismatchError(
            f"{path}: checkpoint architecture {config} does not match expected {expected_config}"
        )
    shapes = param_shapes(config)
    model_tensors = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise ShapeMismatchError(f"{path}: missing tensor {name!r}")
        arr = tensors.pop(name)
        if arr.shape != shape:
            raise ShapeMismatchError(
                f"{path}: tensor {name!r} has shape {arr.shape}, architecture needs {shape}"
            )
        model_tensors[name] = arr
    return ModelParams(config, model_tensors), tensors


def describe_checkpoint(path: str | Path) -> str:
    """Human-readable tensor census of a checkpoint."""
    tensors = read_checkpoint_tensors(path)
    lines = []
    for name in sorted(tensors):
        arr = tensors[name]
        lines.append(f"{name:28s} {str(arr.shape):>18s} {arr.size:>8d}")
    conv = sum(1 for n in tensors if n.startswith("conv") and n.endswith(".weight"))
    bn = sum(1 for n in tensors if n.startswith("bn") and n.endswith(".gamma"))
    fc = sum(1 for n in tensors if n.startswith("fc") and n.endswith(".weight"))
    lines.append(f"groups: {conv} conv + {bn} batch-norm + {fc} fully-connected")
    total = sum(t.size for n, t in tensors.items() if not n.startswith(("meta.", "opt.")))
    lines.append(f"parameters: {total}")
    return "\n".join(lines)
