"""SR learners: bicubic control, ridge patch regression and a small conv net.

All learned models work in a per-band min-max normalized space whose
statistics are computed on the training pairs and frozen into the model.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import _kernels
from ..errors import (
    DivergenceError,
    EmptyDatasetError,
    InvalidArgumentError,
    MissingBandError,
    SingularSystemError,
    UnsupportedTaskError,
)
from ..raster import BandInfo, BandStack, STANDARD_BANDS, upscale
from .convnet import ConvNet, LayerSpec, default_arch, validate_arch
from .pairs import PairDataset, SRTaskSpec

MODEL_KINDS = ("interp_baseline", "patch_linear", "conv_net")
MODEL_MAGIC = b"AGROSR-MODEL 1\n"


@dataclass
class Normalization:
    in_min: np.ndarray
    in_max: np.ndarray
    out_min: np.ndarray
    out_max: np.ndarray

    @property
    def in_range(self):
        r = self.in_max - self.in_min
        return np.where(r > 0, r, 1.0)

    @property
    def out_range(self):
        r = self.out_max - self.out_min
        return np.where(r > 0, r, 1.0)

    def norm_in(self, x: np.ndarray) -> np.ndarray:
        # x is (..., C, h, w)
        return (x - self.in_min[:, None, None]) / self.in_range[:, None, None]

    def norm_out(self, y: np.ndarray) -> np.ndarray:
        return (y - self.out_min[:, None, None]) / self.out_range[:, None, None]

    def denorm_out(self, y: np.ndarray) -> np.ndarray:
        return y * self.out_range[:, None, None] + self.out_min[:, None, None]

    @classmethod
    def from_pairs(cls, pairs: PairDataset) -> "Normalization":
        return cls(
            pairs.lo.min(axis=(0, 2, 3)).astype(np.float64),
            pairs.lo.max(axis=(0, 2, 3)).astype(np.float64),
            pairs.hi.min(axis=(0, 2, 3)).astype(np.float64),
            pairs.hi.max(axis=(0, 2, 3)).astype(np.float64),
        )

    @classmethod
    def identity(cls, n_in: int, n_out: int) -> "Normalization":
        return cls(np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out))

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("in_min", "in_max", "out_min", "out_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("in_min", "in_max", "out_min", "out_max")))


@dataclass
class SRModel:
    kind: str
    task: SRTaskSpec
    norm: Normalization
    params: list[np.ndarray] = field(default_factory=list)
    arch: list[LayerSpec] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def predict_patches(self, lo: np.ndarray) -> np.ndarray:
        """Raw-unit patches (n, C_in, p, p) to raw-unit (n, C_out, pf, pf)."""
        n = lo.shape[0]
        x = self.norm.norm_in(lo.astype(np.float64))
        ps = self.task.patch_size_hi
        c_out = len(self.task.target_bands)
        if self.kind == "patch_linear":
            w, b = self.params
            y = (x.reshape(n, -1) @ w + b).reshape(n, c_out, ps, ps)
        elif self.kind == "conv_net":
            y = self._net().forward(x)
        else:
            raise UnsupportedTaskError(f"{self.kind} does not predict patches")
        return self.norm.denorm_out(y)

    def _net(self) -> ConvNet:
        net = ConvNet(self.arch, len(self.task.input_bands))
        net.params = [(self.params[2 * i], self.params[2 * i + 1]) for i in range(len(self.arch))]
        return net

    def effective_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Raw-unit weights (D_in, D_out) and bias (D_out,) of a patch_linear model."""
        if self.kind != "patch_linear":
            raise UnsupportedTaskError("effective weights exist only for patch_linear models")
        w, b = self.params
        p, ps = self.task.patch_size_lo, self.task.patch_size_hi
        in_scale = np.repeat(1.0 / self.norm.in_range, p * p)
        in_shift = np.repeat(self.norm.in_min, p * p)
        out_scale = np.repeat(self.norm.out_range, ps * ps)
        out_shift = np.repeat(self.norm.out_min, ps * ps)
        w_raw = w * in_scale[:, None] * out_scale[None, :]
        b_raw = out_shift + out_scale * (b - (in_shift * in_scale) @ w)
        return w_raw, b_raw


def fit_interp_baseline(task: SRTaskSpec) -> SRModel:
    if task.scale_factor == 1:
        raise UnsupportedTaskError("interpolation baseline cannot synthesize channels (factor-1 task)")
    missing = [b for b in task.target_bands if b not in task.input_bands]
    if missing:
        raise UnsupportedTaskError(f"interpolation baseline cannot produce bands absent from input: {missing}")
    return SRModel("interp_baseline", task, Normalization.identity(len(task.input_bands), len(task.target_bands)))


def fit_patch_linear(pairs: PairDataset, ridge_lambda: float = 1e-3) -> SRModel:
    """Ridge regression from flattened lo patch to flattened hi patch.

    The bias is not penalized: data are centered first and the intercept
    is recovered from the means.
    """
    if ridge_lambda < 0:
        raise InvalidArgumentError("ridge_lambda must be nonnegative")
    if len(pairs) == 0:
        raise EmptyDatasetError("no training pairs")
    task = pairs.task
    norm = Normalization.from_pairs(pairs)
    n = len(pairs)
    x = norm.norm_in(pairs.lo.astype(np.float64)).reshape(n, -1)
    y = norm.norm_out(pairs.hi.astype(np.float64)).reshape(n, -1)
    d = x.shape[1]
    if n < 10 * d:
        warnings.warn(f"only {n} pairs for lo-patch dimension {d}; at least {10 * d} recommended", stacklevel=2)
    xm = x.mean(axis=0)
    ym = y.mean(axis=0)
    xc = x - xm
    a = xc.T @ xc
    rhs = xc.T @ (y - ym)
    if ridge_lambda == 0:
        if np.linalg.matrix_rank(a) < d:
            raise SingularSystemError("normal equations are singular with lambda=0; use ridge_lambda > 0")
    else:
        a[np.diag_indices(d)] += ridge_lambda
    try:
        w = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"normal equations could not be solved ({e}); use ridge_lambda > 0") from e
    b = ym - xm @ w
    model = SRModel("patch_linear", task, norm, [w, b])
    pred = model.predict_patches(pairs.lo)
    model.meta = {"ridge_lambda": float(ridge_lambda), "n_pairs": n,
                  "train_mse": float(np.mean((pred - pairs.hi) ** 2))}
    return model


def fit_conv_net(
    pairs: PairDataset,
    arch: list[LayerSpec] | None = None,
    epochs: int = 15,
    learning_rate: float = 0.05,
    seed: int = 0,
    batch_size: int = 32,
    momentum: float = 0.9,
    val_fraction: float = 0.1,
    width: int = 8,
) -> SRModel:
    """Mini-batch SGD on MSE. Loss curve rows are (epoch, train_mse, val_mse)."""
    task = pairs.task
    c_in, c_out = len(task.input_bands), len(task.target_bands)
    if arch is None:
        arch = default_arch(c_in, c_out, task.scale_factor, width)
    validate_arch(arch, c_in, c_out, task.scale_factor)
    if epochs < 1 or batch_size < 1:
        raise InvalidArgumentError("epochs and batch_size must be positive")
    if len(pairs) == 0:
        raise EmptyDatasetError("no training pairs")
    rng = np.random.default_rng(seed)
    norm = Normalization.from_pairs(pairs)
    x = norm.norm_in(pairs.lo.astype(np.float64))
    y = norm.norm_out(pairs.hi.astype(np.float64))

    order = rng.permutation(len(pairs))
    n_val = int(round(val_fraction * len(pairs))) if len(pairs) > 10 else 0
    val_idx, tr_idx = order[:n_val], order[n_val:]

    net = ConvNet(arch, c_in, rng)
    velocity = np.zeros(net.n_params)
    curve = []
    for epoch in range(1, epochs + 1):
        perm = tr_idx[rng.permutation(tr_idx.size)]
        total = 0.0
        for start in range(0, perm.size, batch_size):
            bi = perm[start: start + batch_size]
            # overflow is the divergence signal itself; check it rather than warn
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = net.loss_and_grad(x[bi], y[bi])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch)
            velocity = momentum * velocity - learning_rate * grad
            net.set_flat(net.get_flat() + velocity)
            total += loss * bi.size
        train_mse = total / max(perm.size, 1)
        val_mse = float(np.mean((net.forward(x[val_idx]) - y[val_idx]) ** 2)) if n_val else float("nan")
        if not np.isfinite(train_mse):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch)
        curve.append((epoch, float(train_mse), val_mse))

    params = []
    for w, b in net.params:
        params += [w, b]
    meta = {"epochs": epochs, "learning_rate": learning_rate, "seed": seed, "batch_size": batch_size,
            "momentum": momentum, "loss_curve": curve}
    return SRModel("conv_net", task, norm, params, list(arch), meta)


def _window_starts(n: int, p: int, stride: int) -> np.ndarray:
    starts = np.arange(0, n - p + 1, stride)
    if starts[-1] != n - p:
        starts = np.append(starts, n - p)
    return starts


def apply_sr(model: SRModel, stack: BandStack, stride: int = 1, batch: int = 4096) -> BandStack:
    """Run a model over a whole stack; overlapping patch outputs are averaged.

    The hi-res footprint of any NaN input cell is NaN in the output.
    """
    task = model.task
    f = task.scale_factor
    for name in task.input_bands:
        if name not in stack.band_names:
            raise MissingBandError(name)
    out_infos = [_band_info(stack, name) for name in task.target_bands]
    sub = stack.select(task.input_bands)
    if model.kind == "interp_baseline":
        up = upscale(sub, f, "bicubic")
        return up.select(task.target_bands)

    arr = sub.data.astype(np.float64)
    c, h, w = arr.shape
    p = task.patch_size_lo
    half = p // 2
    padded = np.pad(arr, ((0, 0), (half, half), (half, half)), mode="edge")
    ys = _window_starts(h + 2 * half, p, stride)
    xs = _window_starts(w + 2 * half, p, stride)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1)
    windows = _kernels.patch_windows(padded, p)
    c_out = len(task.target_bands)
    full_shape = ((h + 2 * half) * f, (w + 2 * half) * f)
    acc = np.zeros((c_out,) + full_shape)
    cnt = np.zeros(full_shape)
    for start in range(0, pos.shape[0], batch):
        pb = pos[start: start + batch]
        lo = windows[pb[:, 0], pb[:, 1]]
        ok = ~np.isnan(lo).any(axis=(1, 2, 3))
        if not ok.any():
            continue
        pred = model.predict_patches(lo[ok])
        a, k = _kernels.overlap_add(pred, pb[ok], full_shape, f)
        acc += a
        cnt += k
    hs, ws = half * f, half * f
    acc = acc[:, hs: hs + h * f, ws: ws + w * f]
    cnt = cnt[hs: hs + h * f, ws: ws + w * f]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = acc / cnt
    out[:, cnt == 0] = np.nan
    nan_lo = np.isnan(arr).any(axis=0)
    if nan_lo.any():
        out[:, np.repeat(np.repeat(nan_lo, f, axis=0), f, axis=1)] = np.nan
    # a model can finish training with finite but useless weights; catch it before the float32 cast
    if np.isinf(out).any() or np.nanmax(np.abs(out), initial=0.0) > np.finfo(np.float32).max:
        raise DivergenceError("SR output overflows float32 (model weights diverged)")
    return BandStack(out.astype(np.float32), out_infos, stack.pixel_size_m / f, stack.acquisition_date)


def _band_info(stack: BandStack, name: str) -> BandInfo:
    for b in stack.bands:
        if b.name == name:
            return b
    if name in STANDARD_BANDS:
        return STANDARD_BANDS[name]
    return BandInfo(name, None, "reflectance")


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def model_header(model: SRModel) -> dict:
    return {
        "kind": model.kind,
        "task": model.task.to_dict(),
        "arch": [layer.to_dict() for layer in model.arch],
        "normalization": model.norm.to_dict(),
        "param_shapes": [list(p.shape) for p in model.params],
        "meta": _jsonable(model.meta),
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_model(model: SRModel, path) -> None:
    header = json.dumps(model_header(model), sort_keys=True).encode()
    blob = b"".join(np.asarray(p, dtype="<f4").tobytes() for p in model.params)
    Path(path).write_bytes(MODEL_MAGIC + header + b"\n" + blob)


def load_model(path) -> SRModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(MODEL_MAGIC):
        raise InvalidArgumentError(f"{path}: not a model file")
    rest = raw[len(MODEL_MAGIC):]
    nl = rest.index(b"\n")
    head = json.loads(rest[:nl])
    blob = np.frombuffer(rest[nl + 1:], dtype="<f4")
    params = []
    i = 0
    for shape in head["param_shapes"]:
        size = int(np.prod(shape)) if shape else 1
        params.append(blob[i: i + size].astype(np.float64).reshape(shape))
        i += size
    if i != blob.size:
        raise InvalidArgumentError(f"{path}: parameter blob has {blob.size} values, header expects {i}")
    return SRModel(
        head["kind"],
        SRTaskSpec.from_dict(head["task"]),
        Normalization.from_dict(head["normalization"]),
        params,
        [LayerSpec.from_dict(d) for d in head["arch"]],
        head.get("meta", {}),
    )


def write_loss_curve(model: SRModel, path) -> None:
    rows = model.meta.get("loss_curve", [])
    lines = ["epoch,train_mse,val_mse"] + [f"{int(e)},{float(t):.9g},{float(v):.9g}" for e, t, v in rows]
    Path(path).write_text("\n".join(lines) + "\n")
