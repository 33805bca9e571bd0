"""Patch-based multi-label tract prediction.

The predictor interface is behavioral: anything mapping a coefficient
patch to per-channel probabilities plugs into the sliding-window and
test-time-averaging machinery.  The reference implementation is a
voxel-wise multi-label logistic model on the 6 coefficient channels;
it is deliberately small so the full training recipe (patch sampling,
per-iteration measurement-subset resampling, Adam, plateau-halving
schedule) runs in minutes on synthetic data.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import Grid3, Volume
from .qspace import _select, random_subset, select_subset
from .shfit import (
    B0_CLAMP_MAX,
    FIT_BLOCK,
    ShBasis,
    _TruncatedLstsq,
    b0_normalize,
    design_matrix,
    fit_sh,
)


class TrainingDivergenceError(RuntimeError):
    """Loss or gradients became non-finite."""


class Predictor:
    """Behavioral interface: coefficient patch in, probabilities out."""

    @property
    def n_classes(self):
        raise NotImplementedError

    def predict_patch(self, coeff_patch):
        """Map (a, b, c, F) coefficients to (a, b, c, n_classes) in [0, 1]."""
        raise NotImplementedError


@dataclass(frozen=True)
class ReferenceModel(Predictor):
    """Per-class affine map on coefficient channels + logistic squashing."""

    weights: np.ndarray
    bias: np.ndarray
    dropout_rate: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError("weights must be (C, F) with bias (C,)")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("parameters must be finite")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_classes(self):
        return self.weights.shape[0]

    @property
    def n_features(self):
        return self.weights.shape[1]

    def _logits(self, coeff_patch):
        x = np.asarray(coeff_patch, dtype=np.float64)
        if x.shape[-1] != self.n_features:
            raise ValueError(
                "patch has %d channels, model expects %d"
                % (x.shape[-1], self.n_features)
            )
        return x @ self.weights.T + self.bias

    def predict_patch(self, coeff_patch):
        return expit(self._logits(coeff_patch)).astype(np.float32)

    @classmethod
    def zeros(cls, n_classes, n_features=None):
        if n_features is None:
            n_features = ShBasis().n_coeffs
        return cls(np.zeros((n_classes, n_features)), np.zeros(n_classes))

    def dropout_variant(self, rate, rng):
        """Model with feature columns randomly zeroed (inverted dropout).

        One mask per call, so each variant is an independent stochastic
        forward model for baseline uncertainty estimation.
        """
        if not 0.0 < rate < 1.0:
            raise ValueError("rate must lie in (0, 1)")
        keep = rng.random(self.n_features) >= rate
        w = self.weights * (keep / (1.0 - rate))
        return ReferenceModel(w, self.bias, dropout_rate=rate)


def soft_dice_loss(pred, target, smooth=1.0):
    """1 - mean over channels of the smoothed Dice overlap.

    Channels are the last axis; all leading axes are pooled.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    p = pred.reshape(-1, pred.shape[-1])
    t = target.reshape(-1, target.shape[-1])
    inter = np.sum(p * t, axis=0)
    dice = (2.0 * inter + smooth) / (np.sum(p, axis=0) + np.sum(t, axis=0) + smooth)
    return float(1.0 - np.mean(dice))


def soft_dice_grad(pred, target, smooth=1.0):
    """Analytic gradient of soft_dice_loss with respect to pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    shape = pred.shape
    p = pred.reshape(-1, shape[-1])
    t = target.reshape(-1, shape[-1])
    inter = np.sum(p * t, axis=0)
    denom = np.sum(p, axis=0) + np.sum(t, axis=0) + smooth
    num = 2.0 * inter + smooth
    grad = -(2.0 * t * denom - num) / denom**2 / shape[-1]
    return grad.reshape(shape)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != np.shape(params):
        raise ValueError("gradient shape differs from parameter shape")
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergenceError("non-finite gradients")
    if state is None:
        state = AdamState(np.zeros_like(grads), np.zeros_like(grads), 0)
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads**2
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_patches: int = 1
    epochs: int = 10
    iters_per_epoch: int = 100
    patch_size: int = 96
    k_range: tuple = (6, 12)
    val_fraction: float = 0.25
    b_target: float = 1000.0
    b_tol: float = 100.0
    min_decrease: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_patches < 1 or self.epochs < 1 or self.iters_per_epoch < 1:
            raise ValueError("counts must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        lo, hi = self.k_range
        if lo < 1 or lo > hi:
            raise ValueError("invalid k_range")
        object.__setattr__(self, "k_range", (int(lo), int(hi)))


@dataclass(frozen=True)
class LogEntry:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def _patch_grid(grid, corner, size):
    origin = tuple(
        o + s * c for o, s, c in zip(grid.origin, grid.spacing, corner)
    )
    return Grid3((size, size, size), grid.spacing, origin)


def _scan_eps(b0):
    eps = 1e-3 * float(np.percentile(b0.channel(0).astype(np.float64), 99.0))
    return eps if eps > 0 else float(np.finfo(np.float32).tiny)


def _subset_coeffs(dwi, b0, table, indices, eps):
    # slice the subset channels first; normalization is per-channel, so
    # this matches normalize-then-slice while touching k columns, not m
    idx = list(indices)
    sub = Volume(dwi.grid, dwi.data[..., idx])
    norm, _ = b0_normalize(sub, b0, eps=eps)
    return fit_sh(norm, table.dirs[idx])


def train_reference(data, cfg):
    """Train the reference model on (dwi, b0, table, labels) scans.

    Each iteration draws a fresh measurement subset, refits the
    coefficients on one randomly placed patch, and takes one Adam step on
    the soft Dice loss.  After every epoch the validation loss is
    evaluated on held-out scans with a fixed subset; the learning rate is
    halved whenever that loss fails to decrease.  Returns the model and a
    per-epoch log of (epoch, train_loss, val_loss, lr).
    """
    data = list(data)
    n_val = max(1, int(round(cfg.val_fraction * len(data))))
    n_train = len(data) - n_val
    if n_train < 1:
        raise ValueError("need at least 1 training and 1 validation scan")
    train, val = data[:n_train], data[n_train:]
    n_classes = len(train[0][3])
    p = cfg.patch_size
    for dwi, _b0, _table, labels in data:
        if len(labels) != n_classes:
            raise ValueError("all scans must have the same number of labels")
        if any(d < p for d in dwi.grid.dims):
            raise ValueError("scan dims must be >= patch_size")

    scan_eps = [_scan_eps(b0) for _dwi, b0, _t, _l in data]
    targets = [
        np.stack([m.data for m in labels], axis=-1).astype(np.float32)
        for _dwi, _b0, _t, labels in data
    ]

    # fixed validation inputs: one deterministic subset per held-out scan
    val_sets = []
    for vi, (dwi, b0, table, _labels) in enumerate(val, start=n_train):
        sel = select_subset(
            table, cfg.k_range[0], cfg.b_target, cfg.b_tol, seed=cfg.seed
        )
        coeffs = _subset_coeffs(dwi, b0, table, sel.indices, scan_eps[vi])
        val_sets.append((coeffs.data.astype(np.float64), targets[vi]))

    rng = np.random.default_rng(cfg.seed)
    model = ReferenceModel.zeros(n_classes)
    w, b = model.weights.copy(), model.bias.copy()
    state_w = state_b = None
    lr = cfg.lr
    log = []
    prev_val = None
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for _ in range(cfg.iters_per_epoch):
            gw = np.zeros_like(w)
            gb = np.zeros_like(b)
            batch_loss = 0.0
            for _ in range(cfg.batch_patches):
                si = int(rng.integers(n_train))
                dwi, b0, table, _labels = train[si]
                subset = random_subset(
                    table, cfg.k_range, cfg.b_target, cfg.b_tol, rng=rng
                )
                corner = tuple(
                    int(rng.integers(0, d - p + 1)) for d in dwi.grid.dims
                )
                sl = tuple(slice(c, c + p) for c in corner)
                grid_p = _patch_grid(dwi.grid, corner, p)
                dwi_p = Volume(grid_p, dwi.data[sl])
                b0_p = Volume(grid_p, b0.data[sl])
                coeffs = _subset_coeffs(
                    dwi_p, b0_p, table, subset.indices, scan_eps[si]
                )
                x = coeffs.data.reshape(-1, coeffs.channels).astype(np.float64)
                t = targets[si][sl].reshape(-1, n_classes).astype(np.float64)
                probs = expit(x @ w.T + b)
                batch_loss += soft_dice_loss(probs, t)
                dz = soft_dice_grad(probs, t) * probs * (1.0 - probs)
                gw += dz.T @ x
                gb += dz.sum(axis=0)
            batch_loss /= cfg.batch_patches
            if not np.isfinite(batch_loss):
                raise TrainingDivergenceError("non-finite training loss")
            epoch_losses.append(batch_loss)
            w, state_w = adam_step(w, gw / cfg.batch_patches, state_w, lr)
            b, state_b = adam_step(b, gb / cfg.batch_patches, state_b, lr)
        val_losses = []
        for x_vol, t in val_sets:
            x = x_vol.reshape(-1, x_vol.shape[-1])
            probs = expit(x @ w.T + b)
            val_losses.append(soft_dice_loss(probs, t.reshape(-1, n_classes)))
        val_loss = float(np.mean(val_losses))
        if not np.isfinite(val_loss):
            raise TrainingDivergenceError("non-finite validation loss")
        log.append(LogEntry(epoch, float(np.mean(epoch_losses)), val_loss, lr))
        if prev_val is not None and val_loss >= prev_val - cfg.min_decrease:
            lr *= 0.5
        prev_val = val_loss
    return ReferenceModel(w, b), log


@dataclass(frozen=True)
class PatchSpec:
    """Sliding-window geometry: patch size, stride, blend window."""

    size: int = 96
    stride: int = None
    blend: str = "cosine"

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("size must be >= 1")
        stride = self.size // 2 if self.stride is None else int(self.stride)
        if not 0 < stride <= self.size:
            raise ValueError("stride must lie in (0, size]")
        if self.blend not in ("uniform", "cosine"):
            raise ValueError("blend must be 'uniform' or 'cosine'")
        object.__setattr__(self, "stride", stride)


def _blend_window(spec):
    if spec.blend == "uniform":
        w1 = np.ones(spec.size)
    else:
        i = np.arange(spec.size)
        # strictly positive raised-cosine, so every voxel keeps weight
        w1 = 0.5 - 0.5 * np.cos(2.0 * np.pi * (i + 0.5) / spec.size)
    return w1[:, None, None] * w1[None, :, None] * w1[None, None, :]


def _axis_starts(dim, size, stride):
    starts = list(range(0, dim - size + 1, stride))
    if starts[-1] != dim - size:
        starts.append(dim - size)
    return starts


def _reflect_pad_to(data, size):
    pads = []
    for dim in data.shape[:3]:
        need = max(0, size - dim)
        pads.append((need // 2, need - need // 2))
    pads.append((0, 0))
    while any(p != (0, 0) for p in pads[:3]):
        step = []
        for (lo, hi), dim in zip(pads[:3], data.shape[:3]):
            # np.pad reflect cannot exceed dim-1 per side in one call
            step.append((min(lo, dim - 1), min(hi, dim - 1)))
        step.append((0, 0))
        data = np.pad(data, step, mode="reflect")
        pads = [
            (lo - s_lo, hi - s_hi)
            for (lo, hi), (s_lo, s_hi) in zip(pads, step)
        ]
    return data


def _window_positions(padded, spec):
    starts = [_axis_starts(d, spec.size, spec.stride) for d in padded]
    return [
        (sx, sy, sz)
        for sx in starts[0]
        for sy in starts[1]
        for sz in starts[2]
    ]


def _patch_contribution(model, data, window, pos, p):
    sx, sy, sz = pos
    patch = data[sx : sx + p, sy : sy + p, sz : sz + p, :]
    pred = model.predict_patch(patch).astype(np.float64)
    return pred * window[..., np.newaxis]


def _window_weight_sum(padded, positions, window, p):
    wsum = np.zeros(padded, dtype=np.float64)
    for sx, sy, sz in positions:
        wsum[sx : sx + p, sy : sy + p, sz : sz + p] += window
    return wsum


def _finalize_blend(acc, wsum, pad_lo, dims):
    out = acc / wsum[..., np.newaxis]
    crop = tuple(slice(lo, lo + d) for lo, d in zip(pad_lo, dims))
    return np.clip(out[crop], 0.0, 1.0).astype(np.float32)


def sliding_window_predict(model, coeffs, spec=None, workers=None):
    """Blend overlapping patch predictions over the whole volume.

    Patch contributions are weighted by the blend window and accumulated
    in a fixed patch-index order, so the result is byte-identical for any
    worker count or traversal order.
    """
    if spec is None:
        spec = PatchSpec()
    p = spec.size
    data = _reflect_pad_to(coeffs.data, p)
    padded = data.shape[:3]
    pad_lo = [(pd - d) // 2 for pd, d in zip(padded, coeffs.grid.dims)]
    window = _blend_window(spec)
    positions = _window_positions(padded, spec)
    acc = np.zeros(padded + (model.n_classes,), dtype=np.float64)

    def contribution(pos):
        return _patch_contribution(model, data, window, pos, p)

    def accumulate(pos, contrib):
        sx, sy, sz = pos
        acc[sx : sx + p, sy : sy + p, sz : sz + p, :] += contrib

    if workers is not None and workers > 1:
        chunk = 4 * workers
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for lo in range(0, len(positions), chunk):
                block = positions[lo : lo + chunk]
                for pos, contrib in zip(block, pool.map(contribution, block)):
                    accumulate(pos, contrib)
    else:
        for pos in positions:
            accumulate(pos, contribution(pos))

    wsum = _window_weight_sum(padded, positions, window, p)
    out = _finalize_blend(acc, wsum, pad_lo, coeffs.grid.dims)
    return Volume(coeffs.grid, out)


@dataclass(frozen=True)
class TtaResult:
    """Per-subset predictions, their voxel-wise mean, and the subsets."""

    predictions: tuple
    mean: Volume
    subsets: tuple

    def __post_init__(self):
        preds = tuple(self.predictions)
        if not preds:
            raise ValueError("need at least one prediction")
        for y in preds:
            if y.grid != self.mean.grid or y.channels != self.mean.channels:
                raise ValueError("predictions and mean must share grid and channels")
        object.__setattr__(self, "predictions", preds)
        object.__setattr__(self, "subsets", tuple(self.subsets))

    @property
    def n(self):
        return len(self.predictions)


def mean_prediction(predictions):
    """Voxel-wise arithmetic mean of probability volumes (float64 sum)."""
    stack = np.stack([y.data for y in predictions], axis=0)
    mean = np.mean(stack, axis=0, dtype=np.float64)
    return Volume(predictions[0].grid, mean.astype(np.float32))


def tta_subsets(table, n, k, b_target=1000.0, b_tol=100.0, seed=0):
    """n independent size-k subsets, drawn as during training."""
    seeds = np.random.SeedSequence(seed).spawn(n)
    out = []
    for s in seeds:
        rng = np.random.default_rng(s)
        sel, _ = _select(table, k, b_target, b_tol, rng, max_passes=1)
        out.append(sel)
    return tuple(out)


def _run_tasks(fn, tasks, workers):
    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def tta_predict(
    model,
    dwi,
    b0,
    table,
    n,
    k=6,
    seed=0,
    spec=None,
    b_target=1000.0,
    b_tol=100.0,
    subsets=None,
    workers=None,
):
    """Predict with n measurement subsets and average the results.

    Each member prediction refits the coefficient maps from its own
    subset of the measurements; the mean is the voxel-wise arithmetic
    average.  Deterministic given seed.

    The work is decomposed into per-voxel-block fitting tasks and
    per-patch prediction tasks whose structure does not depend on the
    worker count, and every reduction runs in a fixed order, so the
    result is byte-identical for any ``workers`` value and matches the
    serial composition of coefficient fitting and sliding-window
    prediction bit for bit.
    """
    if subsets is None:
        subsets = tta_subsets(table, n, k, b_target, b_tol, seed)
    else:
        subsets = tuple(subsets)
        if len(subsets) != n:
            raise ValueError("need exactly n subsets")
    if spec is None:
        spec = PatchSpec()
    eps = _scan_eps(b0)
    basis = ShBasis()
    grid = dwi.grid
    dims = grid.dims
    p = spec.size

    # per-scan invariants, shared by every member
    ref = b0.channel(0).astype(np.float64).reshape(-1, 1)
    background = (ref < eps).reshape(-1)
    ref = np.maximum(ref, eps)
    dwi_flat = dwi.data.reshape(-1, dwi.channels)
    n_vox = dwi_flat.shape[0]
    blocks = [
        (lo, min(lo + FIT_BLOCK, n_vox)) for lo in range(0, n_vox, FIT_BLOCK)
    ]

    # per-member solver on the canonically sorted subset directions
    fits = []
    for sel in subsets:
        idx = np.asarray(sel.indices, dtype=np.intp)
        d = table.dirs[idx]
        order = np.lexsort((d[:, 2], d[:, 1], d[:, 0]))
        fits.append((idx[order], _TruncatedLstsq(design_matrix(d[order], basis))))
    coeff_flat = [
        np.empty((n_vox, basis.n_coeffs), dtype=np.float32) for _ in subsets
    ]

    def fit_block(task):
        # bit-for-bit replica of b0_normalize + fit_sh on one voxel block
        mi, (lo, hi) = task
        idx_sorted, solver = fits[mi]
        raw = np.take(dwi_flat[lo:hi], idx_sorted, axis=1)
        ratio = raw.astype(np.float64) / ref[lo:hi]
        ratio = np.clip(ratio, 0.0, B0_CLAMP_MAX)
        ratio[background[lo:hi]] = 0.0
        block = ratio.astype(np.float32).astype(np.float64).T
        coeff_flat[mi][lo:hi] = solver.solve(block).T.astype(np.float32)

    _run_tasks(fit_block, [(mi, b) for mi in range(n) for b in blocks], workers)

    shape = dims + (basis.n_coeffs,)
    padded_coeffs = [_reflect_pad_to(c.reshape(shape), p) for c in coeff_flat]
    padded = padded_coeffs[0].shape[:3]
    pad_lo = [(pd - d) // 2 for pd, d in zip(padded, dims)]
    window = _blend_window(spec)
    positions = _window_positions(padded, spec)
    wsum = _window_weight_sum(padded, positions, window, p)

    def assemble(task):
        mi, contribs = task
        acc = np.zeros(padded + (model.n_classes,), dtype=np.float64)
        for (sx, sy, sz), contrib in zip(positions, contribs):
            acc[sx : sx + p, sy : sy + p, sz : sz + p, :] += contrib
        return _finalize_blend(acc, wsum, pad_lo, dims)

    flat_tasks = [(mi, pos) for mi in range(n) for pos in positions]
    contribs = _run_tasks(
        lambda t: _patch_contribution(model, padded_coeffs[t[0]], window, t[1], p),
        flat_tasks,
        workers,
    )
    per_member = [
        contribs[mi * len(positions) : (mi + 1) * len(positions)]
        for mi in range(n)
    ]
    outs = _run_tasks(assemble, list(enumerate(per_member)), workers)
    members = [Volume(grid, o) for o in outs]
    return TtaResult(tuple(members), mean_prediction(members), subsets)


_CHECKPOINT_MAGIC = b"DMRISEG1"


def save_checkpoint(model, path):
    """Flat binary: magic, class count, feature count, weights, biases."""
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", model.n_classes, model.n_features))
        f.write(model.weights.astype("<f4").tobytes(order="C"))
        f.write(model.bias.astype("<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint: bad magic")
    c, nf = struct.unpack_from("<II", blob, 8)
    expected = 16 + 4 * (c * nf + c)
    if len(blob) != expected:
        raise ValueError("checkpoint payload size mismatch")
    w = np.frombuffer(blob, dtype="<f4", count=c * nf, offset=16)
    b = np.frombuffer(blob, dtype="<f4", count=c, offset=16 + 4 * c * nf)
    return ReferenceModel(w.reshape(c, nf).astype(np.float64), b.astype(np.float64))


def write_train_log(log, path):
    lines = ["epoch,train_loss,val_loss,lr"]
    for e in log:
        lines.append(
            "%d,%s,%s,%s" % (e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr))
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
