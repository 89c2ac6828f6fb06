"""A small from-scratch CNN patch classifier: conv-pool-conv-pool-dense-softmax.

Activations are NHWC float64 arrays. Convolution weights use the
(out, in, kh, kw) layout and the dense layer reads features flattened in
(row, col, channel) order.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .augment import AugmentConfig, apply as augment_patch, sample_stream
from .metrics import max_ba_from_scores
from .raster import Raster

log = logging.getLogger(__name__)

CONV1_MAPS = 8
CONV2_MAPS = 16
PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense_w", "dense_b")


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDataError(ValueError):
    pass


@dataclass
class NetParams:
    patch_size: int
    channels: int
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    dense_w: np.ndarray
    dense_b: np.ndarray

    def __post_init__(self):
        if self.patch_size < 4 or self.patch_size % 4:
            raise ValueError(f"patch size must be a positive multiple of 4, got {self.patch_size}")
        for name, shape in param_shapes(self.patch_size, self.channels).items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"non-finite values in {name}")
            setattr(self, name, arr)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def replace(self, **arrays) -> "NetParams":
        kw = self.tensors()
        kw.update(arrays)
        return NetParams(self.patch_size, self.channels, **kw)

    def as_float32(self) -> "NetParams":
        return self.replace(**{k: v.astype(np.float32).astype(np.float64)
                               for k, v in self.tensors().items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.tensors().values())


def param_shapes(patch_size: int, channels: int) -> dict[str, tuple[int, ...]]:
    side = patch_size // 4
    return {
        "conv1_w": (CONV1_MAPS, channels, 3, 3),
        "conv1_b": (CONV1_MAPS,),
        "conv2_w": (CONV2_MAPS, CONV1_MAPS, 3, 3),
        "conv2_b": (CONV2_MAPS,),
        "dense_w": (side * side * CONV2_MAPS, 2),
        "dense_b": (2,),
    }


def zero_params(patch_size: int, channels: int) -> NetParams:
    shapes = param_shapes(patch_size, channels)
    return NetParams(patch_size, channels, **{k: np.zeros(s) for k, s in shapes.items()})


def init_params(patch_size: int, channels: int, rng: np.random.Generator) -> NetParams:
    """He-uniform weights, zero biases."""
    arrays = {}
    for name, shape in param_shapes(patch_size, channels).items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
        limit = math.sqrt(6.0 / fan_in)
        arrays[name] = rng.uniform(-limit, limit, size=shape)
    return NetParams(patch_size, channels, **arrays)


# ---------------------------------------------------------------- layers


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n * h * wd, c * 9)
    wmat = w.reshape(w.shape[0], c * 9).T
    out = cols @ wmat + b
    return out.reshape(n, h, wd, w.shape[0]), cols


def _conv_backward(dout, cols, x_shape, w, need_dx=True):
    n, h, wd, c = x_shape
    f = w.shape[0]
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).T.reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(f, c * 9)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, h + 2, wd + 2, c))
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h, dj:dj + wd, :] += dcols[..., di, dj]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool_forward(x):
    quads = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    # index of the first maximal element in each 2x2 window
    arg = np.where(quads[0] == out, 0, np.where(quads[1] == out, 1, np.where(quads[2] == out, 2, 3)))
    return out, arg.astype(np.int8)


def _pool_backward(dout, arg, x_shape):
    dx = np.zeros(x_shape)
    dx[:, 0::2, 0::2] = dout * (arg == 0)
    dx[:, 0::2, 1::2] = dout * (arg == 1)
    dx[:, 1::2, 0::2] = dout * (arg == 2)
    dx[:, 1::2, 1::2] = dout * (arg == 3)
    return dx


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in layer {name}")


def _as_batch(params: NetParams, patches) -> np.ndarray:
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    p = params.patch_size
    if x.ndim != 4 or x.shape[1:] != (p, p, params.channels):
        raise ValueError(
            f"expected patches of shape (N, {p}, {p}, {params.channels}), got {x.shape}"
        )
    return x


def _forward(params: NetParams, x: np.ndarray, keep: bool):
    z1, cols1 = _conv_forward(x, params.conv1_w, params.conv1_b)
    a1 = np.maximum(z1, 0.0)
    p1, arg1 = _pool_forward(a1)
    z2, cols2 = _conv_forward(p1, params.conv2_w, params.conv2_b)
    a2 = np.maximum(z2, 0.0)
    p2, arg2 = _pool_forward(a2)
    feats = p2.reshape(x.shape[0], -1)
    logits = feats @ params.dense_w + params.dense_b
    for name, arr in (("conv1", z1), ("conv2", z2), ("dense", logits)):
        _check_finite(name, arr)
    if not keep:
        return logits, None
    cache = dict(x=x, z1=z1, cols1=cols1, a1=a1, arg1=arg1, p1=p1,
                 z2=z2, cols2=cols2, a2=a2, arg2=arg2, p2=p2, feats=feats)
    return logits, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(params: NetParams, patches, chunk: int = 512) -> np.ndarray:
    """Synthetic-class probability for every patch in an (N, P, P, C) stack."""
    x = _as_batch(params, patches)
    out = np.empty(x.shape[0])
    for s in range(0, x.shape[0], chunk):
        logits, _ = _forward(params, x[s:s + chunk], keep=False)
        out[s:s + chunk] = softmax(logits)[:, 1]
    return out


def forward(params: NetParams, patch) -> float:
    """Score one patch (a Raster or a P x P x C array)."""
    arr = patch.pixels if isinstance(patch, Raster) else patch
    return float(predict_proba(params, np.asarray(arr)[None])[0])


def loss_and_grads(params: NetParams, patches, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient for every parameter tensor."""
    x = _as_batch(params, patches)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("loss_and_grads needs a nonempty batch")
    if y.shape != (x.shape[0],) or np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be a vector of 0/1 matching the batch")
    n = x.shape[0]
    logits, c = _forward(params, x, keep=True)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), y].mean())
    _check_finite("loss", np.array(loss))

    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = {
        "dense_w": c["feats"].T @ dlogits,
        "dense_b": dlogits.sum(axis=0),
    }
    dp2 = (dlogits @ params.dense_w.T).reshape(c["p2"].shape)
    da2 = _pool_backward(dp2, c["arg2"], c["a2"].shape)
    dz2 = da2 * (c["z2"] > 0)
    dp1, grads["conv2_w"], grads["conv2_b"] = _conv_backward(dz2, c["cols2"], c["p1"].shape, params.conv2_w)
    da1 = _pool_backward(dp1, c["arg1"], c["a1"].shape)
    dz1 = da1 * (c["z1"] > 0)
    _, grads["conv1_w"], grads["conv1_b"] = _conv_backward(dz1, c["cols1"], x.shape, params.conv1_w,
                                                           need_dx=False)
    for name, g in grads.items():
        _check_finite(f"grad {name}", g)
    return loss, grads


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: NetParams, **kw) -> "AdamState":
        t = params.tensors()
        return cls({k: np.zeros_like(a) for k, a in t.items()},
                   {k: np.zeros_like(a) for k, a in t.items()}, **kw)


def adam_step(params: NetParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[NetParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new, m_new, v_new = {}, {}, {}
    for name, p in params.tensors().items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[name], v_new[name] = m, v
    return params.replace(**new), AdamState(m_new, v_new, t, b1, b2, state.eps)


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    params: NetParams
    summary: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    parts = [f"MNET 1 {p.patch_size} {p.channels}\n".encode("ascii")]
    parts += [p.tensors()[name].astype("<f4").tobytes() for name in PARAM_ORDER]
    parts.append(json.dumps(ckpt.summary, sort_keys=True).encode("utf-8"))
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    nl = blob.find(b"\n")
    head = blob[:nl].split() if nl > 0 else []
    if len(head) != 4 or head[0] != b"MNET" or head[1] != b"1":
        raise CheckpointError("not an MNET v1 checkpoint")
    try:
        patch_size, channels = int(head[2]), int(head[3])
    except ValueError as exc:
        raise CheckpointError(f"bad MNET header {blob[:nl]!r}") from exc
    if channels not in (1, 3) or patch_size < 4 or patch_size % 4:
        raise CheckpointError(f"unsupported MNET geometry P={patch_size}, channels={channels}")
    shapes = param_shapes(patch_size, channels)
    offset = nl + 1
    arrays = {}
    for name in PARAM_ORDER:
        count = int(np.prod(shapes[name]))
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated inside {name}")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shapes[name]).astype(np.float64)
        offset = end
    tail = blob[offset:]
    try:
        summary = json.loads(tail.decode("utf-8")) if tail else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint summary") from exc
    try:
        params = NetParams(patch_size, channels, **arrays)
    except NonFiniteError as exc:
        raise CheckpointError(str(exc)) from exc
    return Checkpoint(params, summary)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 250
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    min_lr: float = 1e-8
    early_stop_patience: int = 50
    max_epochs: int = 100
    split: tuple[float, float, float] = (0.64, 0.16, 0.20)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be an even number >= 2 (half real, half synthetic)")
        if abs(sum(self.split) - 1.0) > 1e-9 or any(f < 0 for f in self.split):
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {self.split}")
        if self.learning_rate < 0 or self.min_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        kw = dict(d)
        if "split" in kw:
            kw["split"] = tuple(kw["split"])
        return cls(**kw)


@dataclass
class LabeledPatches:
    """Patch stack (N, P, P, C), labels (0 real / 1 synthetic), and source-image ids."""

    patches: np.ndarray
    labels: np.ndarray
    sources: np.ndarray | None = None

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim == 3:
            self.patches = self.patches[..., None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sources is None:
            self.sources = np.arange(len(self.labels))
        self.sources = np.asarray(self.sources)
        if not (len(self.patches) == len(self.labels) == len(self.sources)):
            raise ValueError("patches, labels and sources must have equal length")

    def subset(self, idx) -> "LabeledPatches":
        return LabeledPatches(self.patches[idx], self.labels[idx], self.sources[idx])


def split_sources(sources, fractions, seed: int) -> dict[str, list]:
    """Partition the distinct source ids into train/val/test by the given fractions."""
    uniq = sorted(set(np.asarray(sources).tolist()))
    order = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(len(uniq))
    n = len(uniq)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    picks = [uniq[k] for k in order]
    return {
        "train": sorted(picks[:n_train]),
        "val": sorted(picks[n_train:n_train + n_val]),
        "test": sorted(picks[n_train + n_val:]),
    }


def _evaluate(params: NetParams, data: LabeledPatches) -> tuple[float, float]:
    probs = predict_proba(params, data.patches)
    eps = 1e-12
    p_true = np.where(data.labels == 1, probs, 1.0 - probs)
    loss = float(-np.mean(np.log(np.maximum(p_true, eps))))
    pred = probs >= 0.5
    pos = data.labels == 1
    tpr = pred[pos].mean() if pos.any() else 0.0
    tnr = (~pred[~pos]).mean() if (~pos).any() else 0.0
    return loss, float((tpr + tnr) / 2)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    split: dict[str, list]
    best_epoch: int
    stopped_early: bool


def train(dataset: LabeledPatches, cfg: TrainConfig, augment: AugmentConfig | None = None,
          split: dict[str, list] | None = None) -> TrainResult:
    """Train with class-balanced Adam batches, plateau LR decay and early stopping.

    The source ids of ``dataset`` are split train/val/test (or ``split`` is
    used verbatim). Returns the parameters from the epoch with the lowest
    validation loss.
    """
    labels = dataset.labels
    if set(np.unique(labels).tolist()) != {0, 1}:
        raise TrainingDataError("training data must contain both real (0) and synthetic (1) patches")
    if split is None:
        split = split_sources(dataset.sources, cfg.split, cfg.seed)
    in_split = {k: np.isin(dataset.sources, v) for k, v in split.items()}
    train_set = dataset.subset(np.flatnonzero(in_split["train"]))
    val_set = dataset.subset(np.flatnonzero(in_split["val"]))
    if len(val_set.labels) == 0:
        val_set = train_set
        log.warning("empty validation split; monitoring training loss instead")
    half = cfg.batch_size // 2
    real_idx = np.flatnonzero(train_set.labels == 0)
    syn_idx = np.flatnonzero(train_set.labels == 1)
    if min(len(real_idx), len(syn_idx)) < half:
        raise TrainingDataError(
            f"batch of {cfg.batch_size} needs {half} samples per class, training split has "
            f"{len(real_idx)} real and {len(syn_idx)} synthetic"
        )

    p, ch = train_set.patches.shape[1], train_set.patches.shape[3]
    params = init_params(p, ch, np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])))
    state = AdamState.zeros_like(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    use_aug = augment is not None

    lr = cfg.learning_rate
    best_loss, best_epoch, best_params = math.inf, -1, params
    plateau_best, bad_epochs = math.inf, 0
    history = []
    stopped = False
    n_batches = min(len(real_idx), len(syn_idx)) // half
    for epoch in range(cfg.max_epochs):
        r = shuffle_rng.permutation(real_idx)
        s = shuffle_rng.permutation(syn_idx)
        losses = []
        for b in range(n_batches):
            idx = np.concatenate((r[b * half:(b + 1) * half], s[b * half:(b + 1) * half]))
            x = train_set.patches[idx]
            if use_aug:
                x = np.stack([
                    augment_patch(Raster(x[k]), augment, sample_stream(augment.seed, epoch, int(i))).pixels
                    for k, i in enumerate(idx)
                ])
            loss, grads = loss_and_grads(params, x, train_set.labels[idx])
            params, state = adam_step(params, grads, state, lr)
            losses.append(loss)
        val_loss, val_ba = _evaluate(params, val_set)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_loss": val_loss, "val_ba": val_ba, "lr": lr})
        log.info("epoch %d train %.5f val %.5f ba %.4f lr %.1e",
                 epoch, history[-1]["train_loss"], val_loss, val_ba, lr)
        if val_loss < best_loss:
            best_loss, best_epoch, best_params = val_loss, epoch, params
        if val_loss < plateau_best:
            plateau_best, bad_epochs = val_loss, 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.plateau_patience:
                lr = max(lr * cfg.plateau_factor, cfg.min_lr)
                bad_epochs = 0
        if epoch - best_epoch >= cfg.early_stop_patience:
            stopped = True
            break

    final = best_params.as_float32()
    summary = {"best_epoch": best_epoch, "best_val_loss": best_loss,
               "epochs_run": len(history), "stopped_early": stopped,
               "train_config": cfg.to_dict()}
    return TrainResult(Checkpoint(final, summary), history, split, best_epoch, stopped)


def patch_max_ba(params: NetParams, data: LabeledPatches) -> tuple[float, float]:
    """Patch-level max balanced accuracy of the classifier on ``data``."""
    return max_ba_from_scores(predict_proba(params, data.patches), data.labels)


# ---------------------------------------------------------------- gradient check


def numeric_grads(params: NetParams, patches, labels, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of the mean cross-entropy for every parameter."""
    out = {}
    for name, arr in params.tensors().items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up, _ = loss_and_grads(params, patches, labels)
            flat[k] = orig - h
            down, _ = loss_and_grads(params, patches, labels)
            flat[k] = orig
            g.reshape(-1)[k] = (up - down) / (2 * h)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(seed: int, patch_size: int, channels: int = 1, batch: int = 4,
               corrupt: str | None = None, zero_weights: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``corrupt`` names a parameter tensor whose analytic gradient is doubled
    (a mutation control); ``zero_weights`` checks the all-zero network.
    """
    if patch_size < 8 or patch_size % 4:
        raise ValueError("grad_check needs patch_size >= 8 and divisible by 4")
    rng = np.random.default_rng(seed)
    if zero_weights:
        params = zero_params(patch_size, channels)
    else:
        params = init_params(patch_size, channels, rng)
        params = params.replace(**{k: v + rng.normal(0, 0.1, v.shape)
                                   for k, v in params.tensors().items() if k.endswith("_b")})
    x = rng.random((batch, patch_size, patch_size, channels))
    y = np.arange(batch) % 2
    _, analytic = loss_and_grads(params, x, y)
    if corrupt is not None:
        analytic[corrupt] = analytic[corrupt] * 2.0
    numeric = numeric_grads(params, x, y)
    return max(relative_error(analytic[k], numeric[k]) for k in PARAM_ORDER)
