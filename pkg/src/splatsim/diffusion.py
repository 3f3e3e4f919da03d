"""Desk-scale conditional DDPM: linear noise schedule, forward noising,
a small convolutional denoiser with a hand-derived backward pass, SGD
training on (condition, target) pairs, and ancestral sampling.

Pixel convention: RGB in [0,1] maps to model space as 2c - 1 and back as
(x + 1)/2 (clipped). All arrays are float64; video tensors are
(frames, height, width, channels).

Denoiser: channel-concat of x_t and the condition -> conv 3x3 ->
(+ learned projection of a sinusoidal timestep embedding as per-channel
bias) -> ReLU -> conv 3x3 -> ReLU -> optional temporal 1D conv over frames
(kernel 3, zero-padded, initialized at identity) -> conv 3x3 to the output
channels. The backward pass is written out layer by layer; no autodiff.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DiffusionError

CHECKPOINT_MAGIC = b"DCKP"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Schedule and forward process


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray       # (T,)
    alpha_bar: np.ndarray  # (T,) running product of (1 - beta)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        abar = np.asarray(self.alpha_bar, dtype=np.float64)
        if beta.ndim != 1 or beta.shape != abar.shape or beta.size == 0:
            raise DiffusionError("schedule arrays must be equal-length 1D")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise DiffusionError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(abar) >= 0):
            raise DiffusionError("alpha_bar must be strictly decreasing")
        if not np.allclose(abar, np.cumprod(1.0 - beta), rtol=0, atol=1e-12):
            raise DiffusionError("alpha_bar inconsistent with beta product")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", abar)

    @property
    def steps(self) -> int:
        return int(self.beta.size)


def make_schedule(steps: int, beta_start: float = 1e-4,
                  beta_end: float = 2e-2, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise DiffusionError(f"unknown schedule kind {kind!r}")
    if steps < 1:
        raise DiffusionError("steps must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise DiffusionError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, steps)
    return NoiseSchedule(beta, np.cumprod(1.0 - beta))


@dataclass(frozen=True)
class VideoTensor:
    """A (frames, height, width, channels) array with a role label."""

    data: np.ndarray
    role: str = "x0"   # x0 | x_t | epsilon | condition

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise DiffusionError("video tensors are 4D (F, H, W, C)")
        if not np.all(np.isfinite(arr)):
            raise DiffusionError("video tensor contains non-finite values")
        object.__setattr__(self, "data", arr)

    def __array__(self, dtype=None):
        return self.data if dtype is None else self.data.astype(dtype)


ArrayLike = Union[np.ndarray, VideoTensor]


def _as4d(x: ArrayLike, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise DiffusionError(f"{name} must be 4D (F, H, W, C)")
    return arr


def forward_sample(x0: ArrayLike, t: int, eps: ArrayLike,
                   sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    x0a, epsa = _as4d(x0, "x0"), _as4d(eps, "eps")
    if x0a.shape != epsa.shape:
        raise DiffusionError(f"shape mismatch {x0a.shape} vs {epsa.shape}")
    if not 1 <= t <= sched.steps:
        raise DiffusionError(f"t={t} outside schedule 1..{sched.steps}")
    abar = sched.alpha_bar[t - 1]
    return np.sqrt(abar) * x0a + np.sqrt(1.0 - abar) * epsa


# ---------------------------------------------------------------------------
# Denoiser model


@dataclass(frozen=True)
class DenoiserDescriptor:
    x_channels: int = 3
    cond_channels: int = 3
    hidden: int = 8
    t_embed_dim: int = 8
    temporal: bool = True

    @property
    def in_channels(self) -> int:
        return self.x_channels + self.cond_channels


def _param_layout(d: DenoiserDescriptor) -> list[tuple[str, tuple[int, ...]]]:
    layout = [
        ("conv1_w", (d.hidden, d.in_channels, 3, 3)),
        ("conv1_b", (d.hidden,)),
        ("temb_w", (d.hidden, d.t_embed_dim)),
        ("conv2_w", (d.hidden, d.hidden, 3, 3)),
        ("conv2_b", (d.hidden,)),
    ]
    if d.temporal:
        layout.append(("temporal_w", (3, d.hidden, d.hidden)))
    layout += [
        ("conv3_w", (d.x_channels, d.hidden, 3, 3)),
        ("conv3_b", (d.x_channels,)),
    ]
    return layout


@dataclass(frozen=True)
class DenoiserModel:
    desc: DenoiserDescriptor
    params: np.ndarray   # flat float64

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        if params.shape != (param_count(self.desc),):
            raise DiffusionError(
                f"parameter vector has {params.size} entries, descriptor "
                f"needs {param_count(self.desc)}")
        if not np.all(np.isfinite(params)):
            raise DiffusionError("parameters contain non-finite values")
        object.__setattr__(self, "params", params)

    def views(self) -> dict[str, np.ndarray]:
        out = {}
        offset = 0
        for name, shape in _param_layout(self.desc):
            size = int(np.prod(shape))
            out[name] = self.params[offset:offset + size].reshape(shape)
            offset += size
        return out

    def with_params(self, params: np.ndarray) -> "DenoiserModel":
        return DenoiserModel(self.desc, params)


def param_count(d: DenoiserDescriptor) -> int:
    return sum(int(np.prod(shape)) for _, shape in _param_layout(d))


def init_model(desc: DenoiserDescriptor, seed: int = 0) -> DenoiserModel:
    """He-style gaussian init; the temporal layer starts at identity so the
    untrained temporal path passes activations through unchanged."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in _param_layout(desc):
        if name.endswith("_b"):
            chunks.append(np.zeros(int(np.prod(shape))))
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        block = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        if name == "temporal_w":
            block = block * 0.01
            block[1] += np.eye(desc.hidden)
        chunks.append(block.reshape(-1))
    return DenoiserModel(desc, np.concatenate(chunks))


def sinusoidal_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb


# conv helpers (channels-first internally) ----------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H*W, C*9) patches of the zero-padded 3x3 windows."""
    b, c, h, w = x.shape
    pad = np.zeros((b, c, h + 2, w + 2))
    pad[:, :, 1:h + 1, 1:w + 1] = x
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(2, 3))
    # win: (B, C, H, W, 3, 3) -> (B, H, W, C, 3, 3) -> (B, H*W, C*9)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9)


def _col2im(dpatches: np.ndarray, b: int, c: int, h: int, w: int) -> np.ndarray:
    dpad = np.zeros((b, c, h + 2, w + 2))
    dp = dpatches.reshape(b, h, w, c, 3, 3)
    for di in range(3):
        for dj in range(3):
            dpad[:, :, di:di + h, dj:dj + w] += dp[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return dpad[:, :, 1:h + 1, 1:w + 1]


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    bb, c, h, ww = x.shape
    o = w.shape[0]
    patches = _im2col(x)
    out = patches @ w.reshape(o, -1).T + b
    return out.reshape(bb, h, ww, o).transpose(0, 3, 1, 2), patches


def _conv_backward(dout: np.ndarray, patches: np.ndarray, w: np.ndarray,
                   x_shape: tuple):
    bb, c, h, ww = x_shape
    o = w.shape[0]
    dflat = dout.transpose(0, 2, 3, 1).reshape(bb, h * ww, o)
    dw = np.einsum("bpo,bpk->ok", dflat, patches).reshape(w.shape)
    db = dflat.sum(axis=(0, 1))
    dx = _col2im(dflat @ w.reshape(o, -1), bb, c, h, ww)
    return dw, db, dx


def _temporal_forward(x: np.ndarray, w: np.ndarray):
    """x (F, C, H, W), w (3, C, C): 1D conv over frames, zero padded."""
    f = x.shape[0]
    pad = np.concatenate([np.zeros_like(x[:1]), x, np.zeros_like(x[:1])])
    out = sum(np.einsum("oc,fchw->fohw", w[k], pad[k:k + f]) for k in range(3))
    return out, pad


def _temporal_backward(dout: np.ndarray, pad: np.ndarray, w: np.ndarray):
    f = dout.shape[0]
    dw = np.stack([np.einsum("fohw,fchw->oc", dout, pad[k:k + f])
                   for k in range(3)])
    dpad = np.zeros_like(pad)
    for k in range(3):
        dpad[k:k + f] += np.einsum("oc,fohw->fchw", w[k], dout)
    return dw, dpad[1:f + 1]


def predict_eps(model: DenoiserModel, x_t: ArrayLike, t: int,
                v_c: ArrayLike, _cache: Optional[dict] = None) -> np.ndarray:
    """Run the denoiser; returns the noise estimate with x_t's shape."""
    xt = _as4d(x_t, "x_t")
    vc = _as4d(v_c, "v_c")
    d = model.desc
    if xt.shape[:3] != vc.shape[:3] or xt.shape[3] != d.x_channels \
            or vc.shape[3] != d.cond_channels:
        raise DiffusionError("input shapes do not match the descriptor")
    p = model.views()
    x = np.concatenate([xt, vc], axis=3).transpose(0, 3, 1, 2)  # (F,C,H,W)

    with np.errstate(over="ignore", invalid="ignore"):
        z1, patches1 = _conv_forward(x, p["conv1_w"], p["conv1_b"])
        emb = sinusoidal_embedding(t, d.t_embed_dim)
        z1 = z1 + (p["temb_w"] @ emb)[None, :, None, None]
        a1 = np.maximum(z1, 0.0)

        z2, patches2 = _conv_forward(a1, p["conv2_w"], p["conv2_b"])
        a2 = np.maximum(z2, 0.0)

        if d.temporal:
            a2t, pad = _temporal_forward(a2, p["temporal_w"])
        else:
            a2t, pad = a2, None

        out, patches3 = _conv_forward(a2t, p["conv3_w"], p["conv3_b"])
    if not np.all(np.isfinite(out)):
        raise DiffusionError("non-finite activation in the denoiser")
    if _cache is not None:
        _cache.update(x=x, patches1=patches1, z1=z1, a1=a1, patches2=patches2,
                      z2=z2, a2=a2, pad=pad, a2t=a2t, patches3=patches3,
                      emb=emb)
    return out.transpose(0, 2, 3, 1)


def _backward_params(model: DenoiserModel, cache: dict, dpred: np.ndarray
                     ) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameter vector, given
    d loss / d prediction (in (F, H, W, C) layout)."""
    d = model.desc
    p = model.views()
    grads = {}
    dout = dpred.transpose(0, 3, 1, 2)

    dw3, db3, da2t = _conv_backward(dout, cache["patches3"], p["conv3_w"],
                                    cache["a2t"].shape)
    grads["conv3_w"], grads["conv3_b"] = dw3, db3

    if d.temporal:
        dwt, da2 = _temporal_backward(da2t, cache["pad"], p["temporal_w"])
        grads["temporal_w"] = dwt
    else:
        da2 = da2t

    dz2 = da2 * (cache["z2"] > 0)
    dw2, db2, da1 = _conv_backward(dz2, cache["patches2"], p["conv2_w"],
                                   cache["a1"].shape)
    grads["conv2_w"], grads["conv2_b"] = dw2, db2

    dz1 = da1 * (cache["z1"] > 0)
    grads["temb_w"] = np.outer(dz1.sum(axis=(0, 2, 3)), cache["emb"])
    dw1, db1, _ = _conv_backward(dz1, cache["patches1"], p["conv1_w"],
                                 cache["x"].shape)
    grads["conv1_w"], grads["conv1_b"] = dw1, db1

    flat = []
    for name, shape in _param_layout(d):
        flat.append(grads[name].reshape(-1))
    return np.concatenate(flat)


# ---------------------------------------------------------------------------
# Loss, gradient, training


def vdm_loss(model_or_fn, x0: ArrayLike, v_c: ArrayLike, t: int,
             eps: ArrayLike, sched: NoiseSchedule) -> float:
    """Mean squared error between eps and the model's prediction on
    (forward_sample(x0, t, eps), t, v_c)."""
    x_t = forward_sample(x0, t, eps, sched)
    if callable(model_or_fn) and not isinstance(model_or_fn, DenoiserModel):
        pred = model_or_fn(x_t, t, np.asarray(v_c, dtype=np.float64))
    else:
        pred = predict_eps(model_or_fn, x_t, t, v_c)
    diff = pred - np.asarray(eps, dtype=np.float64)
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise DiffusionError("non-finite loss")
    return loss


def _draw_batch_noise(batch, sched: NoiseSchedule, seed: int, rng=None):
    """Per-element (t, eps) draws; t uniform on {1..T}. One rng, fixed order."""
    if rng is None:
        rng = np.random.default_rng(seed)
    draws = []
    for x0, _ in batch:
        x0a = _as4d(x0, "x0")
        t = int(rng.integers(1, sched.steps + 1))
        eps = rng.standard_normal(x0a.shape)
        draws.append((t, eps))
    return draws


def _batch_loss_and_grad(model: DenoiserModel, batch, sched: NoiseSchedule,
                         draws) -> tuple[float, np.ndarray]:
    total_loss = 0.0
    total_grad = np.zeros_like(model.params)
    for (x0, v_c), (t, eps) in zip(batch, draws):
        x0a, vca = _as4d(x0, "x0"), _as4d(v_c, "v_c")
        x_t = forward_sample(x0a, t, eps, sched)
        cache: dict = {}
        pred = predict_eps(model, x_t, t, vca, _cache=cache)
        diff = pred - eps
        total_loss += float(np.mean(diff * diff))
        dpred = 2.0 * diff / diff.size
        total_grad += _backward_params(model, cache, dpred)
    n = len(batch)
    grad = total_grad / n
    if not np.all(np.isfinite(grad)):
        raise DiffusionError("non-finite gradient")
    return total_loss / n, grad


def batch_vdm_loss(model: DenoiserModel, batch: Sequence[tuple],
                   sched: NoiseSchedule, seed: int) -> float:
    """The seeded mini-batch loss that grad_vdm differentiates."""
    draws = _draw_batch_noise(batch, sched, seed)
    loss = 0.0
    for (x0, v_c), (t, eps) in zip(batch, draws):
        loss += vdm_loss(model, x0, v_c, t, eps, sched)
    return loss / len(batch)


def grad_vdm(model: DenoiserModel, batch: Sequence[tuple],
             sched: NoiseSchedule, seed: int) -> np.ndarray:
    """Exact analytic gradient of batch_vdm_loss w.r.t. all parameters."""
    draws = _draw_batch_noise(batch, sched, seed)
    _, grad = _batch_loss_and_grad(model, batch, sched, draws)
    return grad


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    step_size: float = 0.05
    batch_size: int = 2
    seed: int = 0


def train(model: DenoiserModel, pairs: Sequence, sched: NoiseSchedule,
          config: TrainConfig = TrainConfig()) -> tuple[DenoiserModel, list[float]]:
    """Seeded SGD on the denoising objective over TrainingPair data.

    Each pair contributes (x0 = target frames, v_c = condition frames),
    both mapped to [-1, 1]."""
    if not pairs:
        raise DiffusionError("training needs at least one pair")
    data = [(2.0 * p.target.rgb_stack() - 1.0,
             2.0 * p.condition.rgb_stack() - 1.0) for p in pairs]
    shapes = {d[0].shape for d in data}
    if len(shapes) != 1:
        raise DiffusionError("training pairs must share one shape")
    rng = np.random.default_rng(config.seed)
    losses = []
    for _ in range(config.steps):
        idx = rng.integers(0, len(data), size=config.batch_size)
        batch = [data[i] for i in idx]
        draws = _draw_batch_noise(batch, sched, 0, rng=rng)
        loss, grad = _batch_loss_and_grad(model, batch, sched, draws)
        losses.append(loss)
        model = model.with_params(model.params - config.step_size * grad)
    return model, losses


# ---------------------------------------------------------------------------
# Sampling


def ddpm_sample(model_or_fn, v_c: ArrayLike, sched: NoiseSchedule, seed: int,
                shape: Optional[tuple] = None) -> np.ndarray:
    """Ancestral sampling from pure noise; posterior mean
    (x_t - beta/sqrt(1-alpha_bar) * eps_hat)/sqrt(alpha), variance beta,
    zero injected noise at the final step."""
    vca = _as4d(v_c, "v_c")
    if shape is None:
        if isinstance(model_or_fn, DenoiserModel):
            shape = vca.shape[:3] + (model_or_fn.desc.x_channels,)
        else:
            shape = vca.shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    for t in range(sched.steps, 0, -1):
        beta = sched.beta[t - 1]
        abar = sched.alpha_bar[t - 1]
        if callable(model_or_fn) and not isinstance(model_or_fn, DenoiserModel):
            eps_hat = model_or_fn(x, t, vca)
        else:
            eps_hat = predict_eps(model_or_fn, x, t, vca)
        mean = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(1.0 - beta)
        if t > 1:
            x = mean + np.sqrt(beta) * rng.standard_normal(shape)
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise DiffusionError(f"non-finite iterate at t={t}")
    return x


def sample_to_rgb(x: np.ndarray) -> np.ndarray:
    """Model space [-1,1] back to clipped RGB [0,1]."""
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: DenoiserModel, sched: NoiseSchedule, path: str) -> None:
    desc = model.desc
    header = {
        "descriptor": {"x_channels": desc.x_channels,
                       "cond_channels": desc.cond_channels,
                       "hidden": desc.hidden,
                       "t_embed_dim": desc.t_embed_dim,
                       "temporal": desc.temporal},
        "param_count": int(model.params.size),
        "schedule_steps": sched.steps,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(model.params.astype("<f8").tobytes())
        fh.write(sched.beta.astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[DenoiserModel, NoiseSchedule]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DiffusionError("not a denoiser checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise DiffusionError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    desc = DenoiserDescriptor(**header["descriptor"])
    n = header["param_count"]
    steps = header["schedule_steps"]
    expected = 12 + hlen + (n + steps) * 8
    if len(raw) != expected:
        raise DiffusionError("checkpoint truncated or padded")
    offset = 12 + hlen
    params = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).copy()
    offset += n * 8
    beta = np.frombuffer(raw, dtype="<f8", count=steps, offset=offset).copy()
    sched = NoiseSchedule(beta, np.cumprod(1.0 - beta))
    return DenoiserModel(desc, params), sched
