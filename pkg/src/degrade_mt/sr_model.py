"""Compact residual SR network with hand-rolled backprop and Adam.

Three 3x3 conv stages (in -> hidden -> hidden -> out, ReLU between) predict
a correction on top of the bicubic upsample of the LR input. Parameters
live in one flat vector (float32 by default, float64 available); the L1
loss and the returned gradient accumulate in float64 so gradient checks
are reproducible. Outputs are clamped only at evaluation time, never
inside the loss.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .degrade import bicubic_resize_array
from .img import ImagePlane

_CKPT_MAGIC = b"SRNETCKPT 1\n"


class ModelError(ValueError):
    """Shape violations or malformed checkpoints."""


def param_count(channels: int, hidden: int) -> int:
    return (
        hidden * channels * 9 + hidden
        + hidden * hidden * 9 + hidden
        + channels * hidden * 9 + channels
    )


@dataclass
class SRNet:
    scale: int
    channels: int
    hidden: int
    params: np.ndarray  # flat vector: w1,b1,w2,b2,w3,b3
    seed: int

    def __post_init__(self):
        expected = param_count(self.channels, self.hidden)
        if self.params.shape != (expected,):
            raise ModelError(f"expected {expected} parameters, got {self.params.shape}")

    @property
    def dtype(self):
        return self.params.dtype

    def copy(self) -> "SRNet":
        return SRNet(self.scale, self.channels, self.hidden, self.params.copy(), self.seed)

    def arch_description(self) -> str:
        return (
            f"conv3x3 {self.channels}->{self.hidden}->{self.hidden}->{self.channels} "
            f"relu residual-on-bicubic x{self.scale}"
        )


def _param_views(params: np.ndarray, channels: int, hidden: int):
    shapes = [
        (hidden, channels, 3, 3), (hidden,),
        (hidden, hidden, 3, 3), (hidden,),
        (channels, hidden, 3, 3), (channels,),
    ]
    views = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        views.append(params[offset : offset + size].reshape(shape))
        offset += size
    return views


def init_net(scale: int, channels: int = 1, hidden: int = 16, seed: int = 0,
             dtype=np.float32) -> SRNet:
    """He-normal conv weights, zero biases, drawn from a recorded seed."""
    if scale < 1:
        raise ModelError(f"scale must be >= 1, got {scale}")
    rng = np.random.default_rng(seed)
    params = np.zeros(param_count(channels, hidden), dtype=np.float64)
    net = SRNet(scale, channels, hidden, params, seed)
    w1, _, w2, _, w3, _ = _param_views(params, channels, hidden)
    for w in (w1, w2, w3):
        fan_in = w.shape[1] * 9
        w[:] = rng.normal(0.0, math.sqrt(2.0 / fan_in), w.shape)
    net.params = params.astype(dtype)
    return net


_tls = threading.local()


def _workspace(tag, shape, dtype) -> np.ndarray:
    """Reusable per-thread scratch buffer; cuts large-array allocation churn."""
    cache = getattr(_tls, "bufs", None)
    if cache is None:
        cache = _tls.bufs = {}
    key = (tag, shape, np.dtype(dtype))
    buf = cache.get(key)
    if buf is None:
        buf = cache[key] = np.empty(shape, dtype)
    return buf


def _conv3x3(x: np.ndarray, w_t: np.ndarray, bias, tag: str) -> tuple:
    """3x3 stride-1 zero-padded conv on channels-last (B,H,W,C) activations.

    `w_t` is the (9*C_in, C_out) kernel matrix whose rows run (dy, dx, c_in),
    matching the im2col block layout. Returns (output, im2col matrix); both
    live in `tag`-keyed workspaces and stay valid until the same tag and
    shape are requested again on this thread.
    """
    batch, h, wid, c_in = x.shape
    c_out = w_t.shape[1]
    padded = _workspace((tag, "pad"), (batch, h + 2, wid + 2, c_in), x.dtype)
    padded[:, 0] = 0
    padded[:, -1] = 0
    padded[:, :, 0] = 0
    padded[:, :, -1] = 0
    padded[:, 1 : h + 1, 1 : wid + 1] = x
    col = _workspace((tag, "col"), (batch, h, wid, 9 * c_in), x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        col[..., k * c_in : (k + 1) * c_in] = padded[:, dy : dy + h, dx : dx + wid, :]
    col = col.reshape(batch * h * wid, 9 * c_in)
    out = _workspace((tag, "out"), (batch * h * wid, c_out), x.dtype)
    np.matmul(col, w_t, out=out)
    if bias is not None:
        out += bias
    return out.reshape(batch, h, wid, c_out), col


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    # (Cout, Cin, 3, 3) -> (9*Cin, Cout) in (dy, dx, cin) row order
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0]))


def _kernel_matrix_rot(w: np.ndarray) -> np.ndarray:
    # gradient-propagation kernel: spatially flipped, in/out channels swapped
    return np.ascontiguousarray(
        w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, w.shape[1])
    )


def _conv3x3_scatter(x: np.ndarray, w_t: np.ndarray, tag: str) -> np.ndarray:
    """Output-only 3x3 conv via shift-accumulate; skips the im2col build.

    Used on the backward path where the im2col matrix has no second
    consumer. Matches `_conv3x3` up to float summation order.
    """
    batch, h, wid, c_in = x.shape
    c_out = w_t.shape[1]
    flat = x.reshape(-1, c_in)
    acc = _workspace((tag, "acc"), (batch, h + 2, wid + 2, c_out), x.dtype)
    acc[:] = 0
    for k in range(9):
        dy, dx = divmod(k, 3)
        prod = flat @ w_t[k * c_in : (k + 1) * c_in]
        acc[:, 2 - dy : 2 - dy + h, 2 - dx : 2 - dx + wid, :] += prod.reshape(
            batch, h, wid, c_out)
    return acc[:, 1 : h + 1, 1 : wid + 1, :]


def upsample_batch(net: SRNet, lr: np.ndarray) -> np.ndarray:
    """Bicubic-upsample a (B,C,h,w) batch to HR size in the net dtype."""
    up = bicubic_resize_array(lr.astype(np.float64), net.scale, "up")
    return np.ascontiguousarray(up.astype(net.dtype))


def _to_cl(x: np.ndarray) -> np.ndarray:  # (B,C,H,W) -> (B,H,W,C)
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _forward_cl(net: SRNet, up_cl: np.ndarray, want_cache: bool):
    w1, b1, w2, b2, w3, b3 = _param_views(net.params, net.channels, net.hidden)
    z1, col1 = _conv3x3(up_cl, _kernel_matrix(w1), b1, "f1")
    a1 = np.maximum(z1, 0)
    z2, col2 = _conv3x3(a1, _kernel_matrix(w2), b2, "f2")
    a2 = np.maximum(z2, 0)
    z3, col3 = _conv3x3(a2, _kernel_matrix(w3), b3, "f3")
    pred = up_cl + z3
    if not want_cache:
        return pred, None
    return pred, (z1, col1, z2, col2, col3)


def forward(net: SRNet, lr_img: ImagePlane) -> ImagePlane:
    """Evaluation-time forward pass: residual prediction, clamped to [0,1]."""
    if lr_img.channels != net.channels:
        raise ModelError(f"net expects {net.channels} channels, got {lr_img.channels}")
    if lr_img.height < 8 or lr_img.width < 8:
        raise ModelError(f"LR input must be at least 8x8, got {lr_img.height}x{lr_img.width}")
    up = upsample_batch(net, lr_img.data[None])
    pred, _ = _forward_cl(net, _to_cl(up), want_cache=False)
    return ImagePlane(pred[0].astype(np.float64).transpose(2, 0, 1))


def _as_batch_arrays(batch):
    if not batch:
        raise ModelError("empty batch")
    hr = np.stack([p.data for p, _ in batch])
    lr = np.stack([q.data for _, q in batch])
    return hr, lr


def batch_loss_cl(net: SRNet, hr_cl: np.ndarray, up_cl: np.ndarray) -> float:
    """Mean absolute error over all samples and pixels, float64 accumulation."""
    pred, _ = _forward_cl(net, up_cl.astype(net.dtype, copy=False), want_cache=False)
    diff = pred - hr_cl.astype(net.dtype, copy=False)
    per_sample = [float(np.mean(np.abs(d), dtype=np.float64)) for d in diff]
    return math.fsum(per_sample) / len(per_sample)


def batch_loss(net: SRNet, hr: np.ndarray, up: np.ndarray) -> float:
    return batch_loss_cl(net, _to_cl(hr), _to_cl(up))


_CHUNK_COL_BYTES = 2_000_000  # keep per-chunk im2col inside cache


def _chunk_size(batch, h, wid, hidden, itemsize) -> int:
    per_sample = h * wid * 9 * hidden * itemsize
    return max(1, min(batch, _CHUNK_COL_BYTES // max(per_sample, 1)))


def loss_and_grad_cl(net: SRNet, hr_cl: np.ndarray, up_cl: np.ndarray):
    """L1 loss and flat gradient for a channels-last (HR, upsampled-LR) batch.

    The batch is processed in cache-sized chunks with the gradient
    accumulated in float64; loss values are chunking-independent, gradients
    agree across chunkings to float reordering noise.
    """
    if hr_cl.shape != up_cl.shape:
        raise ModelError(f"HR batch {hr_cl.shape} vs upsampled batch {up_cl.shape}")
    hr_cl = hr_cl.astype(net.dtype, copy=False)
    up_cl = up_cl.astype(net.dtype, copy=False)
    batch, h, wid, _ = hr_cl.shape
    w1, b1, w2, b2, w3, b3 = _param_views(net.params, net.channels, net.hidden)
    k1, k2, k3 = _kernel_matrix(w1), _kernel_matrix(w2), _kernel_matrix(w3)
    r3, r2 = _kernel_matrix_rot(w3), _kernel_matrix_rot(w2)

    grad = np.zeros(net.params.size, dtype=np.float64)
    gw1, gb1, gw2, gb2, gw3, gb3 = _param_views(grad, net.channels, net.hidden)
    per_sample = []
    inv = net.dtype.type(1.0 / hr_cl.size)
    chunk = _chunk_size(batch, h, wid, net.hidden, hr_cl.itemsize)

    def accumulate(gw, gb, dz, col):
        flat = dz.reshape(-1, dz.shape[-1])
        # rows of col.T @ flat run (dy, dx, cin); flat layout wants (cout, cin, dy, dx)
        gw += (col.T @ flat).reshape(3, 3, gw.shape[1], gw.shape[0]).transpose(3, 2, 0, 1)
        gb += flat.sum(axis=0, dtype=np.float64)

    for start in range(0, batch, chunk):
        stop = min(batch, start + chunk)
        u = up_cl[start:stop]
        z1, col1 = _conv3x3(u, k1, b1, "b1")
        np.maximum(z1, 0, out=z1)
        z2, col2 = _conv3x3(z1, k2, b2, "b2")
        np.maximum(z2, 0, out=z2)
        z3, col3 = _conv3x3(z2, k3, b3, "b3")
        diff = z3  # reuse the conv output buffer: pred - hr in place
        diff += u
        diff -= hr_cl[start:stop]
        per_sample.extend(
            float(v) for v in np.abs(diff).mean(axis=(1, 2, 3), dtype=np.float64)
        )
        np.sign(diff, out=diff)
        diff *= inv
        accumulate(gw3, gb3, diff, col3)
        da2 = _conv3x3_scatter(diff, r3, "r3")
        da2 *= z2 > 0  # post-relu values share their sign pattern with pre-relu
        accumulate(gw2, gb2, da2, col2)
        da1 = _conv3x3_scatter(da2, r2, "r2")
        da1 *= z1 > 0
        accumulate(gw1, gb1, da1, col1)
    return math.fsum(per_sample) / batch, grad


def loss_and_grad_arrays(net: SRNet, hr: np.ndarray, up: np.ndarray):
    """L1 loss and flat parameter gradient for a prepared (B,C,H,W) batch."""
    if hr.shape != up.shape:
        raise ModelError(f"HR batch {hr.shape} vs upsampled batch {up.shape}")
    return loss_and_grad_cl(net, _to_cl(hr), _to_cl(up))


def loss_and_grad(net: SRNet, batch):
    """L1 loss and gradient for a list of (HR, LR) ImagePlane pairs."""
    hr, lr = _as_batch_arrays(batch)
    if hr.shape[-2:] != (lr.shape[-2] * net.scale, lr.shape[-1] * net.scale):
        raise ModelError(f"HR {hr.shape} is not LR {lr.shape} x scale {net.scale}")
    return loss_and_grad_arrays(net, hr, upsample_batch(net, lr))


@dataclass
class OptimState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)


def init_optim(net: SRNet, learning_rate: float) -> OptimState:
    return OptimState(
        learning_rate=learning_rate,
        m=np.zeros(net.params.size, dtype=np.float64),
        v=np.zeros(net.params.size, dtype=np.float64),
    )


def adam_step(net: SRNet, opt: OptimState, grad) -> tuple:
    """One in-place Adam update; moments stay float64 regardless of net dtype."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != net.params.shape:
        raise ModelError(f"gradient shape {g.shape} vs params {net.params.shape}")
    opt.step_count += 1
    t = opt.step_count
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * g * g
    m_hat = opt.m / (1.0 - opt.beta1 ** t)
    v_hat = opt.v / (1.0 - opt.beta2 ** t)
    new = net.params.astype(np.float64) - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)
    net.params[:] = new.astype(net.dtype)
    return net, opt


# ---------------------------------------------------------------------------
# Finite-difference utilities (also exposed via the `gradcheck` CLI command)

def finite_diff_gradient(net: SRNet, hr: np.ndarray, up: np.ndarray,
                         indices, step: float = 1e-3) -> np.ndarray:
    """Central finite differences on selected parameters, float64 evaluation.

    The loss at the perturbed points is computed through a float64 clone so
    the only oracle error is truncation; the realized step (after dtype
    rounding) is used in the denominator.
    """
    base = net.params.astype(np.float64)
    probe = SRNet(net.scale, net.channels, net.hidden, base.copy(), net.seed)
    out = np.empty(len(indices), dtype=np.float64)
    for j, idx in enumerate(indices):
        plus = net.params.copy()
        minus = net.params.copy()
        plus[idx] += net.dtype.type(step)
        minus[idx] -= net.dtype.type(step)
        realized = float(plus[idx]) - float(minus[idx])
        probe.params = base.copy()
        probe.params[idx] = float(plus[idx])
        loss_plus = batch_loss(probe, hr, up)
        probe.params[idx] = float(minus[idx])
        loss_minus = batch_loss(probe, hr, up)
        out[j] = (loss_plus - loss_minus) / realized
    return out


def gradient_check(net: SRNet, batch, probes: int = 20, step: float = 1e-3,
                   seed: int = 0) -> float:
    """Max |analytic - finite difference| scaled by the gradient's inf-norm."""
    hr, lr = _as_batch_arrays(batch)
    up = upsample_batch(net, lr)
    _, grad = loss_and_grad_arrays(net, hr, up)
    rng = np.random.default_rng(seed)
    indices = rng.choice(net.params.size, size=min(probes, net.params.size), replace=False)
    fd = finite_diff_gradient(net, hr, up, indices, step)
    scale = max(float(np.max(np.abs(grad))), 1e-12)
    return float(np.max(np.abs(grad[indices] - fd)) / scale)


# ---------------------------------------------------------------------------
# Checkpoints: versioned text header + little-endian float32 payload

def _net_meta(net: SRNet) -> dict:
    return {
        "arch": net.arch_description(),
        "scale": net.scale,
        "channels": net.channels,
        "hidden": net.hidden,
        "seed": net.seed,
        "param_count": int(net.params.size),
    }


def checkpoint_bytes(net: SRNet) -> bytes:
    header = {"format": "srnet-checkpoint", "version": 1, **_net_meta(net)}
    return _CKPT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + \
        net.params.astype("<f4").tobytes()


def save_checkpoint(path, net: SRNet):
    Path(path).write_bytes(checkpoint_bytes(net))


def bundle_bytes(named_nets) -> bytes:
    entries = [{"name": name, **_net_meta(net)} for name, net in named_nets.items()]
    header = {"format": "srnet-bundle", "version": 1, "entries": entries}
    payload = b"".join(net.params.astype("<f4").tobytes() for net in named_nets.values())
    return _CKPT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload


def save_bundle(path, named_nets):
    Path(path).write_bytes(bundle_bytes(named_nets))


def _split_header(raw: bytes, path) -> tuple:
    if not raw.startswith(_CKPT_MAGIC):
        raise ModelError(f"{path}: bad checkpoint magic")
    rest = raw[len(_CKPT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise ModelError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: unreadable header: {exc}") from exc
    return header, rest[nl + 1:]


def _net_from_meta(meta: dict, payload: np.ndarray, dtype) -> SRNet:
    expected = param_count(meta["channels"], meta["hidden"])
    if meta["param_count"] != expected or payload.size != expected:
        raise ModelError(f"parameter count mismatch: header {meta['param_count']}, "
                         f"payload {payload.size}, architecture {expected}")
    return SRNet(meta["scale"], meta["channels"], meta["hidden"],
                 payload.astype(dtype), meta["seed"])


def load_checkpoint(path, dtype=np.float32) -> SRNet:
    header, payload = _split_header(Path(path).read_bytes(), path)
    if header.get("format") != "srnet-checkpoint" or header.get("version") != 1:
        raise ModelError(f"{path}: not a v1 srnet checkpoint")
    params = np.frombuffer(payload, dtype="<f4")
    return _net_from_meta(header, params, dtype)


def load_bundle(path, dtype=np.float32) -> dict:
    header, payload = _split_header(Path(path).read_bytes(), path)
    if header.get("format") != "srnet-bundle" or header.get("version") != 1:
        raise ModelError(f"{path}: not a v1 srnet bundle")
    params = np.frombuffer(payload, dtype="<f4")
    nets = {}
    offset = 0
    for entry in header["entries"]:
        count = entry["param_count"]
        nets[entry["name"]] = _net_from_meta(entry, params[offset : offset + count], dtype)
        offset += count
    if offset != params.size:
        raise ModelError(f"{path}: payload size mismatch")
    return nets
