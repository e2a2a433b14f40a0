"""Small numpy occupancy decoder trained with the focal loss.

Pipeline: BEV feature (C, H, W) -> regroup channels into (C', D, H, W) ->
stack of same-padded 3D convolutions with ReLU between them -> sigmoid.
Forward and backward passes are written out by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergenceError, ValidationError
from .loss import FocalLossParams, clamp_active, focal_loss, focal_loss_grad
from .occupancy import GridSpec, OccupancyGrid4D


# --- BEV <-> voxel features --------------------------------------------------


def reshape_bev(f: np.ndarray, d: int) -> np.ndarray:
    """(C, H, W) -> (C // d, d, H, W); channel c goes to (c // d, c % d)."""
    f = np.asarray(f)
    if f.ndim != 3:
        raise ValidationError(f"BEV feature must be (C, H, W), got shape {f.shape}")
    C, H, W = f.shape
    if d < 1 or C % d:
        raise ValidationError(f"channel count {C} is not divisible by height bins {d}")
    return f.reshape(C // d, d, H, W)


def unreshape_bev(v: np.ndarray) -> np.ndarray:
    """Inverse of ``reshape_bev``."""
    Cp, D, H, W = v.shape
    return v.reshape(Cp * D, H, W)


# --- 3D convolution ----------------------------------------------------------


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out, in, kz, ky, kx), odd kernel sizes
    bias: np.ndarray  # (out,)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class DecoderParams:
    layers: list[ConvLayer] = field(default_factory=list)

    def validate(self, in_channels: int) -> None:
        if not self.layers:
            raise ValidationError("decoder needs at least one layer")
        c = in_channels
        for i, layer in enumerate(self.layers):
            w = layer.weight
            if w.ndim != 5 or any(k % 2 == 0 for k in w.shape[2:]):
                raise ValidationError(f"layer {i}: weight must be (out, in, kz, ky, kx) with odd kernels")
            if w.shape[1] != c:
                raise ValidationError(f"layer {i}: expects {w.shape[1]} input channels, got {c}")
            if layer.bias.shape != (w.shape[0],):
                raise ValidationError(f"layer {i}: bias shape {layer.bias.shape} != ({w.shape[0]},)")
            c = w.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias.ravel()]) for l in self.layers])

    def copy(self) -> DecoderParams:
        return DecoderParams([ConvLayer(l.weight.copy(), l.bias.copy()) for l in self.layers])

    @property
    def n_parameters(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)


def _windows(x: np.ndarray, kshape) -> np.ndarray:
    pads = [(0, 0)] + [(k // 2, k // 2) for k in kshape]
    xp = np.pad(x, pads)
    return sliding_window_view(xp, kshape, axis=(1, 2, 3))  # (in, D, H, W, kz, ky, kx)


def conv3d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Same-padded (zero) 3D cross-correlation: (in, D, H, W) -> (out, D, H, W)."""
    win = _windows(x, layer.weight.shape[2:])
    out = np.tensordot(layer.weight, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    return out + layer.bias[:, None, None, None]


def conv3d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Gradients of ``conv3d`` w.r.t. weight, bias and input."""
    kz, ky, kx = layer.weight.shape[2:]
    win = _windows(x, (kz, ky, kx))
    g_w = np.tensordot(grad_out, win, axes=([1, 2, 3], [1, 2, 3]))
    g_b = grad_out.sum(axis=(1, 2, 3))
    # input gradient of a same-padded correlation = same-padded correlation
    # of grad_out with the spatially flipped, in/out-transposed kernel
    flipped = layer.weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    g_x = conv3d(grad_out, ConvLayer(flipped, np.zeros(flipped.shape[0])))
    return g_w, g_b, g_x


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(v: np.ndarray, params: DecoderParams):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 4:
        raise ValidationError(f"voxel feature must be (C', D, H, W), got {v.shape}")
    params.validate(v.shape[0])
    inputs, h = [], v
    for i, layer in enumerate(params.layers):
        inputs.append(h)
        z = conv3d(h, layer)
        h = np.maximum(z, 0.0) if i < len(params.layers) - 1 else z
    return sigmoid(h), inputs


def decoder_forward(v: np.ndarray, params: DecoderParams) -> np.ndarray:
    """Occupancy probabilities (m, D, H, W), m = output channels of the last layer."""
    return _forward(v, params)[0]


def _backward(probs: np.ndarray, inputs: list, params: DecoderParams, upstream_grad: np.ndarray):
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != probs.shape:
        raise ValidationError(f"upstream gradient shape {upstream_grad.shape} != output shape {probs.shape}")
    g = upstream_grad * probs * (1.0 - probs)
    grads = [None] * len(params.layers)
    for i in reversed(range(len(params.layers))):
        g_w, g_b, g_x = conv3d_backward(inputs[i], params.layers[i], g)
        grads[i] = (g_w, g_b)
        # inputs[i] = relu(z_{i-1}) for i > 0; relu' is 1 exactly where that is positive
        g = g_x * (inputs[i] > 0) if i > 0 else g_x
    return grads, g


def decoder_backward(v: np.ndarray, params: DecoderParams, upstream_grad: np.ndarray):
    """Reverse-mode gradients of ``decoder_forward``.

    Args:
        upstream_grad: d(loss)/d(probabilities), shape of the forward output.

    Returns:
        (list of (grad_weight, grad_bias) per layer, grad w.r.t. ``v``).
    """
    probs, inputs = _forward(v, params)
    return _backward(probs, inputs, params, upstream_grad)


# --- synthetic scenes --------------------------------------------------------


@dataclass(frozen=True)
class ToyConfig:
    dims: tuple[int, int, int] = (16, 32, 32)
    layers: int = 2
    hidden: int = 8
    kernel: int = 3
    feature_channels: int = 2  # C'; the BEV feature has C' * D channels
    lr: float = 1.0
    iters: int = 500
    seed: int = 0
    m: int = 1
    n_boxes: int = 6
    feature_noise: float = 1.0
    loss: FocalLossParams = FocalLossParams()

    def __post_init__(self) -> None:
        if self.layers < 1 or self.hidden < 1 or self.feature_channels < 1 or self.m < 1:
            raise ValidationError("layers, hidden, feature_channels and m must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError(f"kernel must be odd, got {self.kernel}")
        if self.iters < 0 or not self.lr >= 0:
            raise ValidationError("iters and lr must be >= 0")


def toy_grid_spec(dims) -> GridSpec:
    return GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=(0.5, 0.5, 0.5), dims=tuple(dims))


def make_box_world(dims=(16, 32, 32), seed: int = 0, n_boxes: int = 6, m: int = 1) -> OccupancyGrid4D:
    """Ground plane plus axis-aligned boxes; later timesteps shift the boxes along x."""
    D, H, W = dims
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(n_boxes):
        h, l, w = rng.integers(2, max(3, D // 2) + 1), rng.integers(3, max(4, H // 4) + 1), rng.integers(3, max(4, W // 4) + 1)
        y0, x0 = rng.integers(0, max(1, H - l)), rng.integers(0, max(1, W - w))
        boxes.append((h, y0, l, x0, w, int(rng.integers(-2, 3))))
    bits = np.zeros((m, D, H, W), dtype=bool)
    for t in range(m):
        bits[t, 0] = True
        for h, y0, l, x0, w, vx in boxes:
            xs = min(max(x0 + vx * t, 0), W - 1)
            bits[t, 1:1 + h, y0:y0 + l, xs:xs + w] = True
    return OccupancyGrid4D(toy_grid_spec(dims), bits)


def make_feature(target: OccupancyGrid4D, feature_channels: int = 2, noise: float = 0.5, seed: int = 0) -> np.ndarray:
    """BEV feature (C' * D, H, W) that encodes the first timestep with seeded gains and noise."""
    rng = np.random.default_rng([seed, 1])
    occ = target.bits[0].astype(np.float64) * 2.0 - 1.0
    gains = rng.uniform(0.5, 1.5, feature_channels) * rng.choice([-1.0, 1.0], feature_channels)
    offsets = rng.normal(0.0, 0.2, feature_channels)
    v = gains[:, None, None, None] * occ[None] + offsets[:, None, None, None]
    v = v + noise * rng.standard_normal(v.shape)
    return unreshape_bev(v)


def init_decoder(in_channels: int, out_channels: int, hidden: int, layers: int, kernel: int, seed: int) -> DecoderParams:
    """He-normal weights and zero biases from a fixed seed."""
    rng = np.random.default_rng([seed, 2])
    chans = [in_channels] + [hidden] * (layers - 1) + [out_channels]
    out = []
    for c_in, c_out in zip(chans, chans[1:]):
        fan_in = c_in * kernel**3
        w = rng.standard_normal((c_out, c_in, kernel, kernel, kernel)) * math.sqrt(2.0 / fan_in)
        out.append(ConvLayer(w, np.zeros(c_out)))
    return DecoderParams(out)


# --- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    params: DecoderParams
    history: list[float]
    probs: np.ndarray


def loss_and_grads(feature: np.ndarray, target, params: DecoderParams, d: int, loss_params: FocalLossParams):
    """Focal loss of the full pipeline and its gradients w.r.t. params and the BEV feature."""
    probs, inputs = _forward(reshape_bev(feature, d), params)
    if not np.isfinite(probs).all():
        return math.nan, None, None, probs
    loss = focal_loss(probs, target, loss_params)
    grads, g_v = _backward(probs, inputs, params, focal_loss_grad(probs, target, loss_params))
    return loss, grads, unreshape_bev(g_v), probs


def train_toy(target: OccupancyGrid4D, cfg: ToyConfig = ToyConfig(), feature: Optional[np.ndarray] = None) -> TrainResult:
    """Plain gradient descent on the focal loss.

    ``history[i]`` is the loss before update ``i``; the last entry is the loss
    after the final update, so ``len(history) == cfg.iters + 1``.
    """
    D = target.spec.dims[0]
    if feature is None:
        feature = make_feature(target, cfg.feature_channels, cfg.feature_noise, cfg.seed)
    params = init_decoder(feature.shape[0] // D, target.m, cfg.hidden, cfg.layers, cfg.kernel, cfg.seed)
    history = []
    for it in range(cfg.iters + 1):
        loss, grads, _, probs = loss_and_grads(feature, target, params, D, cfg.loss)
        if not math.isfinite(loss):
            raise DivergenceError(it, loss)
        history.append(loss)
        if it == cfg.iters:
            break
        for layer, (g_w, g_b) in zip(params.layers, grads):
            layer.weight -= cfg.lr * g_w
            layer.bias -= cfg.lr * g_b
    return TrainResult(params, history, probs)


# --- gradient check ----------------------------------------------------------


@dataclass(frozen=True)
class GradcheckConfig:
    dims: tuple[int, int, int] = (2, 3, 3)
    feature_channels: int = 2
    hidden: int = 4
    layers: int = 2
    kernel: int = 3
    m: int = 1
    seed: int = 0
    loss: FocalLossParams = FocalLossParams()
    weight_scale: float = 1.0


def fd_gradcheck(cfg: GradcheckConfig = GradcheckConfig(), eps: float = 1e-6, floor: float = 1e-8,
                 feature: Optional[np.ndarray] = None, params: Optional[DecoderParams] = None) -> float:
    """Max relative error of the analytic end-to-end gradient vs central differences.

    Covers every decoder parameter and every BEV feature entry. Entries whose
    perturbation changes which voxels sit in the clamped (flat) region are
    skipped. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    D, H, W = cfg.dims
    rng = np.random.default_rng([cfg.seed, 3])
    if feature is None:
        feature = rng.standard_normal((cfg.feature_channels * D, H, W))
    target = rng.random((cfg.m, D, H, W)) < 0.4
    if params is None:
        params = init_decoder(feature.shape[0] // D, cfg.m, cfg.hidden, cfg.layers, cfg.kernel, cfg.seed)
        for layer in params.layers:
            layer.weight *= cfg.weight_scale
            layer.bias[:] = rng.normal(0.0, 0.1, layer.bias.shape)
    if params.n_parameters > 1000:
        raise ValidationError(f"gradcheck instance too large ({params.n_parameters} parameters)")

    _, grads, g_feat, probs = loss_and_grads(feature, target, params, D, cfg.loss)
    base_clamp = clamp_active(probs, cfg.loss)

    def evaluate():
        p = decoder_forward(reshape_bev(feature, D), params)
        return focal_loss(p, target, cfg.loss), clamp_active(p, cfg.loss)

    def central(arr: np.ndarray, idx):
        orig = arr[idx]
        arr[idx] = orig + eps
        lp, cp = evaluate()
        arr[idx] = orig - eps
        lm, cm = evaluate()
        arr[idx] = orig
        if not (np.array_equal(cp, base_clamp) and np.array_equal(cm, base_clamp)):
            return None
        return (lp - lm) / (2 * eps)

    worst = 0.0
    pairs = [(layer.weight, g_w) for layer, (g_w, _) in zip(params.layers, grads)]
    pairs += [(layer.bias, g_b) for layer, (_, g_b) in zip(params.layers, grads)]
    pairs.append((feature, g_feat))
    for arr, g in pairs:
        for idx in np.ndindex(arr.shape):
            num = central(arr, idx)
            if num is None:
                continue
            a = g[idx]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst
