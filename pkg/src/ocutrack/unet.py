"""U-Net assembly, training, inference, and weight persistence.

The network is the canonical contracting/expanding shape built from nncore
ops: per contracting level two 3x3 valid convs + ReLU then a 2x2 max pool,
a bottleneck conv pair, per expanding level a 2x2 up-conv, a center-crop
skip concat and two more convs, and a final 1x1 conv + sigmoid to a single
probability channel. Valid padding shrinks the output below the input size;
``output_shape`` runs the exact size recursion and rejects infeasible
configs.

Two independent single-channel models are trained in practice: one for the
pupil, one for the corneal reflection. Passing an already-trained model to
``train`` simply continues optimization - that is the whole incremental
training story.

Weights file layout (little-endian): magic ``OCUW``, u32 version (=1),
u32 header length, header = the config as canonical JSON, then each
parameter's float32 values in manifest order. Manifest order is encoder
levels 0..depth-1 (conv1 w/b, conv2 w/b), bottleneck (conv1 w/b, conv2
w/b), decoder levels depth-1..0 (up w/b, conv1 w/b, conv2 w/b), head w/b.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .errors import (
    BadMagic,
    EmptyDataset,
    InfeasibleInput,
    ManifestMismatch,
    SizeMismatch,
    TruncatedPayload,
    VersionUnsupported,
)
from .imagekit import BinaryMask, GrayImage
from .nncore import ParamSet

WEIGHTS_MAGIC = b"OCUW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    depth: int
    base_channels: int
    input_size: tuple[int, int]  # (H, W)
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise InfeasibleInput("depth must be >= 1")
        if self.base_channels < 1:
            raise InfeasibleInput("base_channels must be >= 1")
        if self.in_channels != 1 or self.out_channels != 1:
            raise InfeasibleInput("only single-channel input/output is supported")


@dataclass
class UNetModel:
    config: UNetConfig
    params: ParamSet


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    pixel_accuracy: float
    iou: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)


@dataclass
class TrainParams:
    lr: float = 0.12
    momentum: float = 0.9
    epochs: int = 20
    holdout_fraction: float = 0.15
    shuffle_seed: int = 0


def _contract(size: int, what: str) -> int:
    out = size - 4
    if out < 1:
        raise InfeasibleInput(f"{what}: size {size} too small for two valid convs")
    return out


def output_shape(config: UNetConfig) -> tuple[int, int]:
    """Run the valid-padding size recursion; raises InfeasibleInput on failure.

    Contracting level: s -> s-4 then /2 (must be even). Bottleneck: s -> s-4.
    Expanding level: s -> 2s, center-crop concat, then -4. Also verifies each
    skip can be center-cropped to its decoder partner (even margin).
    """
    sizes = []
    for dim, s in zip("HW", config.input_size):
        skips = []
        for level in range(config.depth):
            s = _contract(s, f"{dim} level {level}")
            skips.append(s)
            if s % 2:
                raise InfeasibleInput(f"{dim} level {level}: size {s} odd at pool")
            s //= 2
        s = _contract(s, f"{dim} bottleneck")
        for level in reversed(range(config.depth)):
            s *= 2
            margin = skips[level] - s
            if margin < 0 or margin % 2:
                raise InfeasibleInput(
                    f"{dim} level {level}: cannot crop skip {skips[level]} to {s}")
            s = _contract(s, f"{dim} level {level} (expanding)")
        sizes.append(s)
    return sizes[0], sizes[1]


def output_offset(config: UNetConfig) -> tuple[int, int]:
    """(row, col) of output pixel (0,0) in input coordinates (center aligned)."""
    ho, wo = output_shape(config)
    h, w = config.input_size
    return (h - ho) // 2, (w - wo) // 2


def manifest(config: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Deterministic (name, shape) list defining parameter and file order."""
    base, depth = config.base_channels, config.depth
    chans = [base * 2 ** i for i in range(depth + 1)]
    entries: list[tuple[str, tuple[int, ...]]] = []

    def conv_pair(prefix: str, c_in: int, c_out: int) -> None:
        entries.append((f"{prefix}_conv1_w", (c_out, c_in, 3, 3)))
        entries.append((f"{prefix}_conv1_b", (c_out,)))
        entries.append((f"{prefix}_conv2_w", (c_out, c_out, 3, 3)))
        entries.append((f"{prefix}_conv2_b", (c_out,)))

    c_in = config.in_channels
    for i in range(depth):
        conv_pair(f"enc{i}", c_in, chans[i])
        c_in = chans[i]
    conv_pair("bott", chans[depth - 1], chans[depth])
    for i in reversed(range(depth)):
        entries.append((f"dec{i}_up_w", (chans[i], chans[i + 1], 2, 2)))
        entries.append((f"dec{i}_up_b", (chans[i],)))
        conv_pair(f"dec{i}", 2 * chans[i], chans[i])
    entries.append(("head_w", (config.out_channels, chans[0], 1, 1)))
    entries.append(("head_b", (config.out_channels,)))
    return entries


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith("up_w"):
        return shape[1]  # each output pixel receives one tap per channel
    return int(np.prod(shape[1:]))


def build(config: UNetConfig, seed: int) -> UNetModel:
    """He-normal weights (std = sqrt(2/fan_in)) from a seeded PRNG; zero biases."""
    output_shape(config)
    rng = np.random.Generator(np.random.PCG64(seed))
    params = ParamSet()
    for name, shape in manifest(config):
        if name.endswith("_b"):
            params.add(name, np.zeros(shape, dtype=np.float32))
        else:
            std = np.sqrt(2.0 / _fan_in(name, shape))
            params.add(name, rng.normal(0.0, std, shape).astype(np.float32))
    return UNetModel(config, params)


def _run_forward(params: ParamSet, config: UNetConfig, x: np.ndarray):
    """Forward pass returning the probability map and structured caches."""
    depth = config.depth
    enc_caches, skips = [], []
    for i in range(depth):
        x, c1 = nncore.conv2d_valid(x, params[f"enc{i}_conv1_w"].value,
                                    params[f"enc{i}_conv1_b"].value)
        x, r1 = nncore.relu(x)
        x, c2 = nncore.conv2d_valid(x, params[f"enc{i}_conv2_w"].value,
                                    params[f"enc{i}_conv2_b"].value)
        x, r2 = nncore.relu(x)
        skips.append(x)
        x, pc = nncore.maxpool2(x)
        enc_caches.append((c1, r1, c2, r2, pc))
    x, b1 = nncore.conv2d_valid(x, params["bott_conv1_w"].value, params["bott_conv1_b"].value)
    x, br1 = nncore.relu(x)
    x, b2 = nncore.conv2d_valid(x, params["bott_conv2_w"].value, params["bott_conv2_b"].value)
    x, br2 = nncore.relu(x)
    dec_caches = {}
    for i in reversed(range(depth)):
        x, uc = nncore.upconv2(x, params[f"dec{i}_up_w"].value, params[f"dec{i}_up_b"].value)
        x, cc = nncore.concat_crop(skips[i], x)
        x, c1 = nncore.conv2d_valid(x, params[f"dec{i}_conv1_w"].value,
                                    params[f"dec{i}_conv1_b"].value)
        x, r1 = nncore.relu(x)
        x, c2 = nncore.conv2d_valid(x, params[f"dec{i}_conv2_w"].value,
                                    params[f"dec{i}_conv2_b"].value)
        x, r2 = nncore.relu(x)
        dec_caches[i] = (uc, cc, c1, r1, c2, r2)
    x, hc = nncore.conv1x1(x, params["head_w"].value, params["head_b"].value)
    prob, hs = nncore.sigmoid(x)
    return prob, (enc_caches, (b1, br1, b2, br2), dec_caches, (hc, hs))


def _run_backward(params: ParamSet, config: UNetConfig, caches, grad_prob: np.ndarray):
    """Accumulate parameter gradients for one sample; returns grad wrt input."""
    depth = config.depth
    enc_caches, (b1, br1, b2, br2), dec_caches, (hc, hs) = caches

    def accum(prefix, grads):
        gw, gb = grads
        params[f"{prefix}_w"].grad += gw
        params[f"{prefix}_b"].grad += gb

    g = nncore.sigmoid_backward(hs, grad_prob)
    g, gw, gb = nncore.conv1x1_backward(hc, g)
    accum("head", (gw, gb))
    skip_grads = {}
    for i in range(depth):
        uc, cc, c1, r1, c2, r2 = dec_caches[i]
        g = nncore.relu_backward(r2, g)
        g, gw, gb = nncore.conv2d_valid_backward(c2, g)
        accum(f"dec{i}_conv2", (gw, gb))
        g = nncore.relu_backward(r1, g)
        g, gw, gb = nncore.conv2d_valid_backward(c1, g)
        accum(f"dec{i}_conv1", (gw, gb))
        skip_grads[i], g = nncore.concat_crop_backward(cc, g)
        g, gw, gb = nncore.upconv2_backward(uc, g)
        accum(f"dec{i}_up", (gw, gb))
    g = nncore.relu_backward(br2, g)
    g, gw, gb = nncore.conv2d_valid_backward(b2, g)
    accum("bott_conv2", (gw, gb))
    g = nncore.relu_backward(br1, g)
    g, gw, gb = nncore.conv2d_valid_backward(b1, g)
    accum("bott_conv1", (gw, gb))
    for i in reversed(range(depth)):
        c1, r1, c2, r2, pc = enc_caches[i]
        g = nncore.maxpool2_backward(pc, g)
        g = g + skip_grads[i]
        g = nncore.relu_backward(r2, g)
        g, gw, gb = nncore.conv2d_valid_backward(c2, g)
        accum(f"enc{i}_conv2", (gw, gb))
        g = nncore.relu_backward(r1, g)
        g, gw, gb = nncore.conv2d_valid_backward(c1, g)
        accum(f"enc{i}_conv1", (gw, gb))
    return g


def _check_input(model: UNetModel, image: GrayImage) -> np.ndarray:
    if (image.height, image.width) != tuple(model.config.input_size):
        raise SizeMismatch(
            f"image {image.height}x{image.width} vs configured "
            f"{model.config.input_size[0]}x{model.config.input_size[1]}")
    return image.pixels[None, :, :]


def forward(model: UNetModel, image: GrayImage) -> tuple[np.ndarray, tuple[int, int]]:
    """Probability map over the output window plus its (row, col) offset."""
    x = _check_input(model, image)
    prob, _ = _run_forward(model.params, model.config, x)
    return prob[0], output_offset(model.config)


def predict_mask(model: UNetModel, image: GrayImage, prob_threshold: float = 0.5) -> BinaryMask:
    """Thresholded probability map placed at its offset; border stays false."""
    prob, (oy, ox) = forward(model, image)
    full = np.zeros((image.height, image.width), dtype=bool)
    full[oy:oy + prob.shape[0], ox:ox + prob.shape[1]] = prob >= prob_threshold
    return BinaryMask(full)


def pixel_accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    """Fraction of pixels where the boolean rasters agree."""
    return float(np.mean(pred == target))


def iou(pred: np.ndarray, target: np.ndarray) -> float:
    """Intersection over union; empty-over-empty counts as 1."""
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def _crop_target(mask: BinaryMask, config: UNetConfig) -> np.ndarray:
    oy, ox = output_offset(config)
    ho, wo = output_shape(config)
    return mask.pixels[oy:oy + ho, ox:ox + wo]


def evaluate(model: UNetModel, dataset, prob_threshold: float = 0.5) -> tuple[float, float]:
    """Mean pixel accuracy and IoU over (image, mask) pairs, output window only."""
    accs, ious = [], []
    for image, mask in dataset:
        x = _check_input(model, image)
        prob, _ = _run_forward(model.params, model.config, x)
        pred = prob[0] >= prob_threshold
        target = _crop_target(mask, model.config)
        accs.append(pixel_accuracy(pred, target))
        ious.append(iou(pred, target))
    return float(np.mean(accs)), float(np.mean(ious))


def train(model: UNetModel, dataset, hyper: TrainParams) -> tuple[UNetModel, TrainReport]:
    """SGD with momentum, one sample per step, deterministic seeded shuffling.

    ``dataset`` is a sequence of (GrayImage, BinaryMask) pairs; masks are
    center-cropped to the output window for the loss. A holdout split (last
    ``holdout_fraction`` of a seeded permutation) provides the per-epoch
    accuracy/IoU columns; with no holdout they are measured on the training
    set. The input model is updated in place, so passing a previously
    trained model resumes optimization (incremental training).
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("need at least one sample")
    config = model.config
    inputs, targets = [], []
    for image, mask in dataset:
        inputs.append(_check_input(model, image))
        if (mask.height, mask.width) != tuple(config.input_size):
            raise SizeMismatch(f"mask {mask.height}x{mask.width} vs {config.input_size}")
        targets.append(_crop_target(mask, config).astype(np.float32))

    rng = np.random.Generator(np.random.PCG64(hyper.shuffle_seed))
    perm = rng.permutation(n)
    n_hold = int(n * hyper.holdout_fraction)
    if n - n_hold < 1:
        raise EmptyDataset(f"holdout {n_hold} of {n} leaves no training samples")
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    eval_idx = hold_idx if n_hold else train_idx

    report = TrainReport()
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        order = train_idx[rng.permutation(len(train_idx))]
        for j in order:
            prob, caches = _run_forward(model.params, config, inputs[j])
            loss, grad = nncore.bce_loss(prob, targets[j][None])
            _run_backward(model.params, config, caches, grad)
            nncore.sgd_step(model.params, hyper.lr, hyper.momentum)
            losses.append(loss)
        accs, ious = [], []
        for j in eval_idx:
            prob, _ = _run_forward(model.params, config, inputs[j])
            pred = prob[0] >= 0.5
            accs.append(pixel_accuracy(pred, targets[j].astype(bool)))
            ious.append(iou(pred, targets[j].astype(bool)))
        report.epochs.append(EpochStats(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            pixel_accuracy=float(np.mean(accs)),
            iou=float(np.mean(ious)),
            seconds=time.perf_counter() - t0,
        ))
    return model, report


def _config_json(config: UNetConfig) -> bytes:
    doc = {
        "depth": config.depth,
        "base_channels": config.base_channels,
        "in_channels": config.in_channels,
        "out_channels": config.out_channels,
        "input_size": list(config.input_size),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("ascii")


def save_weights(model: UNetModel) -> bytes:
    header = _config_json(model.config)
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(header)), header]
    for name, shape in manifest(model.config):
        value = model.params[name].value
        if value.shape != shape:
            raise ManifestMismatch(f"{name}: stored {value.shape}, manifest {shape}")
        parts.append(value.astype("<f4").tobytes())
    return b"".join(parts)


def load_weights(data: bytes) -> UNetModel:
    if len(data) < 4 or data[:4] != WEIGHTS_MAGIC:
        raise BadMagic("not a weights blob")
    if len(data) < 12:
        raise TruncatedPayload("header truncated")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != WEIGHTS_VERSION:
        raise VersionUnsupported(f"version {version}")
    if len(data) < 12 + header_len:
        raise TruncatedPayload("config header truncated")
    try:
        doc = json.loads(data[12:12 + header_len].decode("utf-8"))
        config = UNetConfig(
            depth=int(doc["depth"]),
            base_channels=int(doc["base_channels"]),
            input_size=(int(doc["input_size"][0]), int(doc["input_size"][1])),
            in_channels=int(doc["in_channels"]),
            out_channels=int(doc["out_channels"]),
        )
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestMismatch(f"bad config header: {exc}") from None
    params = ParamSet()
    pos = 12 + header_len
    for name, shape in manifest(config):
        nbytes = int(np.prod(shape)) * 4
        if pos + nbytes > len(data):
            raise TruncatedPayload(f"payload ends inside {name}")
        value = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=pos)
        params.add(name, value.reshape(shape).astype(np.float32))
        pos += nbytes
    if pos != len(data):
        raise ManifestMismatch(f"{len(data) - pos} trailing bytes after manifest")
    return UNetModel(config, params)
