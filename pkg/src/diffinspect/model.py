"""Backbone registry, multiscale feature fusion, the per-box detection head
with timestep conditioning, and dynamic mask decoding.

The detection head consumes a set of boxes in diffusion signal space plus the
timestep they sit at, and predicts class logits, denoised boxes (signal
space), and one flat mask-kernel vector per box. A mask is recovered from its
kernel vector by running the unflattened 1x1 convolution sequence over the
fused feature map augmented with box-relative coordinate channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import DEFAULT_SCALE, BoxState
from .errors import ConfigError

NUM_CLASSES = 5

# symmetric bound on window-relative box deltas; exp(4) caps size growth
DELTA_CLAMP = 4.0
# focal-style prior so untrained scores start near 0.01, well under threshold
SCORE_PRIOR = 0.01


@dataclass
class FeatureMaps:
    """Ordered (stride, map) levels sharing one channel count; maps are
    (B, C, H_l, W_l) with H_l = ceil(H / stride)."""

    levels: list[tuple[int, torch.Tensor]]
    image_size: tuple[int, int]  # (width, height)

    def validate(self) -> None:
        strides = [s for s, _ in self.levels]
        if strides != sorted(strides) or len(set(strides)) != len(strides):
            raise ValueError(f"strides must be strictly increasing, got {strides}")
        w, h = self.image_size
        channels = {m.shape[1] for _, m in self.levels}
        if len(channels) != 1:
            raise ValueError(f"levels disagree on channel count: {channels}")
        for stride, m in self.levels:
            want = (math.ceil(h / stride), math.ceil(w / stride))
            if tuple(m.shape[-2:]) != want:
                raise ValueError(
                    f"level at stride {stride} has spatial size "
                    f"{tuple(m.shape[-2:])}, expected {want}"
                )


@dataclass
class FusedFeatureMap:
    """Single-resolution mask feature map: (B, C_mask, H_f, W_f)."""

    map: torch.Tensor
    stride: int
    image_size: tuple[int, int]


@dataclass
class MaskKernelVector:
    """Flat parameter vector for one instance's 1x1 convolution sequence."""

    theta: np.ndarray
    layer_spec: list[tuple[int, int]]

    def __post_init__(self):
        want = kernel_param_count(self.layer_spec)
        if self.theta.shape != (want,):
            raise ValueError(
                f"theta has shape {self.theta.shape}, spec needs ({want},)"
            )


@dataclass
class HeadOutput:
    """Per-box head predictions; all tensors are (B, N, ...).

    box_pred lives in signal space; ``scale`` records its range so consumers
    can invert the encoding without reaching back into the module.
    """

    class_logits: torch.Tensor
    box_pred: torch.Tensor
    mask_kernels: torch.Tensor
    scores: torch.Tensor
    scale: float = DEFAULT_SCALE


def kernel_param_count(layer_spec) -> int:
    """Total weight+bias count of a 1x1 convolution chain."""
    if not layer_spec:
        raise ConfigError("layer spec must be nonempty")
    for (_, out_prev), (in_cur, _) in zip(layer_spec, layer_spec[1:]):
        if out_prev != in_cur:
            raise ConfigError(
                f"incompatible channel chain in layer spec {layer_spec}"
            )
    if layer_spec[-1][1] != 1:
        raise ConfigError("final layer must emit a single channel")
    return sum(i * o + o for i, o in layer_spec)


def default_layer_spec(c_mask: int, n_layers: int) -> list[tuple[int, int]]:
    """Kernel chain from C_mask+2 coordinate-augmented channels down to 1."""
    if n_layers < 1:
        raise ConfigError("mask head needs at least one layer")
    spec = []
    for i in range(n_layers):
        c_in = c_mask + 2 if i == 0 else c_mask
        c_out = 1 if i == n_layers - 1 else c_mask
        spec.append((c_in, c_out))
    return spec


def unflatten_kernel(theta: torch.Tensor, layer_spec) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Split a flat theta into per-layer ((out, in) weight, (out,) bias)."""
    want = kernel_param_count(layer_spec)
    if theta.numel() != want:
        raise ValueError(f"theta has {theta.numel()} entries, spec needs {want}")
    params, pos = [], 0
    for c_in, c_out in layer_spec:
        w = theta[pos:pos + c_in * c_out].reshape(c_out, c_in)
        pos += c_in * c_out
        b = theta[pos:pos + c_out]
        pos += c_out
        params.append((w, b))
    return params


def flatten_kernel(params) -> torch.Tensor:
    """Inverse of :func:`unflatten_kernel`; round trips exactly."""
    return torch.cat([t.reshape(-1) for w, b in params for t in (w, b)])


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos timestep embedding, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    angles = t[:, None].to(freqs.dtype) * freqs[None, :]
    return torch.cat([angles.sin(), angles.cos()], dim=1)


# ---------------------------------------------------------------------------
# backbones

BACKBONE_REGISTRY: dict = {}


def register_backbone(name):
    def wrap(builder):
        BACKBONE_REGISTRY[name] = builder
        return builder
    return wrap


def build_backbone(name: str, weights: str = "") -> nn.Module:
    """Instantiate a registered backbone; deep ones need a weight file."""
    if name not in BACKBONE_REGISTRY:
        raise ConfigError(
            f"unknown backbone {name!r}; registered: "
            f"{sorted(BACKBONE_REGISTRY)}"
        )
    return BACKBONE_REGISTRY[name](weights=weights)


class _ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(8, channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class TinyBackbone(nn.Module):
    """4-stage residual CNN (< 1M parameters) for desk-scale runs.

    Emits raw feature maps at strides 4, 8, 16, 32.
    """

    strides = (4, 8, 16, 32)
    channels = (32, 48, 64, 96)

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1, bias=False),
            nn.GroupNorm(8, 16),
            nn.ReLU(inplace=True),
        )
        stages = []
        c_prev = 16
        for c in self.channels:
            stages.append(nn.Sequential(
                nn.Conv2d(c_prev, c, 3, stride=2, padding=1, bias=False),
                nn.GroupNorm(8, c),
                nn.ReLU(inplace=True),
                _ResidualBlock(c),
            ))
            c_prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


@register_backbone("tiny-cnn")
def _build_tiny(weights: str = ""):
    backbone = TinyBackbone()
    if weights:
        backbone.load_state_dict(torch.load(weights, map_location="cpu"))
    return backbone


def _require_weight_file(name: str, weights: str) -> None:
    if not weights:
        raise ConfigError(
            f"backbone {name} needs a weight file (backbone.weights); "
            "pretrained weights are not bundled"
        )
    if not Path(weights).is_file():
        raise ConfigError(f"backbone weight file not found: {weights}")


def _build_torchvision_resnet(depth: int, weights: str):
    _require_weight_file(f"resnet{depth}", weights)
    from torchvision import models

    net = models.resnet50(weights=None) if depth == 50 else models.resnet101(weights=None)
    net.load_state_dict(torch.load(weights, map_location="cpu"), strict=False)

    class _ResNetStages(nn.Module):
        strides = (4, 8, 16, 32)
        channels = (256, 512, 1024, 2048)

        def __init__(self, base):
            super().__init__()
            self.base = base

        def forward(self, x):
            if x.shape[1] == 1:
                x = x.repeat(1, 3, 1, 1)
            b = self.base
            x = b.maxpool(F.relu(b.bn1(b.conv1(x))))
            c2 = b.layer1(x)
            c3 = b.layer2(c2)
            c4 = b.layer3(c3)
            c5 = b.layer4(c4)
            return [c2, c3, c4, c5]

    return _ResNetStages(net)


@register_backbone("resnet50")
def _build_resnet50(weights: str = ""):
    return _build_torchvision_resnet(50, weights)


@register_backbone("resnet101")
def _build_resnet101(weights: str = ""):
    return _build_torchvision_resnet(101, weights)


@register_backbone("swin")
def _build_swin(weights: str = ""):
    _require_weight_file("swin", weights)
    from torchvision import models

    net = models.swin_t(weights=None)
    net.load_state_dict(torch.load(weights, map_location="cpu"), strict=False)

    class _SwinStages(nn.Module):
        strides = (4, 8, 16, 32)
        channels = (96, 192, 384, 768)

        def __init__(self, base):
            super().__init__()
            self.features = base.features

        def forward(self, x):
            if x.shape[1] == 1:
                x = x.repeat(1, 3, 1, 1)
            out = []
            for i, block in enumerate(self.features):
                x = block(x)
                if i in (1, 3, 5, 7):
                    out.append(x.permute(0, 3, 1, 2).contiguous())
            return out

    return _SwinStages(net)


# ---------------------------------------------------------------------------
# pyramid + fusion

class FeaturePyramid(nn.Module):
    """Lateral 1x1 projection to a shared width plus top-down refinement."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.lateral = nn.ModuleList(
            nn.Conv2d(c, out_channels, 1) for c in in_channels
        )
        self.smooth = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1)
            for _ in in_channels
        )

    def forward(self, maps):
        laterals = [conv(m) for conv, m in zip(self.lateral, maps)]
        for i in range(len(laterals) - 1, 0, -1):
            laterals[i - 1] = laterals[i - 1] + F.interpolate(
                laterals[i], size=laterals[i - 1].shape[-2:], mode="nearest"
            )
        return [conv(m) for conv, m in zip(self.smooth, laterals)]


class MaskFusion(nn.Module):
    """Project every pyramid level to C_mask channels, resample to the fusion
    stride and sum. Purely linear so fusion is additive over levels."""

    def __init__(self, in_channels: int, c_mask: int, n_levels: int, stride: int):
        super().__init__()
        self.stride = stride
        self.project = nn.ModuleList(
            nn.Conv2d(in_channels, c_mask, 1) for _ in range(n_levels)
        )

    def forward(self, features: FeatureMaps) -> FusedFeatureMap:
        w, h = features.image_size
        target = (math.ceil(h / self.stride), math.ceil(w / self.stride))
        total = None
        for (stride, m), conv in zip(features.levels, self.project):
            x = conv(m)
            if tuple(x.shape[-2:]) != target:
                x = F.interpolate(
                    x, size=target, mode="bilinear", align_corners=False
                )
            total = x if total is None else total + x
        return FusedFeatureMap(map=total, stride=self.stride,
                               image_size=features.image_size)


# ---------------------------------------------------------------------------
# box geometry in torch

def signal_to_unit_boxes(signal: torch.Tensor, scale: float) -> torch.Tensor:
    """Clamped signal -> normalized (cx, cy, w, h) in [0, 1]."""
    return (signal.clamp(-scale, scale) / scale + 1.0) / 2.0


def unit_to_pixel_xyxy(unit: torch.Tensor, image_size) -> torch.Tensor:
    """Normalized (cx, cy, w, h) -> pixel (x0, y0, x1, y1), min size 1px."""
    w_img, h_img = float(image_size[0]), float(image_size[1])
    cx, cy = unit[..., 0] * w_img, unit[..., 1] * h_img
    w = (unit[..., 2] * w_img).clamp(min=1.0)
    h = (unit[..., 3] * h_img).clamp(min=1.0)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


# ---------------------------------------------------------------------------
# detection head

class DetectionHead(nn.Module):
    """Pools a region per box, injects the timestep, and predicts class
    logits, denoised signal-space boxes, and mask-kernel vectors."""

    def __init__(self, channels: int, strides, head_dim: int,
                 kernel_params: int, pool_size: int = 7,
                 num_classes: int = NUM_CLASSES, scale: float = DEFAULT_SCALE,
                 time_dim: int = 128):
        super().__init__()
        self.strides = tuple(strides)
        self.pool_size = pool_size
        self.scale = scale
        self.num_classes = num_classes
        self.fc1 = nn.Linear(channels * pool_size * pool_size, head_dim)
        self.fc2 = nn.Linear(head_dim, head_dim)
        self.time_dim = time_dim
        self.time_proj = nn.Sequential(
            nn.Linear(time_dim, head_dim), nn.ReLU(inplace=True),
            nn.Linear(head_dim, head_dim),
        )
        self.cls_head = nn.Linear(head_dim, num_classes)
        self.box_head = nn.Linear(head_dim, 4)
        self.kernel_head = nn.Linear(head_dim, kernel_params)
        nn.init.constant_(
            self.cls_head.bias, -math.log((1 - SCORE_PRIOR) / SCORE_PRIOR)
        )
        # zero init makes the box branch start as the identity refinement
        nn.init.zeros_(self.box_head.weight)
        nn.init.zeros_(self.box_head.bias)

    def _refine(self, boxes_xyxy: torch.Tensor, deltas: torch.Tensor,
                image_size) -> torch.Tensor:
        """Apply window-relative deltas (dx, dy, dlogw, dlogh) and re-encode.

        Pooled features carry no absolute position, so the head can only say
        where the object sits within its window; predicting offsets relative
        to the pooled box makes that expressible.
        """
        d = deltas.clamp(-DELTA_CLAMP, DELTA_CLAMP)
        w_img, h_img = float(image_size[0]), float(image_size[1])
        x0, y0, x1, y1 = boxes_xyxy.unbind(-1)
        w, h = x1 - x0, y1 - y0
        cx = (x0 + x1) / 2 + d[..., 0] * w
        cy = (y0 + y1) / 2 + d[..., 1] * h
        w = w * torch.exp(d[..., 2])
        h = h * torch.exp(d[..., 3])
        unit = torch.stack(
            [cx / w_img, cy / h_img, w / w_img, h / h_img], dim=-1
        )
        return ((2.0 * unit - 1.0) * self.scale).clamp(-self.scale, self.scale)

    def _assign_levels(self, boxes_xyxy: torch.Tensor) -> torch.Tensor:
        # pick the level whose stride best matches sqrt(area) / pool_size
        wh = (boxes_xyxy[..., 2:] - boxes_xyxy[..., :2]).clamp(min=1.0)
        target = torch.sqrt(wh[..., 0] * wh[..., 1]) / self.pool_size
        log_strides = torch.log2(
            torch.tensor([float(s) for s in self.strides], device=boxes_xyxy.device)
        )
        dist = (torch.log2(target)[..., None] - log_strides[None, :]).abs()
        return dist.argmin(dim=-1)

    def _pool(self, level_maps, boxes_xyxy, levels, image_size):
        # bilinear pool_size x pool_size sampling grid per box, per level
        b, n = boxes_xyxy.shape[:2]
        p = self.pool_size
        c = level_maps[0].shape[1]
        dtype = level_maps[0].dtype
        out = torch.zeros(b, n, c, p, p, dtype=dtype, device=level_maps[0].device)
        w_img, h_img = float(image_size[0]), float(image_size[1])
        frac = (torch.arange(p, dtype=dtype, device=out.device) + 0.5) / p
        for bi in range(b):
            for li, (stride, fmap) in enumerate(zip(self.strides, level_maps)):
                idx = (levels[bi] == li).nonzero(as_tuple=True)[0]
                if idx.numel() == 0:
                    continue
                box = boxes_xyxy[bi, idx]
                xs = box[:, 0:1] + frac[None, :] * (box[:, 2:3] - box[:, 0:1])
                ys = box[:, 1:2] + frac[None, :] * (box[:, 3:4] - box[:, 1:2])
                hf, wf = fmap[bi].shape[-2:]
                gx = 2.0 * xs / (stride * wf) - 1.0
                gy = 2.0 * ys / (stride * hf) - 1.0
                grid = torch.stack(
                    [gx[:, None, :].expand(-1, p, -1),
                     gy[:, :, None].expand(-1, -1, p)], dim=-1
                )
                pooled = F.grid_sample(
                    fmap[bi:bi + 1].expand(idx.numel(), -1, -1, -1),
                    grid, mode="bilinear", padding_mode="zeros",
                    align_corners=False,
                )
                out[bi, idx] = pooled
        return out.reshape(b, n, c * p * p)

    def forward(self, features: FeatureMaps, boxes_signal: torch.Tensor,
                t: torch.Tensor) -> HeadOutput:
        b, n = boxes_signal.shape[:2]
        level_maps = [m for _, m in features.levels]
        dtype = level_maps[0].dtype
        if n == 0:
            empty = lambda *shape: torch.zeros(*shape, dtype=dtype)
            return HeadOutput(
                class_logits=empty(b, 0, self.num_classes),
                box_pred=empty(b, 0, 4),
                mask_kernels=empty(b, 0, self.kernel_head.out_features),
                scores=empty(b, 0),
                scale=self.scale,
            )
        unit = signal_to_unit_boxes(boxes_signal.to(dtype), self.scale)
        boxes_xyxy = unit_to_pixel_xyxy(unit, features.image_size)
        levels = self._assign_levels(boxes_xyxy)
        pooled = self._pool(level_maps, boxes_xyxy, levels, features.image_size)

        x = F.relu(self.fc1(pooled))
        t_embed = self.time_proj(
            sinusoidal_embedding(t.to(dtype), self.time_dim)
        )
        x = F.relu(self.fc2(x + t_embed[:, None, :]))

        logits = self.cls_head(x)
        box_pred = self._refine(boxes_xyxy, self.box_head(x),
                                features.image_size)
        kernels = self.kernel_head(x)
        scores = torch.sigmoid(logits).max(dim=-1).values
        return HeadOutput(class_logits=logits, box_pred=box_pred,
                          mask_kernels=kernels, scores=scores,
                          scale=self.scale)


# ---------------------------------------------------------------------------
# dynamic mask decoding

def _coordinate_channels(fused_shape, stride, box_xyxy, dtype, device):
    hf, wf = fused_shape
    xs = (torch.arange(wf, dtype=dtype, device=device) + 0.5) * stride
    ys = (torch.arange(hf, dtype=dtype, device=device) + 0.5) * stride
    x0, y0, x1, y1 = [float(v) for v in box_xyxy]
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    w = max(x1 - x0, 1.0)
    h = max(y1 - y0, 1.0)
    rel_x = (xs - cx) / (w / 2)
    rel_y = (ys - cy) / (h / 2)
    return torch.stack([
        rel_x[None, :].expand(hf, wf),
        rel_y[:, None].expand(hf, wf),
    ])


def mask_logit_map(fused: torch.Tensor, stride: int, theta: torch.Tensor,
                   layer_spec, box_xyxy) -> torch.Tensor:
    """Run one instance's 1x1 convolution chain over a (C, H_f, W_f) fused
    map augmented with box-relative coordinate channels; returns pre-sigmoid
    logits of shape (H_f, W_f)."""
    coords = _coordinate_channels(
        fused.shape[-2:], stride, box_xyxy, fused.dtype, fused.device
    )
    x = torch.cat([fused, coords], dim=0)
    params = unflatten_kernel(theta, layer_spec)
    for i, (w, b) in enumerate(params):
        x = torch.einsum("oc,chw->ohw", w, x) + b[:, None, None]
        if i < len(params) - 1:
            x = F.relu(x)
    return x[0]


def mask_prob_map(fused: torch.Tensor, stride: int, theta: torch.Tensor,
                  layer_spec, box_xyxy) -> torch.Tensor:
    return torch.sigmoid(mask_logit_map(fused, stride, theta, layer_spec, box_xyxy))


def decode_mask(fused: FusedFeatureMap, theta, layer_spec, box,
                image_size, threshold: float = 0.5,
                batch_index: int = 0) -> np.ndarray:
    """Decode one instance's binary mask at full image resolution.

    ``box`` is a pixel (x, y, w, h) bbox; ``theta`` a flat vector (or a
    MaskKernelVector, which carries its own layer spec). The probability map
    is upsampled bilinearly to the image size and thresholded.
    """
    if isinstance(theta, MaskKernelVector):
        layer_spec = theta.layer_spec
        theta = theta.theta
    fmap = fused.map[batch_index]
    theta_t = torch.as_tensor(theta, dtype=fmap.dtype)
    x, y, w, h = box
    with torch.no_grad():
        prob = mask_prob_map(
            fmap, fused.stride, theta_t, layer_spec, (x, y, x + w, y + h)
        )
        w_img, h_img = image_size
        full = F.interpolate(
            prob[None, None], size=(int(h_img), int(w_img)),
            mode="bilinear", align_corners=False,
        )[0, 0]
    return (full >= threshold).numpy().astype(np.uint8)


# ---------------------------------------------------------------------------
# assembled model

class DetectionModel(nn.Module):
    """Backbone + pyramid + mask fusion + per-box head in one module."""

    def __init__(self, backbone: str = "tiny-cnn", backbone_weights: str = "",
                 channels: int = 64, head_dim: int = 256, c_mask: int = 8,
                 mask_layers: int = 3, mask_stride: int = 8,
                 pool_size: int = 7, scale: float = DEFAULT_SCALE,
                 num_classes: int = NUM_CLASSES):
        super().__init__()
        self.backbone = build_backbone(backbone, weights=backbone_weights)
        self.strides = tuple(self.backbone.strides)
        if mask_stride not in self.strides:
            raise ConfigError(
                f"mask stride {mask_stride} not among pyramid strides "
                f"{self.strides}"
            )
        self.scale = scale
        self.num_classes = num_classes
        self.layer_spec = default_layer_spec(c_mask, mask_layers)
        self.fpn = FeaturePyramid(self.backbone.channels, channels)
        self.fusion = MaskFusion(channels, c_mask, len(self.strides), mask_stride)
        self.head = DetectionHead(
            channels, self.strides, head_dim,
            kernel_param_count(self.layer_spec), pool_size=pool_size,
            num_classes=num_classes, scale=scale,
        )

    def images_to_tensor(self, pixel_arrays) -> torch.Tensor:
        """Stack (H, W) uint8 arrays into a normalized (B, 1, H, W) batch."""
        stack = np.stack([np.asarray(p, dtype=np.float32) for p in pixel_arrays])
        stack = (stack / 255.0 - 0.5) / 0.25
        param = next(self.parameters())
        return torch.from_numpy(stack[:, None]).to(param.dtype)

    def backbone_forward(self, images: torch.Tensor) -> FeatureMaps:
        """Raw stages plus lateral projection; levels share the pyramid width."""
        h, w = images.shape[-2:]
        maps = self.fpn(self.backbone(images))
        features = FeatureMaps(
            levels=list(zip(self.strides, maps)), image_size=(w, h)
        )
        features.validate()
        return features

    def fuse_features(self, features: FeatureMaps) -> FusedFeatureMap:
        return self.fusion(features)

    def head_forward(self, features: FeatureMaps, boxes, t) -> HeadOutput:
        """boxes: (B, N, 4) signal array/tensor or a single-image BoxState;
        t: scalar or (B,) timesteps."""
        if isinstance(boxes, BoxState):
            t = boxes.t
            boxes = boxes.boxes[None]
        boxes_t = torch.as_tensor(np.asarray(boxes, dtype=np.float64))
        if boxes_t.ndim == 2:
            boxes_t = boxes_t[None]
        b = boxes_t.shape[0]
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if t_arr.shape == (1,) and b > 1:
            t_arr = np.repeat(t_arr, b)
        t_t = torch.as_tensor(t_arr)
        return self.head(features, boxes_t, t_t)
