"""Dense feature extraction: pluggable backbones, slice handling, model state."""

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig
from .vit import VisionTransformer


class EncoderError(Exception):
    pass


@dataclass
class SliceTriplet:
    """Three consecutive slices (z-1, z, z+1); edges replicate the boundary."""

    slices: tuple
    center_index: int = 0

    def stacked(self):
        a, b, c = (np.asarray(s, dtype=np.float32) for s in self.slices)
        if not (a.shape == b.shape == c.shape):
            raise EncoderError(
                f"triplet slices disagree in shape: {a.shape}, {b.shape}, {c.shape}"
            )
        return np.stack([a, b, c])


@dataclass
class FeatureMap:
    values: torch.Tensor  # (D, H', W')
    stride: float  # input pixels per feature cell
    source_shape: tuple  # original (H, W) before padding

    @property
    def spatial_shape(self):
        return tuple(self.values.shape[1:])

    @property
    def channels(self):
        return int(self.values.shape[0])


class SymConv2d(nn.Conv2d):
    """Conv whose kernels are symmetrized along width, so horizontal flips
    commute with the convolution exactly."""

    def forward(self, x):
        w = 0.5 * (self.weight + self.weight.flip(-1))
        return self._conv_forward(x, w, self.bias)


class DilatedCNN(nn.Module):
    """Compact dilated conv backbone, overall stride 4.

    Downsampling uses average pooling and all kernels are width-symmetric,
    keeping the feature extractor equivariant to horizontal flips.
    """

    def __init__(self, width=32, out_channels=32):
        super().__init__()
        groups = max(1, width // 8)
        self.stem = nn.Sequential(
            SymConv2d(3, width, 3, padding=1),
            nn.GroupNorm(groups, width),
            nn.ReLU(inplace=True),
            nn.AvgPool2d(2),
            SymConv2d(width, width, 3, padding=1),
            nn.GroupNorm(groups, width),
            nn.ReLU(inplace=True),
            nn.AvgPool2d(2),
        )
        self.dilated = nn.Sequential(
            SymConv2d(width, width, 3, padding=2, dilation=2),
            nn.GroupNorm(groups, width),
            nn.ReLU(inplace=True),
            SymConv2d(width, width, 3, padding=2, dilation=2),
            nn.GroupNorm(groups, width),
            nn.ReLU(inplace=True),
        )
        self.proj = nn.Conv2d(width, out_channels, 1)
        self.stride = 4

    def forward(self, x):
        return self.proj(self.dilated(self.stem(x)))


class SliceAdapter(nn.Module):
    """1x1 convolution mapping the 3 stacked slices to the encoder's 3 channels."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 3, kernel_size=1, bias=True)
        # start as a pass-through
        with torch.no_grad():
            self.conv.weight.copy_(torch.eye(3).view(3, 3, 1, 1))
            self.conv.bias.zero_()

    def forward(self, x):
        return self.conv(x)


class SegmentationModel(nn.Module):
    """Backbone plus optional slice adapter; produces raw feature grids."""

    def __init__(self, backbone, slice_adapter=None):
        super().__init__()
        self.backbone = backbone
        self.slice_adapter = slice_adapter

    @property
    def stride(self):
        return self.backbone.stride


@dataclass
class ModelState:
    """Weights, optimizer state, and bookkeeping for one model instance."""

    model: SegmentationModel
    config: EncoderConfig
    optimizer: Optional[torch.optim.Optimizer] = None
    scheduler: object = None
    step: int = 0
    base_digest: Optional[str] = None  # frozen-backbone checksum when lora is active


def build_model(cfg: EncoderConfig, seed: int = 0) -> ModelState:
    """Construct (and optionally load) the configured encoder."""
    torch.manual_seed(seed)
    if cfg.backbone == "dilated_cnn":
        backbone = DilatedCNN(width=cfg.cnn.width, out_channels=cfg.cnn.out_channels)
    elif cfg.backbone == "foundation_vit_large":
        backbone = VisionTransformer(cfg.vit)
    else:
        raise EncoderError(f"unknown backbone {cfg.backbone!r}")
    adapter = SliceAdapter() if cfg.input_mode == "slice_adapter" else None
    model = SegmentationModel(backbone, adapter)
    if cfg.weights_path:
        _load_backbone_weights(backbone, cfg.weights_path, cfg.weights_digest)
    state = ModelState(model=model, config=cfg)
    if cfg.lora is not None:
        from .lora import wrap_with_low_rank_adapters

        state = wrap_with_low_rank_adapters(state, cfg.lora)
    return state


def _load_backbone_weights(backbone, path, expected_digest=None):
    with open(path, "rb") as f:
        blob = f.read()
    if expected_digest:
        digest = hashlib.sha256(blob).hexdigest()
        if digest != expected_digest:
            raise EncoderError(
                f"weights digest mismatch for {path}: got {digest[:12]}..., "
                f"expected {expected_digest[:12]}..."
            )
    state_dict = torch.load(path, map_location="cpu", weights_only=True)
    backbone.load_state_dict(state_dict)


def trainable_parameters(state: ModelState):
    return [p for p in state.model.parameters() if p.requires_grad]


def apply_slice_adapter(triplet, state: ModelState):
    """Run the 1x1-conv slice adapter; returns a (3, H, W) tensor."""
    if state.model.slice_adapter is None:
        raise EncoderError("model was built without a slice adapter")
    x = _triplet_tensor(triplet)
    return state.model.slice_adapter(x.unsqueeze(0))[0]


def _triplet_tensor(triplet):
    if isinstance(triplet, SliceTriplet):
        arr = triplet.stacked()
    else:
        arr = np.asarray(triplet, dtype=np.float32) if not torch.is_tensor(triplet) else triplet
    if torch.is_tensor(arr):
        x = arr.float()
    else:
        x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    if x.ndim != 3 or x.shape[0] != 3:
        raise EncoderError(f"expected a (3, H, W) triplet, got shape {tuple(x.shape)}")
    return x


def _as_input_tensor(image_or_triplet, input_mode, state):
    """Normalize the input into a (3, H, W) tensor per the configured mode."""
    x = image_or_triplet
    if isinstance(x, SliceTriplet):
        x = x.stacked()
    if not torch.is_tensor(x):
        x = torch.from_numpy(np.ascontiguousarray(np.asarray(x, dtype=np.float32)))
    x = x.float()
    if x.ndim == 2:
        x = x.unsqueeze(0).repeat(3, 1, 1)  # replicate single slice
    elif x.ndim != 3 or x.shape[0] != 3:
        raise EncoderError(f"expected (H, W) or (3, H, W) input, got {tuple(x.shape)}")
    if input_mode == "replicate_1slice":
        center = x[x.shape[0] // 2]
        x = center.unsqueeze(0).repeat(3, 1, 1)
    elif input_mode == "slice_adapter":
        x = state.model.slice_adapter(x.unsqueeze(0))[0]
    return x


def _resolve_upsample(feature_upsample, padded_shape):
    if feature_upsample is None:
        return None
    if feature_upsample == "quarter":
        return (max(1, padded_shape[0] // 4), max(1, padded_shape[1] // 4))
    return tuple(feature_upsample)


def encode(image_or_triplet, config: EncoderConfig, state: ModelState) -> FeatureMap:
    """Produce the dense feature map for one slice (or slice triplet).

    Inputs are padded (edge replication) up to the backbone stride, and the
    resulting grid is bilinearly upsampled to the configured working size.
    """
    x = _as_input_tensor(image_or_triplet, config.input_mode, state)
    _, h, w = x.shape
    if h < 1 or w < 1:
        raise EncoderError(f"degenerate input resolution {h}x{w}")
    stride = state.model.stride
    pad_h = (-h) % stride
    pad_w = (-w) % stride
    if pad_h or pad_w:
        x = F.pad(x.unsqueeze(0), (0, pad_w, 0, pad_h), mode="replicate")[0]
    padded = (h + pad_h, w + pad_w)
    feats = state.model.backbone(x.unsqueeze(0))
    target = _resolve_upsample(config.feature_upsample, padded)
    if target is not None and tuple(feats.shape[-2:]) != target:
        feats = F.interpolate(feats, size=target, mode="bilinear", align_corners=False)
    feats = feats[0]
    return FeatureMap(
        values=feats,
        stride=padded[0] / feats.shape[-2],
        source_shape=(h, w),
    )
