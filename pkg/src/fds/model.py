"""UNet-like encoder-decoder with a residual-network-style encoder.

The encoder is the standard 34-layer residual stack (basic blocks 3-4-6-3,
total stride 32) with the classifier head removed; the decoder upsamples in
five stages with skip connections from the four shallower encoder stages and
ends in a single-channel sigmoid head. Channel widths are configurable so a
narrow profile can run property tests in seconds.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .dataset import Image

logger = logging.getLogger(__name__)

_BLOCKS_PER_STAGE = (3, 4, 6, 3)
_TOTAL_STRIDE = 32
_PROB_EPS = 1e-6  # keeps sigmoid outputs strictly inside (0, 1) in float32


def image_to_tensor(img: Image) -> torch.Tensor:
    """(H, W, 3) [0,1] float32 image to a (3, H, W) tensor; copies, since the
    dataclass arrays are frozen read-only and torch cannot share them."""
    return torch.from_numpy(img.pixels.copy()).permute(2, 0, 1)


@dataclass(frozen=True)
class FeatureMap:
    """Encoder activations: (C, h, w) tensor plus its stride vs. the input."""

    values: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"feature map must be (C, h, w), got {tuple(self.values.shape)}")
        if self.stride < 1 or (self.stride & (self.stride - 1)) != 0:
            raise ValueError(f"stride must be a power of two, got {self.stride}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PredictedMask:
    """Per-pixel defect probabilities, strictly inside (0, 1)."""

    probs: torch.Tensor  # (H, W)

    def __post_init__(self):
        if self.probs.ndim != 2:
            raise ValueError(f"predicted mask must be (H, W), got {tuple(self.probs.shape)}")
        lo = float(self.probs.min())
        hi = float(self.probs.max())
        if lo <= 0.0 or hi >= 1.0:
            raise ValueError(f"probabilities must lie strictly in (0, 1); got [{lo}, {hi}]")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs.

    encoder_depth_channels lists the per-stage encoder widths (stem, stage1..4)
    and must keep the 1:1:2:4:8 ratio of the residual-34 design;
    decoder_channels has one entry per upsampling stage (five total).
    """

    encoder_depth_channels: tuple[int, ...] = (64, 64, 128, 256, 512)
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32, 16)
    input_resolution: int = 512
    backbone_pretrained: bool = True

    def __post_init__(self):
        ec = tuple(self.encoder_depth_channels)
        dc = tuple(self.decoder_channels)
        object.__setattr__(self, "encoder_depth_channels", ec)
        object.__setattr__(self, "decoder_channels", dc)
        if len(ec) != 5:
            raise ValueError("encoder_depth_channels needs 5 entries (stem + 4 stages)")
        w = ec[0]
        if w < 2 or tuple(c // w for c in ec) != (1, 1, 2, 4, 8) or any(c % w for c in ec):
            raise ValueError(f"encoder widths must follow the 1:1:2:4:8 pattern, got {ec}")
        if len(dc) != 5:
            raise ValueError("decoder_channels needs one entry per upsampling stage (5)")
        if self.input_resolution < _TOTAL_STRIDE or self.input_resolution % _TOTAL_STRIDE:
            raise ValueError(
                f"input_resolution must be a positive multiple of {_TOTAL_STRIDE}"
            )

    @classmethod
    def default(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Narrow desk-scale profile: all channels divided by 8, 64 px input."""
        return cls(
            encoder_depth_channels=(8, 8, 16, 32, 64),
            decoder_channels=(32, 16, 8, 4, 2),
            input_resolution=64,
            backbone_pretrained=False,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_depth_channels"] = list(self.encoder_depth_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("encoder_depth_channels", "decoder_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class _BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, inplanes: int, planes: int, stride: int = 1,
                 downsample: Optional[nn.Module] = None):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = downsample

    def forward(self, x):
        identity = x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu(out + identity)


class _DecoderBlock(nn.Module):
    """Nearest-neighbor ×2 upsample, optional skip concat, two conv-bn-relu."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.skip_ch = skip_ch
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv1 = nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x, skip=None):
        x = self.up(x)
        if skip is not None:
            if skip.shape[1] != self.skip_ch or skip.shape[-2:] != x.shape[-2:]:
                raise ValueError(
                    f"skip {tuple(skip.shape)} does not fit decoder stage expecting "
                    f"{self.skip_ch} channels at {tuple(x.shape[-2:])}"
                )
            x = torch.cat([x, skip], dim=1)
        elif self.skip_ch:
            raise ValueError("decoder stage expects a skip connection, got none")
        x = self.relu(self.bn1(self.conv1(x)))
        return self.relu(self.bn2(self.conv2(x)))


class _Net(nn.Module):
    """The raw tensor-in/tensor-out network (batched)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.encoder_depth_channels[0]
        stage = cfg.encoder_depth_channels
        self.conv1 = nn.Conv2d(3, w, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(w)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.inplanes = w
        self.layer1 = self._make_layer(stage[1], _BLOCKS_PER_STAGE[0], 1)
        self.layer2 = self._make_layer(stage[2], _BLOCKS_PER_STAGE[1], 2)
        self.layer3 = self._make_layer(stage[3], _BLOCKS_PER_STAGE[2], 2)
        self.layer4 = self._make_layer(stage[4], _BLOCKS_PER_STAGE[3], 2)

        dc = cfg.decoder_channels
        skips = (stage[3], stage[2], stage[1], stage[0], 0)
        ins = (stage[4], dc[0], dc[1], dc[2], dc[3])
        self.decoder = nn.ModuleList(
            _DecoderBlock(i, s, o) for i, s, o in zip(ins, skips, dc)
        )
        self.head = nn.Conv2d(dc[4], 1, 1)

        # standard residual-net initialisation: without it, narrow profiles
        # are an init lottery (some seeds stall for hundreds of iterations)
        for m in self.modules():
            if isinstance(m, nn.Conv2d) and m is not self.head:
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.constant_(m.weight, 1.0)
                nn.init.constant_(m.bias, 0.0)

    def _make_layer(self, planes: int, blocks: int, stride: int) -> nn.Sequential:
        downsample = None
        if stride != 1 or self.inplanes != planes:
            downsample = nn.Sequential(
                nn.Conv2d(self.inplanes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )
        layers = [_BasicBlock(self.inplanes, planes, stride, downsample)]
        self.inplanes = planes
        layers += [_BasicBlock(planes, planes) for _ in range(1, blocks)]
        return nn.Sequential(*layers)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[-2] % _TOTAL_STRIDE or x.shape[-1] % _TOTAL_STRIDE:
            raise ValueError(
                f"input dims {tuple(x.shape[-2:])} not divisible by stride {_TOTAL_STRIDE}"
            )
        e0 = self.relu(self.bn1(self.conv1(x)))  # stride 2
        e1 = self.layer1(self.maxpool(e0))       # stride 4
        e2 = self.layer2(e1)                     # stride 8
        e3 = self.layer3(e2)                     # stride 16
        e4 = self.layer4(e3)                     # stride 32
        return e4, [e0, e1, e2, e3]

    def decode(self, bottleneck: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        if len(skips) != 4:
            raise ValueError(f"expected 4 skip maps, got {len(skips)}")
        x = bottleneck
        feeds = [skips[3], skips[2], skips[1], skips[0], None]
        for block, skip in zip(self.decoder, feeds):
            x = block(x, skip)
        logits = self.head(x)
        return torch.clamp(torch.sigmoid(logits), _PROB_EPS, 1.0 - _PROB_EPS)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        bottleneck, skips = self.encode(x)
        return self.decode(bottleneck, skips), bottleneck


def _load_pretrained_backbone(net: _Net) -> bool:
    """Copy ImageNet residual-34 weights into the encoder if obtainable."""
    try:
        import torchvision.models as tvm

        ref = tvm.resnet34(weights=tvm.ResNet34_Weights.IMAGENET1K_V1)
    except Exception as e:  # offline, missing cache, version drift
        logger.warning("pretrained backbone unavailable (%s); using random init", e)
        return False
    own = net.state_dict()
    src = {k: v for k, v in ref.state_dict().items() if k in own and own[k].shape == v.shape}
    own.update(src)
    net.load_state_dict(own)
    return True


class SegmentationModel:
    """Owns the network plus the image-level interface used outside training.

    The image-level encode/decode/forward run without gradients in whatever
    train/eval mode the network currently holds; training goes through `.net`
    directly on batched tensors. Not safe for concurrent mutation; read-only
    inference after `.eval()` is fine.
    """

    def __init__(self, config: ModelConfig, init_seed: int = 0, fetch_backbone: bool = True):
        self.config = config
        torch.manual_seed(init_seed)
        self.net = _Net(config)
        if config.backbone_pretrained and fetch_backbone:
            if config.encoder_depth_channels[0] == 64:
                _load_pretrained_backbone(self.net)
            else:
                logger.warning(
                    "pretrained weights exist only for the full-width encoder; "
                    "using random init for width %d",
                    config.encoder_depth_channels[0],
                )

    # mode / parameter plumbing -------------------------------------------
    def parameters(self):
        return self.net.parameters()

    def train(self):
        self.net.train()
        return self

    def eval(self):
        self.net.eval()
        return self

    # image-level interface -----------------------------------------------
    def _to_tensor(self, img: Image) -> torch.Tensor:
        h, w = img.shape
        if h % _TOTAL_STRIDE or w % _TOTAL_STRIDE:
            raise ValueError(f"image dims {(h, w)} not divisible by stride {_TOTAL_STRIDE}")
        return image_to_tensor(img)[None]

    def encode(self, img: Image) -> tuple[FeatureMap, list[FeatureMap]]:
        """Bottleneck plus the shallow-to-deep skip maps (strides 2,4,8,16)."""
        x = self._to_tensor(img)
        with torch.no_grad():
            bottleneck, skips = self.net.encode(x)
        strides = (2, 4, 8, 16)
        return (
            FeatureMap(values=bottleneck[0], stride=_TOTAL_STRIDE),
            [FeatureMap(values=s[0], stride=st) for s, st in zip(skips, strides)],
        )

    def decode(self, bottleneck: FeatureMap, skips: list[FeatureMap]) -> PredictedMask:
        if bottleneck.stride != _TOTAL_STRIDE:
            raise ValueError(f"bottleneck stride must be {_TOTAL_STRIDE}, got {bottleneck.stride}")
        if [s.stride for s in skips] != [2, 4, 8, 16]:
            raise ValueError("skips must be ordered shallow to deep with strides 2,4,8,16")
        with torch.no_grad():
            probs = self.net.decode(
                bottleneck.values[None], [s.values[None] for s in skips]
            )
        return PredictedMask(probs=probs[0, 0])

    def forward(self, img: Image) -> tuple[PredictedMask, FeatureMap]:
        x = self._to_tensor(img)
        with torch.no_grad():
            probs, bottleneck = self.net(x)
        return PredictedMask(probs=probs[0, 0]), FeatureMap(values=bottleneck[0], stride=_TOTAL_STRIDE)


def save_checkpoint(model: SegmentationModel, path, seed: int):
    """Single-file archive: parameters + config + the training seed."""
    payload = {
        "format_version": 1,
        "state": model.net.state_dict(),
        "config": model.config.to_dict(),
        "seed": int(seed),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SegmentationModel, int]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = ModelConfig.from_dict(payload["config"])
    model = SegmentationModel(cfg, init_seed=0, fetch_backbone=False)
    try:
        model.net.load_state_dict(payload["state"], strict=True)
    except RuntimeError as e:
        raise ValueError(f"checkpoint does not match its recorded config: {e}") from e
    model.eval()
    return model, int(payload["seed"])
