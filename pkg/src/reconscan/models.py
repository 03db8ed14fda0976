"""The three generator/critic architectures as shape-checked graphs.

* UNET33: a plain encoder-decoder with five double-conv stages, four
  max-pools down to (H/16, W/16, 16*base), four transposed-conv stages
  with skip concatenations, two dropout sites, and a sigmoid 1x1 head.
* GAN33: a pix2pix-style skip generator (four 4x4 stride-2 convs down,
  four 4x4 stride-2 transposed convs up, batch norm, LeakyReLU/ReLU,
  two dropout sites, [0, 1]-bounded tanh tail) plus a convolutional
  critic over the concatenated (conditioning stack, candidate stack)
  emitting one unbounded score per pair.
* SAGAN33: GAN33 with five self-attention modules in the generator and
  two in the critic, inserted at named stage anchors.

Default attention anchors sit at the five stages nearest the bottleneck
(enc2, enc3, enc4, dec1, dec2): position-pair attention is quadratic in
h*w, so full-resolution anchors are not viable at native scan geometry.
Anchors are configurable per spec.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data_pipeline import Plane
from .errors import (
    ChannelError,
    CheckpointError,
    GeometryError,
    PlacementError,
    SpecError,
)

DOWNSAMPLE_FACTOR = 16  # four stride-2 stages in every architecture

GENERATOR_STAGES = ("enc1", "enc2", "enc3", "enc4", "dec1", "dec2", "dec3", "dec4")
CRITIC_STAGES = ("conv1", "conv2", "conv3", "conv4")
DEFAULT_GENERATOR_ANCHORS = ("enc2", "enc3", "enc4", "dec1", "dec2")
DEFAULT_CRITIC_ANCHORS = ("conv2", "conv3")


class ModelKind(str, Enum):
    UNET33 = "unet33"
    GAN33 = "gan33"
    SAGAN33 = "sagan33"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    height: int
    width: int
    in_channels: int = 3
    out_channels: int = 3
    base_width: int = 16
    dropout: float = 0.5
    sa_generator: tuple[str, ...] = ()
    sa_critic: tuple[str, ...] = ()


def make_spec(
    kind: ModelKind | str,
    height: int,
    width: int,
    *,
    in_channels: int = 3,
    out_channels: int = 3,
    base_width: int | None = None,
    dropout: float = 0.5,
    sa_generator: tuple[str, ...] | None = None,
    sa_critic: tuple[str, ...] | None = None,
) -> ModelSpec:
    """Fill kind-appropriate defaults (base width, attention anchors)."""
    kind = ModelKind(kind)
    if base_width is None:
        base_width = 16 if kind == ModelKind.UNET33 else 64
    if kind == ModelKind.SAGAN33:
        sa_generator = tuple(sa_generator or DEFAULT_GENERATOR_ANCHORS)
        sa_critic = tuple(sa_critic or DEFAULT_CRITIC_ANCHORS)
    else:
        sa_generator = ()
        sa_critic = ()
    return ModelSpec(
        kind=kind,
        height=height,
        width=width,
        in_channels=in_channels,
        out_channels=out_channels,
        base_width=base_width,
        dropout=dropout,
        sa_generator=sa_generator,
        sa_critic=sa_critic,
    )


def _check_geometry(spec: ModelSpec) -> None:
    if spec.height % DOWNSAMPLE_FACTOR or spec.width % DOWNSAMPLE_FACTOR:
        raise GeometryError(
            f"input {spec.height}x{spec.width} must be divisible by "
            f"{DOWNSAMPLE_FACTOR} (four downsampling stages)"
        )
    if spec.height < DOWNSAMPLE_FACTOR or spec.width < DOWNSAMPLE_FACTOR:
        raise GeometryError("input too small for four downsampling stages")


class SelfAttention2d(nn.Module):
    """Residual position-pair attention with a learnable gate starting at 0.

    Three 1x1 transforms split the feature map into queries/keys (c/8
    channels each) and values (c channels); each output position mixes
    values with softmax weights over all positions, and the result is
    added back through the ``gamma`` gate. Output shape equals input.
    """

    def __init__(self, channels: int):
        if channels < 8:
            raise ChannelError(
                f"self-attention needs >= 8 channels (got {channels}) so the "
                "reduced query/key width stays >= 1"
            )
        super().__init__()
        reduced = channels // 8
        self.query = nn.Conv2d(channels, reduced, kernel_size=1)
        self.key = nn.Conv2d(channels, reduced, kernel_size=1)
        self.value = nn.Conv2d(channels, channels, kernel_size=1)
        self.gamma = nn.Parameter(torch.zeros(1))

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """(B, N, N) weights; each row is a distribution over positions."""
        b = x.shape[0]
        q = self.query(x).flatten(2).transpose(1, 2)  # (B, N, c/8)
        k = self.key(x).flatten(2)  # (B, c/8, N)
        return torch.softmax(torch.bmm(q, k), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        attn = self.attention_weights(x)
        v = self.value(x).flatten(2)  # (B, C, N)
        out = torch.bmm(v, attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.gamma * out


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ReconstructionUNet(nn.Module):
    """Five-stage UNet with skip concatenations and a sigmoid head."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        _check_geometry(spec)
        self.spec = spec
        b = spec.base_width
        self.enc1 = _double_conv(spec.in_channels, b)
        self.enc2 = _double_conv(b, 2 * b)
        self.enc3 = _double_conv(2 * b, 4 * b)
        self.enc4 = _double_conv(4 * b, 8 * b)
        self.enc5 = _double_conv(8 * b, 16 * b)
        self.pool = nn.MaxPool2d(2)
        self.up1 = nn.ConvTranspose2d(16 * b, 8 * b, 2, stride=2)
        self.dec1 = _double_conv(16 * b, 8 * b)
        self.up2 = nn.ConvTranspose2d(8 * b, 4 * b, 2, stride=2)
        self.dec2 = _double_conv(8 * b, 4 * b)
        self.up3 = nn.ConvTranspose2d(4 * b, 2 * b, 2, stride=2)
        self.dec3 = _double_conv(4 * b, 2 * b)
        self.up4 = nn.ConvTranspose2d(2 * b, b, 2, stride=2)
        self.dec4 = _double_conv(2 * b, b)
        self.dropout = nn.Dropout(spec.dropout)
        self.head = nn.Conv2d(b, spec.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        e4 = self.enc4(self.pool(e3))
        e5 = self.enc5(self.pool(e4))
        d1 = self.dec1(self.dropout(torch.cat([self.up1(e5), e4], dim=1)))
        d2 = self.dec2(self.dropout(torch.cat([self.up2(d1), e3], dim=1)))
        d3 = self.dec3(torch.cat([self.up3(d2), e2], dim=1))
        d4 = self.dec4(torch.cat([self.up4(d3), e1], dim=1))
        return torch.sigmoid(self.head(d4))


class SkipGenerator(nn.Module):
    """4x4 stride-2 skip generator with optional attention at stage anchors.

    Stage outputs (attention anchor points) carry these channel counts for
    base width b: enc1 b, enc2 2b, enc3 4b, enc4 8b, dec1 8b (after skip),
    dec2 4b, dec3 2b, dec4 = out_channels.
    """

    def __init__(self, spec: ModelSpec, sa_anchors: tuple[str, ...] = ()):
        super().__init__()
        _check_geometry(spec)
        self.spec = spec
        b = spec.base_width

        def down(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(0.2, inplace=True),
            )

        def up(cin, cout):
            return nn.Sequential(
                nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            )

        self.enc1 = down(spec.in_channels, b)
        self.enc2 = down(b, 2 * b)
        self.enc3 = down(2 * b, 4 * b)
        self.enc4 = down(4 * b, 8 * b)
        self.dec1 = up(8 * b, 4 * b)
        self.dec2 = up(8 * b, 2 * b)
        self.dec3 = up(4 * b, b)
        self.dec4 = nn.ConvTranspose2d(2 * b, spec.out_channels, 4, stride=2, padding=1)
        self.dropout = nn.Dropout(spec.dropout)

        channels = {
            "enc1": b,
            "enc2": 2 * b,
            "enc3": 4 * b,
            "enc4": 8 * b,
            "dec1": 8 * b,
            "dec2": 4 * b,
            "dec3": 2 * b,
            "dec4": spec.out_channels,
        }
        self.sa = _build_attention(sa_anchors, channels, GENERATOR_STAGES)

    def _attend(self, stage: str, x: torch.Tensor) -> torch.Tensor:
        return self.sa[stage](x) if stage in self.sa else x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self._attend("enc1", self.enc1(x))
        e2 = self._attend("enc2", self.enc2(e1))
        e3 = self._attend("enc3", self.enc3(e2))
        e4 = self._attend("enc4", self.enc4(e3))
        d1 = self._attend("dec1", torch.cat([self.dropout(self.dec1(e4)), e3], dim=1))
        d2 = self._attend("dec2", torch.cat([self.dropout(self.dec2(d1)), e2], dim=1))
        d3 = self._attend("dec3", torch.cat([self.dec3(d2), e1], dim=1))
        out = self._attend("dec4", self.dec4(d3))
        return (torch.tanh(out) + 1.0) / 2.0


class PairCritic(nn.Module):
    """Convolutional critic over (conditioning, candidate) channel pairs.

    Four 4x4 stride-2 convolutions with LeakyReLU and no batch norm, then
    a 1x1 projection averaged over space into one unbounded score.
    """

    def __init__(self, spec: ModelSpec, sa_anchors: tuple[str, ...] = ()):
        super().__init__()
        _check_geometry(spec)
        self.spec = spec
        b = spec.base_width
        cin = spec.in_channels + spec.out_channels

        def down(c_in, c_out):
            return nn.Sequential(
                nn.Conv2d(c_in, c_out, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
            )

        self.conv1 = down(cin, b)
        self.conv2 = down(b, 2 * b)
        self.conv3 = down(2 * b, 4 * b)
        self.conv4 = down(4 * b, 8 * b)
        self.head = nn.Conv2d(8 * b, 1, 1)
        channels = {"conv1": b, "conv2": 2 * b, "conv3": 4 * b, "conv4": 8 * b}
        self.sa = _build_attention(sa_anchors, channels, CRITIC_STAGES)

    def _attend(self, stage: str, x: torch.Tensor) -> torch.Tensor:
        return self.sa[stage](x) if stage in self.sa else x

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        h = self._attend("conv1", self.conv1(pair))
        h = self._attend("conv2", self.conv2(h))
        h = self._attend("conv3", self.conv3(h))
        h = self._attend("conv4", self.conv4(h))
        return self.head(h).mean(dim=(1, 2, 3))

    def score(self, conditioning: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        return self.forward(torch.cat([conditioning, candidate], dim=1))


def _build_attention(
    anchors: tuple[str, ...], channels: dict[str, int], known: tuple[str, ...]
) -> nn.ModuleDict:
    modules = {}
    for anchor in anchors:
        if anchor not in known:
            raise PlacementError(
                f"unknown attention anchor {anchor!r}; expected one of {known}"
            )
        if anchor in modules:
            raise PlacementError(f"duplicate attention anchor {anchor!r}")
        modules[anchor] = SelfAttention2d(channels[anchor])
    return nn.ModuleDict(modules)


def build_unet33(spec: ModelSpec) -> ReconstructionUNet:
    if spec.kind != ModelKind.UNET33:
        raise SpecError(f"build_unet33 got spec of kind {spec.kind}")
    return ReconstructionUNet(spec)


def build_gan33(spec: ModelSpec) -> tuple[SkipGenerator, PairCritic]:
    if spec.kind != ModelKind.GAN33:
        raise SpecError(f"build_gan33 got spec of kind {spec.kind}")
    return SkipGenerator(spec, ()), PairCritic(spec, ())


def build_sagan33(spec: ModelSpec) -> tuple[SkipGenerator, PairCritic]:
    if spec.kind != ModelKind.SAGAN33:
        raise SpecError(f"build_sagan33 got spec of kind {spec.kind}")
    if len(spec.sa_generator) != 5 or len(spec.sa_critic) != 2:
        raise PlacementError(
            "attention placement must list 5 generator and 2 critic anchors, "
            f"got {len(spec.sa_generator)}+{len(spec.sa_critic)}"
        )
    return SkipGenerator(spec, spec.sa_generator), PairCritic(spec, spec.sa_critic)


def build_model(spec: ModelSpec) -> tuple[nn.Module, nn.Module | None]:
    """Build (generator, critic-or-None) for any model kind."""
    if spec.kind == ModelKind.UNET33:
        return build_unet33(spec), None
    if spec.kind == ModelKind.GAN33:
        return build_gan33(spec)
    return build_sagan33(spec)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_attention_modules(module: nn.Module) -> int:
    return sum(1 for m in module.modules() if isinstance(m, SelfAttention2d))


@dataclass
class TrainedModel:
    """A built model plus the plane it was trained for."""

    spec: ModelSpec
    generator: nn.Module
    critic: nn.Module | None = None
    plane: Plane | None = None
    version: str = "1"

    def param_count(self) -> int:
        total = count_parameters(self.generator)
        if self.critic is not None:
            total += count_parameters(self.critic)
        return total

    def reconstruct(self, stack: np.ndarray) -> np.ndarray:
        """Run the generator on one (H, W, C) stack; returns (H, W, C_out)."""
        x = torch.from_numpy(
            np.ascontiguousarray(stack, dtype=np.float32)
        ).permute(2, 0, 1).unsqueeze(0)
        was_training = self.generator.training
        self.generator.eval()
        try:
            with torch.no_grad():
                out = self.generator(x)
        finally:
            self.generator.train(was_training)
        return out.squeeze(0).permute(1, 2, 0).numpy()

    __call__ = reconstruct


def spec_to_dict(spec: ModelSpec) -> dict:
    data = asdict(spec)
    data["kind"] = spec.kind.value
    data["sa_generator"] = list(spec.sa_generator)
    data["sa_critic"] = list(spec.sa_critic)
    return data


def spec_from_dict(data: dict) -> ModelSpec:
    return ModelSpec(
        kind=ModelKind(data["kind"]),
        height=int(data["height"]),
        width=int(data["width"]),
        in_channels=int(data["in_channels"]),
        out_channels=int(data["out_channels"]),
        base_width=int(data["base_width"]),
        dropout=float(data["dropout"]),
        sa_generator=tuple(data["sa_generator"]),
        sa_critic=tuple(data["sa_critic"]),
    )


def spec_hash(spec: ModelSpec) -> str:
    canonical = json.dumps(spec_to_dict(spec), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


CHECKPOINT_FORMAT = "reconscan-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: TrainedModel) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": spec_to_dict(model.spec),
        "spec_sha256": spec_hash(model.spec),
        "plane": model.plane.value if model.plane else None,
        "model_version": model.version,
        "param_count": model.param_count(),
        "generator": model.generator.state_dict(),
        "critic": model.critic.state_dict() if model.critic is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version")
    spec = spec_from_dict(payload["spec"])
    if spec_hash(spec) != payload["spec_sha256"]:
        raise CheckpointError(f"{path}: stored spec hash does not match contents")
    if expected_spec is not None and spec_hash(expected_spec) != payload["spec_sha256"]:
        raise CheckpointError(
            f"{path}: checkpoint spec hash differs from the requested spec"
        )
    generator, critic = build_model(spec)
    generator.load_state_dict(payload["generator"])
    if critic is not None and payload.get("critic") is not None:
        critic.load_state_dict(payload["critic"])
    plane = Plane(payload["plane"]) if payload.get("plane") else None
    model = TrainedModel(
        spec=spec,
        generator=generator,
        critic=critic,
        plane=plane,
        version=str(payload.get("model_version", "1")),
    )
    if model.param_count() != payload.get("param_count"):
        raise CheckpointError(
            f"{path}: parameter count {model.param_count()} does not match "
            f"stored {payload.get('param_count')}"
        )
    return model
