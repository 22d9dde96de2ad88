"""Networks: LinkNet-style segmenter, domain classifiers, cycle generators."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import torch
import torch.nn as nn


class GradReverse(torch.autograd.Function):
    """Identity forward; multiplies the incoming gradient by -lambda."""

    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = float(lam)
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grl(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    if lam < 0:
        raise ValueError("GRL lambda must be nonnegative")
    return GradReverse.apply(x, lam)


@dataclass
class SegNetConfig:
    in_channels: int = 1
    encoder_widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    num_classes: int = 2

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        if len(self.encoder_widths) < 3:
            raise ValueError("need at least 3 encoder stages")
        if any(w <= 0 for w in self.encoder_widths):
            raise ValueError("encoder widths must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @property
    def n_stages(self) -> int:
        return len(self.encoder_widths)


def conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class EncoderStage(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.down = conv_bn_relu(cin, cout, stride=2)
        self.conv = conv_bn_relu(cout, cout)

    def forward(self, x):
        return self.conv(self.down(x))


class DecoderBlock(nn.Module):
    """LinkNet decoder block: 1x1 squeeze, 2x transposed conv, 1x1 expand."""

    def __init__(self, cin, cout):
        super().__init__()
        mid = max(cin // 4, 4)
        self.block = nn.Sequential(
            nn.Conv2d(cin, mid, 1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(mid, mid, 3, stride=2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class SegNet(nn.Module):
    """Encoder-decoder with additive skips.

    ``forward`` returns ``(probs, features)``: per-pixel softmax over
    ``num_classes`` at input resolution and the deepest encoder output at
    1/2**n_stages resolution.
    """

    def __init__(self, config: SegNetConfig = None):
        super().__init__()
        self.config = config or SegNetConfig()
        widths = self.config.encoder_widths
        stem = widths[0] // 2
        self.stem = conv_bn_relu(self.config.in_channels, stem)
        self.encoders = nn.ModuleList()
        cin = stem
        for w in widths:
            self.encoders.append(EncoderStage(cin, w))
            cin = w
        # decoders[i] maps stage i+1 resolution back to stage i
        outs = [stem] + widths[:-1]
        self.decoders = nn.ModuleList(DecoderBlock(widths[i], outs[i]) for i in range(len(widths)))
        self.head = nn.Conv2d(stem, self.config.num_classes, 1)

    def logits_and_features(self, x):
        n = self.config.n_stages
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        if x.shape[-2] % 2**n or x.shape[-1] % 2**n:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} must be divisible by {2**n}")
        skips = [self.stem(x)]
        for enc in self.encoders:
            skips.append(enc(skips[-1]))
        features = skips[-1]
        d = features
        for i in reversed(range(n)):
            d = self.decoders[i](d) + skips[i]
        return self.head(d), features

    def forward(self, x):
        logits, features = self.logits_and_features(x)
        return torch.softmax(logits, dim=1), features


class DomainClassifier(nn.Module):
    """Global source-vs-target classifier; one logit per sample (target = 1)."""

    def __init__(self, in_channels: int, hidden: int = 64):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.fc = nn.Linear(hidden, 1)

    def forward(self, f):
        h = self.convs(f).mean(dim=(2, 3))
        return self.fc(h).squeeze(1)


class FadaDiscriminator(nn.Module):
    """Per-pixel 2K-way discriminator.

    Channels ``[0, K)`` score "source and class k", ``[K, 2K)`` score
    "target and class k".
    """

    def __init__(self, in_channels: int, num_classes: int = 2, hidden: int = 64):
        super().__init__()
        self.num_classes = num_classes
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(hidden, 2 * num_classes, 1),
        )

    def forward(self, f):
        return self.net(f)


class GeneratorG(nn.Module):
    """Cube (B, C, H, W) -> reduced image (B, k, H, W) in [0, 1].

    ``variant="1x1"`` is a single pointwise convolution, so every output
    pixel depends only on its own spectrum. ``variant="cnn"`` stacks three
    3x3 convolutions.
    """

    def __init__(self, bands: int, out_channels: int = 1, variant: str = "cnn", hidden: int = 32):
        super().__init__()
        self.bands, self.out_channels, self.variant = bands, out_channels, variant
        if variant == "1x1":
            self.net = nn.Conv2d(bands, out_channels, 1)
        elif variant == "cnn":
            self.net = nn.Sequential(
                nn.Conv2d(bands, hidden, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(hidden, hidden, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(hidden, out_channels, 3, padding=1),
            )
        else:
            raise ValueError(f"unknown generator variant {variant!r}")

    def forward(self, cube):
        if cube.shape[1] != self.bands:
            raise ValueError(f"expected {self.bands} bands, got {cube.shape[1]}")
        return torch.sigmoid(self.net(cube))


class GeneratorF(nn.Module):
    """Reduced image (B, k, H, W) -> cube-shaped (B, C, H, W); linear output."""

    def __init__(self, bands: int, in_channels: int = 1, hidden: int = 32):
        super().__init__()
        self.bands, self.in_channels = bands, in_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, bands, 1),
        )

    def forward(self, image):
        if image.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {image.shape[1]}")
        return self.net(image)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Union[str, Path], modules: dict[str, nn.Module], config: Optional[dict] = None) -> Path:
    """One file holding every module's weights keyed ``<module>.<param path>``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    weights = {}
    for name, module in modules.items():
        for key, tensor in module.state_dict().items():
            weights[f"{name}.{key}"] = tensor.detach().clone()
    torch.save({"weights": weights, "config": json.dumps(config or {}, sort_keys=True)}, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[dict[str, dict[str, torch.Tensor]], dict]:
    """Return ``({module: state_dict}, config)``."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    grouped: dict[str, dict[str, torch.Tensor]] = {}
    for key, tensor in blob["weights"].items():
        name, _, rest = key.partition(".")
        grouped.setdefault(name, {})[rest] = tensor
    return grouped, json.loads(blob["config"])


def segnet_config_dict(config: SegNetConfig) -> dict:
    return asdict(config)
