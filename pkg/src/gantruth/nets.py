"""Encoders, decoders, multi-scale patch discriminators and the translation functions.

Encoders map an image into the shared latent space; the last residual block of
the two encoders and the first residual block of the two decoders are the same
module object, so the tied weights are literally one storage.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass(frozen=True)
class ArchConfig:
    image_size: tuple[int, int] = (64, 64)
    base_channels: int = 16
    n_downsample: int = 2
    n_res_blocks: int = 3
    n_shared_blocks: int = 1
    disc_channels: int = 16
    disc_layers: int = 4
    disc_scales: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_shared_blocks <= self.n_res_blocks:
            raise ValueError("n_shared_blocks must be within [0, n_res_blocks]")
        if min(self.base_channels, self.disc_channels, self.disc_layers, self.disc_scales) < 1:
            raise ValueError("channel and layer counts must be positive")

    @property
    def latent_channels(self) -> int:
        return self.base_channels * 2**self.n_downsample

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """N(0, 0.02) conv kernels, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


@dataclass
class LatentCode:
    """Encoder output mean; ``sample`` draws z ~ N(mean, I)."""

    mean: torch.Tensor

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype, device=self.mean.device)
        return self.mean + eps

    def draw(self, mode: str, generator: torch.Generator | None = None) -> torch.Tensor:
        if mode == "deterministic":
            return self.mean
        if mode == "sampled":
            return self.sample(generator)
        raise ValueError(f"unknown latent mode {mode!r}")


class Encoder(nn.Module):
    def __init__(self, cfg: ArchConfig, shared: nn.Module):
        super().__init__()
        c = cfg.base_channels
        layers = [nn.Conv2d(3, c, 7, 1, 3, padding_mode="reflect"), nn.InstanceNorm2d(c), nn.ReLU(inplace=True)]
        for _ in range(cfg.n_downsample):
            layers += [nn.Conv2d(c, 2 * c, 4, 2, 1), nn.InstanceNorm2d(2 * c), nn.ReLU(inplace=True)]
            c *= 2
        layers += [ResidualBlock(c) for _ in range(cfg.n_res_blocks - cfg.n_shared_blocks)]
        self.private = nn.Sequential(*layers)
        self.shared = shared
        self.factor = 2**cfg.n_downsample

    def forward(self, x: torch.Tensor) -> LatentCode:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (batch, 3, H, W) image batch, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"spatial size {h}x{w} is not divisible by {self.factor}")
        return LatentCode(self.shared(self.private(x)))


class Decoder(nn.Module):
    def __init__(self, cfg: ArchConfig, shared: nn.Module):
        super().__init__()
        c = cfg.latent_channels
        self.shared = shared
        layers = [ResidualBlock(c) for _ in range(cfg.n_res_blocks - cfg.n_shared_blocks)]
        for _ in range(cfg.n_downsample):
            layers += [nn.ConvTranspose2d(c, c // 2, 4, 2, 1), nn.InstanceNorm2d(c // 2), nn.ReLU(inplace=True)]
            c //= 2
        layers += [nn.Conv2d(c, 3, 7, 1, 3, padding_mode="reflect"), nn.Tanh()]
        self.private = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.private(self.shared(z))


def _shared_stack(cfg: ArchConfig) -> nn.Module:
    return nn.Sequential(*[ResidualBlock(cfg.latent_channels) for _ in range(cfg.n_shared_blocks)])


class TranslatorPair(nn.Module):
    """E_S, E_T, G_S, G_T with a tied encoder tail and decoder head.

    ``bidirectional=False`` builds only E_S and G_T (the simple GAN family).
    """

    def __init__(self, cfg: ArchConfig, bidirectional: bool = True):
        super().__init__()
        self.cfg = cfg
        self.bidirectional = bidirectional
        self.shared_enc = _shared_stack(cfg)
        self.shared_dec = _shared_stack(cfg)
        self.E_S = Encoder(cfg, self.shared_enc)
        self.G_T = Decoder(cfg, self.shared_dec)
        if bidirectional:
            self.E_T = Encoder(cfg, self.shared_enc)
            self.G_S = Decoder(cfg, self.shared_dec)
        else:
            self.E_T = None
            self.G_S = None

    def networks(self) -> dict[str, nn.Module]:
        return {k: getattr(self, k) for k in ("E_S", "E_T", "G_S", "G_T") if getattr(self, k) is not None}

    def shared_parameter_pairs(self):
        """(E_S param, E_T param) and (G_S param, G_T param) pairs that must stay tied."""
        if not self.bidirectional:
            return []
        pairs = list(zip(self.E_S.shared.parameters(), self.E_T.shared.parameters()))
        pairs += list(zip(self.G_S.shared.parameters(), self.G_T.shared.parameters()))
        return pairs


class PatchDiscriminator(nn.Module):
    """Fully convolutional: stride-2 convs then a 1x1 conv and a sigmoid."""

    def __init__(self, channels: int, n_layers: int):
        super().__init__()
        layers = []
        c_in, c = 3, channels
        for _ in range(n_layers):
            layers += [nn.Conv2d(c_in, c, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
            c_in, c = c, min(2 * c, 8 * channels)
        layers += [nn.Conv2d(c_in, 1, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return torch.sigmoid(self.net(x))


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.n_layers = cfg.disc_layers
        self.scales = nn.ModuleList(PatchDiscriminator(cfg.disc_channels, cfg.disc_layers) for _ in range(cfg.disc_scales))

    @property
    def min_size(self) -> int:
        """Smallest input side that leaves a non-empty grid at the coarsest scale."""
        return 2**self.n_layers * 2 ** (len(self.scales) - 1)

    def grid_shapes(self, h: int, w: int) -> list[tuple[int, int]]:
        shapes = []
        for s in range(len(self.scales)):
            gh, gw = h >> s, w >> s
            for _ in range(self.n_layers):
                gh, gw = gh // 2, gw // 2  # k=4, s=2, p=1 halves (floor)
            shapes.append((gh, gw))
        return shapes

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if min(h, w) < self.min_size:
            raise ValueError(
                f"input {h}x{w} is below the minimal resolution {self.min_size} for {len(self.scales)} scales"
            )
        out = []
        for i, d in enumerate(self.scales):
            if i:
                x = F.avg_pool2d(x, 2)
            out.append(d(x))
        return out


def encode(E: Encoder, x: torch.Tensor) -> LatentCode:
    return E(x)


def translate(E_src: Encoder, G_dst: Decoder, x: torch.Tensor, mode: str = "deterministic",
              generator: torch.Generator | None = None) -> torch.Tensor:
    """x*_{src->dst} = G_dst(z), z ~ N(E_src(x), I); mode='deterministic' uses z = E_src(x)."""
    return G_dst(E_src(x).draw(mode, generator))


def discriminate(D: MultiScaleDiscriminator, x: torch.Tensor) -> list[torch.Tensor]:
    return D(x)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_report(modules: dict[str, nn.Module]) -> dict[str, int]:
    report = {name: count_parameters(m) for name, m in modules.items() if m is not None}
    seen = {}
    for m in modules.values():
        if m is not None:
            for p in m.parameters():
                seen[id(p)] = p.numel()
    report["total_unique"] = sum(seen.values())
    return report


def build_translator_pair(cfg: ArchConfig, bidirectional: bool = True) -> TranslatorPair:
    g = torch.Generator().manual_seed(cfg.seed)
    pair = TranslatorPair(cfg, bidirectional)
    init_weights(pair, g)
    _check_latent(pair, cfg)
    log.info("translator parameters: %s", parameter_report(pair.networks()))
    return pair


def build_discriminators(cfg: ArchConfig, bidirectional: bool = True):
    """(D_S, D_T); D_S is None for the one-directional family."""
    g = torch.Generator().manual_seed(cfg.seed + 1)
    d_t = MultiScaleDiscriminator(cfg)
    d_s = MultiScaleDiscriminator(cfg) if bidirectional else None
    for d in (d_s, d_t):
        if d is not None:
            init_weights(d, g)
    if min(cfg.image_size) < d_t.min_size:
        raise ValueError(f"image_size {cfg.image_size} is below the discriminator minimum {d_t.min_size}")
    log.info("discriminator parameters: %s", parameter_report({"D_S": d_s, "D_T": d_t}))
    return d_s, d_t


def _check_latent(pair: TranslatorPair, cfg: ArchConfig) -> None:
    h, w = cfg.image_size
    f = 2**cfg.n_downsample
    if h % f or w % f:
        raise ValueError(f"image_size {cfg.image_size} not divisible by the downsampling factor {f}")
    with torch.no_grad():
        probe = torch.zeros(1, 3, f * 4, f * 4)
        shapes = set()
        for E in (pair.E_S, pair.E_T):
            if E is not None:
                shapes.add(tuple(E(probe).mean.shape))
        for G in (pair.G_S, pair.G_T):
            if G is not None:
                out = G(torch.zeros(1, cfg.latent_channels, 4, 4))
                if tuple(out.shape[-2:]) != (f * 4, f * 4):
                    raise ValueError("decoder does not invert the encoder's spatial reduction")
        if len(shapes) != 1 or next(iter(shapes))[1] != cfg.latent_channels:
            raise ValueError(f"latent shape mismatch between encoders and decoders: {shapes}")
