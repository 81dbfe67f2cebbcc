"""Content encoders, blur encoder, generators and multi-scale discriminators.

Tensors are N x C x H x W in [-1, 1].  The last residual block of the two
content encoders is a single module registered once on the model
(``shared_content``) and referenced by both encoders.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

DOMAINS = ("blurred", "sharp")
SHARED_NAME = "shared_content"
SHARED_ALIASES = ("enc_content_blur.shared", "enc_content_sharp.shared")


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    image_channels: int = 3
    base_width: int = 64
    latent_dim: int = 8
    disc_scales: int = 2
    crop_size: int = 128
    res_blocks: int = 4

    def validate(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.crop_size % 8:
            raise ConfigError(f"crop_size must be divisible by 8, got {self.crop_size}")
        if self.crop_size < 16:
            raise ConfigError("crop_size must be at least 16 for the blur encoder")
        return self

    @property
    def content_channels(self):
        return 4 * self.base_width


@dataclass
class BlurPosterior:
    mu: torch.Tensor
    log_var: torch.Tensor

    @property
    def sigma(self):
        return torch.exp(0.5 * self.log_var)


@dataclass
class BlurCode:
    z_b: torch.Tensor
    noise: torch.Tensor


def _conv(cin, cout, k, s, p, pad_mode="reflect"):
    return nn.Conv2d(cin, cout, k, s, p, padding_mode=pad_mode)


class ResBlock(nn.Module):
    def __init__(self, channels, in_channels=None):
        super().__init__()
        in_channels = in_channels or channels
        self.body = nn.Sequential(
            _conv(in_channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            _conv(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels),
        )
        self.skip = nn.Conv2d(in_channels, channels, 1) if in_channels != channels else nn.Identity()

    def forward(self, x):
        return self.skip(x) + self.body(x)


class ContentEncoder(nn.Module):
    """Three stride-2 convolutions and ``res_blocks`` residual blocks; the last one is ``shared``."""

    def __init__(self, config: NetworkConfig, shared: ResBlock):
        super().__init__()
        w, c = config.base_width, config.image_channels
        self.down = nn.Sequential(
            _conv(c, w, 7, 2, 3), nn.InstanceNorm2d(w), nn.ReLU(inplace=True),
            _conv(w, 2 * w, 4, 2, 1), nn.InstanceNorm2d(2 * w), nn.ReLU(inplace=True),
            _conv(2 * w, 4 * w, 4, 2, 1), nn.InstanceNorm2d(4 * w), nn.ReLU(inplace=True),
        )
        self.res = nn.Sequential(*[ResBlock(4 * w) for _ in range(config.res_blocks - 1)])
        self.shared = shared

    def forward(self, x):
        return self.shared(self.res(self.down(x)))


class BlurEncoder(nn.Module):
    """Four stride-2 convolutions, global average pooling, one linear layer to (mu, log_var)."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        w, c = config.base_width, config.image_channels
        chans = [c, w, 2 * w, 4 * w, 4 * w]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(4 * w, 2 * config.latent_dim)
        self.latent_dim = config.latent_dim

    def forward(self, x):
        h = self.conv(x).mean(dim=(2, 3))
        out = self.fc(h)
        return out[:, : self.latent_dim], out[:, self.latent_dim :]


class Generator(nn.Module):
    """Residual blocks on [content, tiled z_b] followed by three transposed convolutions."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        w, n = config.base_width, config.latent_dim
        blocks = [ResBlock(4 * w, in_channels=4 * w + n)]
        blocks += [ResBlock(4 * w) for _ in range(config.res_blocks - 1)]
        self.res = nn.Sequential(*blocks)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 4, 2, 1), nn.InstanceNorm2d(2 * w), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * w, w, 4, 2, 1), nn.InstanceNorm2d(w), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(w, config.image_channels, 4, 2, 1), nn.Tanh(),
        )

    def forward(self, content, z):
        tiled = z[:, :, None, None].expand(-1, -1, content.shape[2], content.shape[3])
        return self.up(self.res(torch.cat([content, tiled], dim=1)))


class PatchDiscriminator(nn.Module):
    def __init__(self, channels, width):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(channels, w, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * w, 4 * w, 3, 1, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * w, 1, 3, 1, 1),
        )

    def forward(self, x):
        return self.net(x)


class MultiScaleDiscriminator(nn.Module):
    """One patch discriminator per scale; scale k sees the input downsampled 2^k times.

    ``forward`` returns pre-sigmoid logits, one map per scale.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.scales = nn.ModuleList(
            PatchDiscriminator(config.image_channels, config.base_width) for _ in range(config.disc_scales)
        )

    def forward(self, x):
        out = []
        for i, disc in enumerate(self.scales):
            if i:
                x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
            out.append(disc(x))
        return out


class DeblurModel(nn.Module):
    """All learnable parameters: E_B^c, E_S^c, E^b, G_B, G_S, D_B, D_S."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        super().__init__()
        self.config = config.validate()
        self.seed = seed
        # Registered first so deduplicated parameter names use the canonical prefix.
        self.shared_content = ResBlock(config.content_channels)
        self.enc_content_blur = ContentEncoder(config, self.shared_content)
        self.enc_content_sharp = ContentEncoder(config, self.shared_content)
        self.enc_blur = BlurEncoder(config)
        self.gen_blur = Generator(config)
        self.gen_sharp = Generator(config)
        self.dis_blur = MultiScaleDiscriminator(config)
        self.dis_sharp = MultiScaleDiscriminator(config)

    @property
    def shared_tie(self):
        return {SHARED_NAME: list(SHARED_ALIASES)}

    def generator_modules(self):
        return [self.enc_content_blur, self.enc_content_sharp, self.enc_blur, self.gen_blur, self.gen_sharp]

    def discriminator_modules(self):
        return [self.dis_blur, self.dis_sharp]

    @staticmethod
    def _unique(modules):
        seen, params = set(), []
        for m in modules:
            for p in m.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        return params

    def generator_parameters(self):
        return self._unique(self.generator_modules())

    def discriminator_parameters(self):
        return self._unique(self.discriminator_modules())


def init_model(config: NetworkConfig, seed: int = 0) -> DeblurModel:
    """Build the model and draw every conv/linear weight from N(0, 0.02^2); biases start at 0."""
    model = DeblurModel(config, seed)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.normal_(0.0, 0.02, generator=gen)
    return model


def _check_image(model, img, min_size=8):
    cfg = model.config
    if img.ndim != 4 or img.shape[1] != cfg.image_channels:
        raise ShapeError(f"expected N x {cfg.image_channels} x H x W, got {tuple(img.shape)}")
    h, w = img.shape[-2:]
    if h % 8 or w % 8 or min(h, w) < max(min_size, 8):
        raise ShapeError(f"spatial size must be divisible by 8 and at least {min_size}, got {h}x{w}")


def _domain(domain):
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
    return domain


def content_encode(model: DeblurModel, domain: str, img: torch.Tensor) -> torch.Tensor:
    _check_image(model, img)
    enc = model.enc_content_blur if _domain(domain) == "blurred" else model.enc_content_sharp
    return enc(img)


def blur_encode(model: DeblurModel, img: torch.Tensor) -> BlurPosterior:
    _check_image(model, img, min_size=16)
    mu, log_var = model.enc_blur(img)
    return BlurPosterior(mu, log_var)


def sample_blur_code(post: BlurPosterior, noise: torch.Tensor) -> BlurCode:
    """Reparameterised draw z_b = mu + noise * exp(log_var / 2)."""
    if noise.shape != post.mu.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} does not match posterior {tuple(post.mu.shape)}")
    return BlurCode(post.mu + noise * torch.exp(0.5 * post.log_var), noise)


def generate(model: DeblurModel, domain: str, content: torch.Tensor, code) -> torch.Tensor:
    cfg = model.config
    z = code.z_b if isinstance(code, BlurCode) else code
    if content.ndim != 4 or content.shape[1] != cfg.content_channels:
        raise ShapeError(f"content must be N x {cfg.content_channels} x h x w, got {tuple(content.shape)}")
    if z.shape != (content.shape[0], cfg.latent_dim):
        raise ShapeError(f"blur code must be {content.shape[0]} x {cfg.latent_dim}, got {tuple(z.shape)}")
    gen = model.gen_blur if _domain(domain) == "blurred" else model.gen_sharp
    return gen(content, z)


def discriminate_logits(model: DeblurModel, domain: str, img: torch.Tensor):
    _check_image(model, img, min_size=8 * 2 ** (model.config.disc_scales - 1))
    disc = model.dis_blur if _domain(domain) == "blurred" else model.dis_sharp
    return disc(img)


def discriminate(model: DeblurModel, domain: str, img: torch.Tensor):
    """Per-scale score maps in (0, 1)."""
    return [torch.sigmoid(x) for x in discriminate_logits(model, domain, img)]
