"""Fixed feature extractors for the perceptual loss and the feature-distance metric.

Both consumers only need a callable mapping an N x C x H x W batch in [-1, 1]
to a feature tensor.  ``VGGFeatures`` is the production binding (weights are
loaded at runtime, never shipped); ``RandomFeatures`` is a deterministic
stand-in with the same layer names, used in tests and desk-scale runs.
Distances measured with the stand-in are not comparable to VGG distances.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

LAYERS = ("conv3_3", "pool5")


def _match_channels(x, channels):
    if x.shape[1] == channels:
        return x
    if x.shape[1] == 1:
        return x.expand(-1, channels, -1, -1)
    if channels == 1:
        return x.mean(dim=1, keepdim=True)
    raise ValueError(f"cannot feed {x.shape[1]}-channel images to a {channels}-channel extractor")


class RandomFeatures(nn.Module):
    """Five conv+ReLU stages with 2x average pooling, frozen at a fixed seed.

    ``conv3_3`` is the activation of the third stage, ``pool5`` the flattened
    output after the fifth pooling.
    """

    def __init__(self, in_channels=3, layer="conv3_3", widths=(16, 32, 64, 64, 64), seed=0):
        super().__init__()
        if layer not in LAYERS:
            raise ValueError(f"unknown layer {layer!r}; expected one of {LAYERS}")
        self.layer = layer
        self.in_channels = in_channels
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        prev = in_channels
        for w in widths:
            conv = nn.Conv2d(prev, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (prev * 9)) ** 0.5, generator=gen)
                conv.bias.zero_()
            self.convs.append(conv)
            prev = w
        self.requires_grad_(False)
        self.eval()

    @staticmethod
    def _pool(x):
        if min(x.shape[-2:]) < 2:
            return x
        return F.avg_pool2d(x, 2, ceil_mode=True)

    def forward(self, x):
        x = _match_channels(x, self.in_channels).to(self.convs[0].weight.dtype)
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            if self.layer == "conv3_3" and i == 2:
                return x
            x = self._pool(x)
        return x.flatten(1)


class VGGFeatures(nn.Module):
    """A 19-layer VGG truncated at ``conv3_3`` or ``pool5``.

    ``weights`` is a path to a saved state dict, ``"imagenet"`` for the
    torchvision download, or None for random weights (shape checks only).
    """

    _CUT = {"conv3_3": 15, "pool5": 37}

    def __init__(self, layer="conv3_3", weights=None):
        super().__init__()
        from torchvision.models import vgg19

        if layer not in self._CUT:
            raise ValueError(f"unknown layer {layer!r}; expected one of {LAYERS}")
        self.layer = layer
        if weights == "imagenet":
            from torchvision.models import VGG19_Weights

            net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        else:
            net = vgg19(weights=None)
            if weights is not None:
                net.load_state_dict(torch.load(weights, map_location="cpu"))
        self.body = net.features[: self._CUT[layer]]
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        x = _match_channels(x, 3).to(self.mean.dtype)
        x = ((x + 1.0) / 2.0 - self.mean) / self.std
        out = self.body(x)
        return out.flatten(1) if self.layer == "pool5" else out


def build_extractor(kind="surrogate", layer="conv3_3", in_channels=3, seed=0, weights=None):
    if kind == "surrogate":
        return RandomFeatures(in_channels, layer, seed=seed)
    if kind == "vgg19":
        return VGGFeatures(layer, weights)
    raise ValueError(f"unknown feature extractor {kind!r}")
