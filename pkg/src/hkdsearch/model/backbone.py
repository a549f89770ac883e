"""Backbones and the res5-style heads that sit on pooled RoI features."""
from __future__ import annotations

import copy

import torch
from torch import nn

from .config import ModelConfig


def _conv_bn(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """One stride-2 conv stage per entry of ``channels``."""

    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        layers, cin = [], 3
        for c in channels:
            layers += [_conv_bn(cin, c, 2), _conv_bn(c, c, 1)]
            cin = c
        self.body = nn.Sequential(*layers)
        self.out_channels = cin

    def forward(self, x):
        return self.body(x)


class TinyRes5(nn.Module):
    """Three convs with a stride-2 middle layer, so the receptive field spans a 7x7 pooled RoI."""

    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(_conv_bn(cin, cout, 1), _conv_bn(cout, cout, 2), _conv_bn(cout, cout, 1))
        self.out_channels = cout

    def forward(self, x):
        return self.body(x)


class ResNetBackbone(nn.Module):
    """ResNet-50 stem through the 4th stage (stride 16); the 5th stage is handed to the heads."""

    def __init__(self, pretrained: str | None = None):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if pretrained:
            net.load_state_dict(torch.load(pretrained, map_location="cpu"), strict=False)
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3)
        self.res5 = net.layer4
        self.out_channels = 1024

    def forward(self, x):
        return self.body(x)


def build_backbone(cfg: ModelConfig):
    """Return ``(backbone, make_res5)``; each call of ``make_res5`` gives an independent head trunk."""
    if cfg.backbone == "tiny":
        backbone = TinyBackbone(cfg.tiny_channels)
        return backbone, lambda: TinyRes5(backbone.out_channels, cfg.tiny_head_channels)
    if cfg.backbone == "resnet50":
        from torchvision.models import resnet50

        backbone = ResNetBackbone(cfg.pretrained)
        pretrained_res5 = backbone.res5.state_dict() if cfg.pretrained else None
        del backbone.res5

        def make_res5():
            # fresh init per head; pretrained stage-5 weights are shared only as a starting point
            head = resnet50(weights=None).layer4
            if pretrained_res5 is not None:
                head.load_state_dict(copy.deepcopy(pretrained_res5))
            head.out_channels = 2048
            return head

        return backbone, make_res5
    raise ValueError(f"unknown backbone {cfg.backbone!r}")
