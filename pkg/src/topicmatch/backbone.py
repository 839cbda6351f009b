"""UNet-style feature pyramid: coarse maps at 1/8 scale, fine maps at 1/2 scale."""
from dataclasses import dataclass
import math

import torch
from torch import nn
import torch.nn.functional as F

from .numerics import ContractError


@dataclass
class FeaturePyramid:
    coarse: torch.Tensor   # B x d_c x H/8 x W/8
    fine: torch.Tensor     # B x d_f x H/2 x W/2
    image_hw: tuple        # original (H, W) before padding
    padded_hw: tuple


def conv_bn(cin, cout, k=3, stride=1, act="gelu"):
    layers = [nn.Conv2d(cin, cout, k, stride, k // 2, bias=False), nn.BatchNorm2d(cout)]
    layers.append(nn.ReLU() if act == "relu" else nn.GELU())
    return nn.Sequential(*layers)


def conv(cin, cout):
    return nn.Conv2d(cin, cout, 3, 1, 1)


class UNetBackbone(nn.Module):
    def __init__(self, widths=(32, 48, 64, 96)):
        super().__init__()
        c1, c2, c3, c4 = widths
        self.down1 = nn.Sequential(conv_bn(1, c1, 7, 2, act="relu"), conv_bn(c1, c1), conv_bn(c1, c1))
        self.down2 = nn.Sequential(conv_bn(c1, c2, 3, 2), conv_bn(c2, c2))
        self.down3 = nn.Sequential(conv_bn(c2, c3, 3, 2), conv_bn(c3, c3))
        self.down4 = nn.Sequential(conv_bn(c3, c4, 3, 2), conv_bn(c4, c4))

        self.lat3 = conv(c3, c4)
        self.out3 = nn.Sequential(conv_bn(c4, c3), conv(c3, c3))
        self.lat2 = conv(c2, c3)
        self.out2 = nn.Sequential(conv_bn(c3, c2), conv(c2, c2))
        self.lat1 = conv(c1, c2)
        self.out1 = nn.Sequential(conv_bn(c2, c1), conv(c1, c1))

    @staticmethod
    def _up_add(lateral, coarser):
        up = F.interpolate(coarser, size=lateral.shape[-2:], mode="bilinear", align_corners=False)
        return lateral + up

    def forward(self, x):
        f1 = self.down1(x)
        f2 = self.down2(f1)
        f3 = self.down3(f2)
        f4 = self.down4(f3)
        fc = self.out3(self._up_add(self.lat3(f3), f4))
        f2o = self.out2(self._up_add(self.lat2(f2), fc))
        ff = self.out1(self._up_add(self.lat1(f1), f2o))
        return fc, ff


def pad_to_multiple(images, multiple=8):
    """Reflect-pad a B x 1 x H x W batch on the bottom/right edges."""
    h, w = images.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        images = F.pad(images, (0, pw, 0, ph), mode="reflect")
    return images


def extract_features(images, backbone):
    """Run ``backbone`` on grayscale images in [0, 1].

    ``images`` may be H x W, 1 x H x W or B x 1 x H x W.
    """
    x = torch.as_tensor(images)
    while x.dim() < 4:
        x = x.unsqueeze(0)
    h, w = x.shape[-2:]
    if h < 32 or w < 32:
        raise ContractError(f"image {h}x{w} smaller than 32x32")
    x = x.to(next(backbone.parameters()).dtype)
    x = pad_to_multiple(x, 8)
    fc, ff = backbone(x)
    return FeaturePyramid(fc, ff, (h, w), tuple(x.shape[-2:]))


def positional_encoding(h, w, d, dtype=torch.float64):
    """2-D sinusoidal encoding, shape h x w x d.

    Channel 4i/4i+1 carry sin/cos of the column index, 4i+2/4i+3 of the row index,
    at frequency 10000^(-2i/(d/2)).
    """
    if d % 4:
        raise ContractError(f"encoding width {d} is not a multiple of 4")
    freq = torch.exp(torch.arange(0, d // 2, 2, dtype=torch.float64) * (-math.log(10000.0) / (d // 2)))
    ys = torch.arange(h, dtype=torch.float64)[:, None, None]
    xs = torch.arange(w, dtype=torch.float64)[None, :, None]
    pe = torch.zeros(h, w, d, dtype=torch.float64)
    pe[..., 0::4] = torch.sin(xs * freq).expand(h, w, -1)
    pe[..., 1::4] = torch.cos(xs * freq).expand(h, w, -1)
    pe[..., 2::4] = torch.sin(ys * freq).expand(h, w, -1)
    pe[..., 3::4] = torch.cos(ys * freq).expand(h, w, -1)
    return pe.to(dtype)
