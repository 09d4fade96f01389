"""Dual-branch segmentation network.

One shared encoder (five residual blocks with atrous convolutions at rates
1, 2 and 5, each closed by a stride-2 convolution) feeds two decoders: a
reconstruction branch of three bilinear upsampling stages, and a
segmentation branch whose two attention blocks gate the segmentation
features with channel-softmax maps of the reconstruction features. The
bottleneck is the latent code used for attack scoring.

Channel widths and spatial sizes are parameterized so a reduced-width copy
of the same topology can run cheaply in unit tests; at the reference
configuration (input 256x768, base 64) the stage shapes are

    encoder   256x768x3 -> 128x384x64 -> 64x192x128 -> 32x96x256
              -> 16x48x512 -> 8x24x512 (latent)
    recon     8x24x512 -> 16x48x512 -> 32x96x256 -> 256x768x3
    seg       8x24x512 -> 16x48x512 -> (attention) -> 32x96x256
              -> (concat stage-3 skip) -> (attention) -> 256x768x4
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import N_CLASSES, BScan, LatentCode, SegmentationOutput

REFERENCE_HW = (256, 768)
REFERENCE_BASE = 64


def stage_channels(base: int) -> tuple:
    return (base, 2 * base, 4 * base, 8 * base, 8 * base)


def _conv_bn_relu(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation,
                  dilation=dilation),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ResBlock(nn.Module):
    """Three atrous convolutions (rates 1, 2, 5) with a residual shortcut,
    then a stride-2 convolution that does the downsampling."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.a1 = _conv_bn_relu(cin, cout, dilation=1)
        self.a2 = _conv_bn_relu(cout, cout, dilation=2)
        self.a3 = nn.Sequential(
            nn.Conv2d(cout, cout, 3, padding=5, dilation=5),
            nn.BatchNorm2d(cout),
        )
        self.shortcut = None
        if cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1), nn.BatchNorm2d(cout))
        self.down = _conv_bn_relu(cout, cout, stride=2)

    def forward(self, x):
        y = self.a3(self.a2(self.a1(x)))
        s = x if self.shortcut is None else self.shortcut(x)
        return self.down(F.relu(y + s))


def attention_fusion(f_d: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
    """Residual channel gating: f_s * (1 + softmax of f_d over channels),
    softmax taken independently at every spatial site."""
    if f_d.shape != f_s.shape:
        raise ValueError(
            f"attention inputs must align, got {tuple(f_d.shape)} vs "
            f"{tuple(f_s.shape)}")
    return f_s * (1.0 + torch.softmax(f_d, dim=1))


class AttentionBlock(nn.Module):
    """Fusion, then the block's stride-1 convolution, then bilinear resize
    to the next stage's spatial size. The block producing class logits is
    an output head and skips BN/ReLU."""

    def __init__(self, cin: int, cout: int, head: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.post = None if head else nn.Sequential(
            nn.BatchNorm2d(cout), nn.ReLU(inplace=True))

    def forward(self, f_d, f_s, out_hw):
        y = self.conv(attention_fusion(f_d, f_s))
        if self.post is not None:
            y = self.post(y)
        return F.interpolate(y, size=out_hw, mode="bilinear",
                             align_corners=False)


def _resize(x, hw):
    return F.interpolate(x, size=hw, mode="bilinear", align_corners=False)


class ReconstructionDecoder(nn.Module):
    """Three bilinear upsampling stages; each resize is followed by a 1x1
    convolution that adjusts the channel count. Sigmoid head lands in [0,1]
    to match normalized inputs."""

    def __init__(self, base: int, final_activation: bool = True):
        super().__init__()
        chs = stage_channels(base)
        self.c1 = nn.Sequential(nn.Conv2d(chs[4], chs[3], 1),
                                nn.BatchNorm2d(chs[3]), nn.ReLU(inplace=True))
        self.c2 = nn.Sequential(nn.Conv2d(chs[3], chs[2], 1),
                                nn.BatchNorm2d(chs[2]), nn.ReLU(inplace=True))
        self.head = nn.Conv2d(chs[2], 3, 1)
        self.final_activation = final_activation

    def forward(self, z, hw):
        h, w = hw
        f_d1 = self.c1(_resize(z, (h // 16, w // 16)))
        f_d2 = self.c2(_resize(f_d1, (h // 8, w // 8)))
        x = self.head(_resize(f_d2, hw))
        if self.final_activation:
            x = torch.sigmoid(x)
        return x, f_d1, f_d2


class SegmentationDecoder(nn.Module):
    def __init__(self, base: int):
        super().__init__()
        chs = stage_channels(base)
        self.att1 = AttentionBlock(chs[4], chs[2])
        self.merge = nn.Sequential(nn.Conv2d(2 * chs[2], chs[2], 1),
                                   nn.BatchNorm2d(chs[2]), nn.ReLU(inplace=True))
        self.att2 = AttentionBlock(chs[2], N_CLASSES, head=True)

    def forward(self, z, f_d1, f_d2, skip3, hw):
        h, w = hw
        u = _resize(z, (h // 16, w // 16))
        u = self.att1(f_d1, u, (h // 8, w // 8))
        u = self.merge(torch.cat([u, skip3], dim=1))
        logits = self.att2(f_d2, u, hw)
        return torch.softmax(logits, dim=1)


class SegmentationNet(nn.Module):
    """Full model: encoder, reconstruction decoder, segmentation decoder."""

    def __init__(self, in_hw=REFERENCE_HW, base: int = REFERENCE_BASE):
        super().__init__()
        h, w = in_hw
        if h % 32 or w % 32:
            raise ValueError(f"input size {in_hw} must be divisible by 32")
        self.in_hw = (h, w)
        self.base = base
        chs = stage_channels(base)
        self.blocks = nn.ModuleList(
            [ResBlock(cin, cout) for cin, cout in zip((3,) + chs[:-1], chs)])
        self.recon = ReconstructionDecoder(base)
        self.seg = SegmentationDecoder(base)
        self.apply(_init_weights)

    @property
    def latent_hw(self) -> tuple:
        return (self.in_hw[0] // 32, self.in_hw[1] // 32)

    def expected_stage_shapes(self) -> list:
        h, w = self.in_hw
        return [(h >> (k + 1), w >> (k + 1), c)
                for k, c in enumerate(stage_channels(self.base))]

    def encode(self, x):
        if x.shape[1:] != (3, *self.in_hw):
            raise ValueError(
                f"expected Bx3x{self.in_hw[0]}x{self.in_hw[1]} input, "
                f"got {tuple(x.shape)}")
        skips = []
        y = x
        for block in self.blocks:
            y = block(y)
            skips.append(y)
        if __debug__:
            for s, (eh, ew, ec) in zip(skips, self.expected_stage_shapes()):
                assert s.shape[1:] == (ec, eh, ew), \
                    f"stage shape {tuple(s.shape[1:])} != {(ec, eh, ew)}"
        return skips[-1], skips

    def forward(self, x):
        z, skips = self.encode(x)
        recon, f_d1, f_d2 = self.recon(z, self.in_hw)
        seg = self.seg(z, f_d1, f_d2, skips[2], self.in_hw)
        if __debug__:
            h, w = self.in_hw
            assert seg.shape[1:] == (N_CLASSES, h, w)
            assert recon.shape[1:] == (3, h, w)
        return {"seg": seg, "recon": recon, "latent": z, "skips": skips}


def _init_weights(module):
    # fan-in variance scaling for conv weights, the standard ReLU recipe
    if isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, mode="fan_in",
                                nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_network(in_hw=REFERENCE_HW, base: int = REFERENCE_BASE,
                  seed: int = 0) -> SegmentationNet:
    torch.manual_seed(seed)
    return SegmentationNet(in_hw, base)


# ---------------------------------------------------------------------------
# inference wrappers on core types


@dataclass(frozen=True)
class ForwardOutput:
    segmentation: SegmentationOutput
    reconstruction: np.ndarray
    latent: LatentCode
    skip_features: tuple


def bscan_to_input(b: BScan) -> torch.Tensor:
    """1x3xHxW network input: the gray channel replicated three times."""
    if not b.is_normalized():
        raise ValueError("B-scan must be normalized to [0,1] first")
    t = torch.from_numpy(np.ascontiguousarray(b.pixels, dtype=np.float32))
    return t.unsqueeze(0).unsqueeze(0).expand(1, 3, *b.shape).contiguous()


def infer_bscan(net: SegmentationNet, b: BScan) -> ForwardOutput:
    net.eval()
    with torch.no_grad():
        out = net(bscan_to_input(b))
    seg = out["seg"][0].permute(1, 2, 0).numpy().astype(np.float64)
    recon = out["recon"][0].permute(1, 2, 0).numpy().astype(np.float64)
    latent = out["latent"][0].permute(1, 2, 0).numpy().astype(np.float64)
    skips = tuple(s[0].permute(1, 2, 0).numpy() for s in out["skips"])
    return ForwardOutput(
        segmentation=SegmentationOutput(seg),
        reconstruction=recon,
        latent=LatentCode(latent, latent.mean(axis=(0, 1))),
        skip_features=skips,
    )


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"OCTFPNET"
_VERSION = 1


def save_checkpoint(net: SegmentationNet, path: Path, meta: dict | None = None):
    """Versioned binary container: magic, version, sorted JSON header naming
    every array (dtype, shape, offset), then the raw little-endian data.
    Byte-identical for identical parameters."""
    state = net.state_dict()
    arrays = {}
    blobs = []
    offset = 0
    for name in sorted(state):
        a = state[name].detach().cpu().numpy()
        if not a.flags["C_CONTIGUOUS"]:
            a = np.ascontiguousarray(a)
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        arrays[name] = {"dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset}
        blob = a.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {
        "arrays": arrays,
        "meta": dict(meta or {}),
        "net": {"in_hw": list(net.in_hw), "base": net.base},
        "total_bytes": offset,
    }
    payload = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path: Path) -> tuple[SegmentationNet, dict]:
    """Rebuild the network from a checkpoint, validating every array shape
    against the freshly constructed model."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a network checkpoint")
        version, header_len = struct.unpack("<IQ", f.read(12))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len))
        data = f.read()
    if len(data) != header["total_bytes"]:
        raise ValueError(f"{path}: truncated checkpoint payload")
    net = SegmentationNet(tuple(header["net"]["in_hw"]), header["net"]["base"])
    state = net.state_dict()
    if sorted(state) != sorted(header["arrays"]):
        raise ValueError(f"{path}: parameter names do not match this model")
    new_state = {}
    for name, info in header["arrays"].items():
        want = tuple(state[name].shape)
        got = tuple(info["shape"])
        if want != got:
            raise ValueError(f"{path}: {name} has shape {got}, expected {want}")
        a = np.frombuffer(data, dtype=np.dtype(info["dtype"]),
                          count=int(np.prod(got, dtype=np.int64)),
                          offset=info["offset"]).reshape(got)
        new_state[name] = torch.from_numpy(a.copy())
    net.load_state_dict(new_state)
    net.eval()
    return net, header["meta"]
