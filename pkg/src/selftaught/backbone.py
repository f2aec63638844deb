"""Convolutional encoder, parameter snapshots and checkpoint archives."""
from __future__ import annotations

import io
import json
import zipfile
from collections import OrderedDict
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ParamState = dict[str, torch.Tensor]  # ordered name -> tensor snapshot

CHECKPOINT_FORMAT = "selftaught-ckpt-v1"


def conv_block(in_channels: int, out_channels: int, norm: str = "instance") -> nn.Sequential:
    # Both norms are per sample, so a block never depends on batch composition,
    # which matters for the tiny batches seen during inner adaptation.
    # "instance" normalises each channel over space; "layer" normalises over
    # channels and space jointly, so the per-position channel mean keeps its
    # spatial contrast (the activation map is read from it).
    if norm == "instance":
        layer = nn.InstanceNorm2d(out_channels, affine=True, track_running_stats=False)
    elif norm == "layer":
        layer = nn.GroupNorm(1, out_channels)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, padding=1), layer, nn.ReLU(), nn.MaxPool2d(2))


class ConvEncoder(nn.Module):
    """Four 3x3 conv blocks, each halving the spatial size.

    Hidden blocks use instance norm; the last block, whose output is the
    feature map, uses layer norm.

    ``feature_map`` keeps the spatial layout (needed for CAM); ``forward``
    returns the globally average-pooled embedding.
    """

    def __init__(self, in_channels: int = 3, width: int = 64, depth: int = 4):
        super().__init__()
        chans = [in_channels] + [width] * depth
        norms = ["instance"] * (depth - 1) + ["layer"]
        self.blocks = nn.Sequential(*[conv_block(a, b, n) for a, b, n in zip(chans[:-1], chans[1:], norms)])
        self.out_dim = width

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return pool(self.feature_map(x))


def pool(fmap: torch.Tensor) -> torch.Tensor:
    """Global average pooling over the trailing two (spatial) axes."""
    return fmap.mean(dim=(-2, -1))


def map_shape(image_size: int, width: int = 64, depth: int = 4) -> tuple[int, int, int]:
    side = image_size
    for _ in range(depth):
        side //= 2
    return width, side, side


def init_params(module: nn.Module, seed: int) -> None:
    """Fan-in scaled (Kaiming-uniform) init from a private generator; biases zeroed."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = float(np.sqrt(6.0 / fan_in))
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d, nn.GroupNorm)) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def encode_map(model: nn.Module, images: np.ndarray | torch.Tensor, image_size: int | None = None) -> torch.Tensor:
    """Feature maps for an N x 3 x H x W batch (or a single H x W x 3 image)."""
    x = torch.as_tensor(images)
    if x.ndim == 3 and x.shape[-1] == 3:
        x = x.permute(2, 0, 1)[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
    if image_size is not None and (x.shape[2] != image_size or x.shape[3] != image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {x.shape[2]}x{x.shape[3]}")
    x = x.to(next(model.parameters()).dtype)
    enc = model.encoder if hasattr(model, "encoder") else model
    return enc.feature_map(x)


def clone_params(model_or_params) -> ParamState:
    src = model_or_params.state_dict() if isinstance(model_or_params, nn.Module) else model_or_params
    return OrderedDict((k, v.detach().clone()) for k, v in src.items())


def load_params(model: nn.Module, params) -> None:
    """Overwrite every named parameter in place; mismatches raise ``KeyError``/``ValueError``."""
    own = model.state_dict()
    missing = [k for k in own if k not in params]
    if missing:
        raise KeyError(f"parameter state is missing {missing[0]!r}")
    extra = [k for k in params if k not in own]
    if extra:
        raise KeyError(f"unexpected parameter {extra[0]!r}")
    for k, v in own.items():
        if tuple(params[k].shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {k!r}: {tuple(params[k].shape)} vs {tuple(v.shape)}")
    with torch.no_grad():
        for k, v in own.items():
            v.copy_(params[k])


def params_equal(a, b) -> bool:
    return list(a) == list(b) and all(torch.equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------------------
# checkpoints: zip archive = manifest.json + tensors.npz


def save_checkpoint(path: str | Path, params, architecture: dict, extra: dict[str, Any] | None = None,
                    optimizer_state: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in params.items()}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "architecture": architecture,
        "params": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)} for k, v in params.items()],
        **(extra or {}),
    }
    if optimizer_state is not None:
        slots = {}
        for idx, st in optimizer_state["state"].items():
            for key, val in st.items():
                arrays[f"optim/{idx}/{key}"] = torch.as_tensor(val).cpu().numpy()
            slots[str(idx)] = sorted(st)
        manifest["optimizer"] = {"param_groups": optimizer_state["param_groups"], "slots": slots}
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        zf.writestr("tensors.npz", buf.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> tuple[ParamState, dict, dict | None]:
    """Returns ``(params, manifest, optimizer_state_or_None)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        data = np.load(io.BytesIO(zf.read("tensors.npz")))
        arrays = {k: data[k] for k in data.files}
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unrecognised checkpoint format {manifest.get('format')!r}")
    params = OrderedDict((p["name"], torch.from_numpy(arrays[f"param/{p['name']}"].copy()))
                         for p in manifest["params"])
    opt = None
    if "optimizer" in manifest:
        state = {}
        for idx, keys in manifest["optimizer"]["slots"].items():
            state[int(idx)] = {k: torch.from_numpy(arrays[f"optim/{idx}/{k}"].copy()) for k in keys}
        opt = {"state": state, "param_groups": manifest["optimizer"]["param_groups"]}
    return params, manifest, opt


def upsample(values: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear (half-pixel centres) resize of an h x w map to size x size."""
    return F.interpolate(values[None, None], size=(size, size), mode="bilinear", align_corners=False)[0, 0]
