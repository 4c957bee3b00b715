#!/usr/bin/env python3
"""Regenerate golden outputs for the convolutional fine backend.

Builds the same network in torch from the persisted reference weights and
runs an independent forward pass; the saved outputs pin the numpy
implementation in tests/test_backends.py.  Run from the repo root:

    python3 scripts/make_fine_goldens.py
"""

import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from aeroloc.backends import _NEURAL_PLAN, write_reference_fine_weights
from aeroloc.store import read_tensor, write_tensor

OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "fine_golden"


def torch_forward(weights_dir: Path, img: np.ndarray):
    params = {}
    import json

    index = json.loads((weights_dir / "manifest.json").read_text())
    for name, kernel, stride, _chans, act in _NEURAL_PLAN:
        w, _ = read_tensor(weights_dir / index["layers"][name]["weights"])
        b, _ = read_tensor(weights_dir / index["layers"][name]["bias"])
        params[name] = (
            torch.from_numpy(w.astype(np.float64)),
            torch.from_numpy(b.astype(np.float64)),
            kernel,
            stride,
            act,
        )

    def layer(name, x):
        w, b, kernel, stride, act = params[name]
        y = F.conv2d(x, w, b, stride=stride, padding=kernel // 2)
        if act == "relu":
            return F.relu(y)
        if act == "sigmoid":
            return torch.sigmoid(y)
        return y

    x = torch.from_numpy(img.astype(np.float64))[None, None]
    f8 = layer("stem3", layer("stem2", layer("stem1", x)))
    f16 = layer("down16", f8)
    f32 = layer("proj32", layer("down32", f16))
    fused = (
        f8
        + F.interpolate(f16, scale_factor=2, mode="bilinear", align_corners=False)
        + F.interpolate(f32, scale_factor=4, mode="bilinear", align_corners=False)
    )
    desc = layer("fuse", fused)
    rel = layer("rel", desc)
    h, w = img.shape
    patches = (
        torch.from_numpy(img.astype(np.float64))
        .reshape(h // 8, 8, w // 8, 8)
        .permute(1, 3, 0, 2)
        .reshape(1, 64, h // 8, w // 8)
    )
    kp = layer("kp4", layer("kp3", layer("kp2", layer("kp1", patches))))
    return (
        desc[0].permute(1, 2, 0).numpy(),
        rel[0, 0].numpy(),
        kp[0].permute(1, 2, 0).numpy(),
    )


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        weights = Path(tmp) / "w"
        write_reference_fine_weights(weights, seed=0)
        rng = np.random.default_rng(1234)
        img = ndimage.gaussian_filter(rng.uniform(0, 1, size=(64, 64)), 1.5)
        desc, rel, logits = torch_forward(weights, img)
    write_tensor(OUT / "descriptors.glft", desc, {"source": "torch reference forward"})
    write_tensor(OUT / "reliability.glft", rel, {"source": "torch reference forward"})
    write_tensor(OUT / "logits.glft", logits, {"source": "torch reference forward"})
    print(f"wrote goldens to {OUT}")


if __name__ == "__main__":
    main()
