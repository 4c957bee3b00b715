"""Feature-extraction backends.

Two families live here:

* a dense grid extractor feeding the coarse matcher.  Foundation-model
  features arrive precomputed through tensor files; the built-in
  :class:`HandcraftedDenseExtractor` is a deterministic, asset-free
  compliance backend (contrast-normalised gradient statistics per cell),
  not a substitute for learned semantics.
* fine-stage extractors producing :class:`~aeroloc.fine.FineFeatures`:
  a classical Harris/DCT fallback and a forward-only convolutional backend
  that loads persisted weights.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from aeroloc.errors import BackendUnavailableError, ContractViolationError, DataFormatError
from aeroloc.features import DenseFeatureMap
from aeroloc.fine import FineFeatures

_FINE_STRIDE = 32  # fine backends pad inputs to a multiple of this


# ---------------------------------------------------------------------------
# Dense grid features for the coarse stage


class HandcraftedDenseExtractor:
    """Deterministic dense features: per-cell gradient and band-pass statistics.

    Each cell of the stride grid carries soft-binned gradient-orientation
    histograms at cell and 3x3-neighbourhood scale, multi-scale band-pass
    energies and standardised intensity statistics.  Gradients and
    difference-of-Gaussian bands are invariant to brightness shifts; the
    per-image normalisations make them robust to contrast scaling.  All
    channels are non-negative.
    """

    BAND_SIGMAS = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)

    def __init__(self, stride: int = 32, n_orientations: int = 8, smooth_sigma: float = 1.0):
        self.stride = stride
        self.n_orientations = n_orientations
        self.smooth_sigma = smooth_sigma

    @property
    def channels(self) -> int:
        return 2 * self.n_orientations + len(self.BAND_SIGMAS) - 1 + 3

    def extract(self, image: np.ndarray) -> DenseFeatureMap:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 2:
            raise ContractViolationError("dense extractor expects a grayscale image")
        h_px, w_px = img.shape
        r = self.stride
        h, w = h_px // r, w_px // r
        if h < 1 or w < 1:
            raise ContractViolationError(f"image {img.shape} smaller than one {r}px cell")

        smoothed = ndimage.gaussian_filter(img, self.smooth_sigma, mode="reflect")
        gy, gx = np.gradient(smoothed)
        mag = np.hypot(gx, gy)
        ang = np.arctan2(gy, gx)  # [-pi, pi)

        nb = self.n_orientations
        crop_mag = mag[: h * r, : w * r]
        crop_ang = ang[: h * r, : w * r]
        pos = (crop_ang + np.pi) / (2 * np.pi) * nb  # [0, nb]
        b0 = np.floor(pos).astype(int) % nb
        frac = pos - np.floor(pos)
        b1 = (b0 + 1) % nb

        cell_i = np.repeat(np.arange(h), r)[:, None]
        cell_j = np.repeat(np.arange(w), r)[None, :]
        flat_cell = (cell_i * w + cell_j).ravel()
        hist = np.zeros((h * w, nb))
        np.add.at(hist, (flat_cell, b0.ravel()), (crop_mag * (1 - frac)).ravel())
        np.add.at(hist, (flat_cell, b1.ravel()), (crop_mag * frac).ravel())
        hist = hist.reshape(h, w, nb)

        context = ndimage.uniform_filter(hist, size=(3, 3, 1), mode="constant") * 9.0

        mean_norm = np.linalg.norm(hist, axis=2).mean()
        floor = 0.2 * mean_norm + 1e-12
        hist_n = hist / np.maximum(np.linalg.norm(hist, axis=2, keepdims=True), floor)
        ctx_floor = 0.2 * np.linalg.norm(context, axis=2).mean() + 1e-12
        context_n = context / np.maximum(np.linalg.norm(context, axis=2, keepdims=True), ctx_floor)

        bands = []
        pyramid = [ndimage.gaussian_filter(img, s, mode="reflect") for s in self.BAND_SIGMAS]
        for lo, hi in zip(pyramid[:-1], pyramid[1:]):
            mag_band = np.abs(lo - hi)[: h * r, : w * r].reshape(h, r, w, r).mean(axis=(1, 3))
            bands.append(0.5 * mag_band / (mag_band.mean() + 1e-9))
        band_stack = np.stack(bands, axis=2)

        cells = img[: h * r, : w * r].reshape(h, r, w, r)
        cell_mean = cells.mean(axis=(1, 3))
        cell_std = cells.std(axis=(1, 3))
        g_mean = float(img.mean())
        g_std = float(img.std()) + 1e-9
        z = (cell_mean - g_mean) / g_std
        intensity = np.stack(
            [
                0.5 * np.maximum(z, 0.0),
                0.5 * np.maximum(-z, 0.0),
                0.5 * np.minimum(cell_std / g_std, 3.0),
            ],
            axis=2,
        )

        data = np.concatenate([hist_n, context_n, band_stack, intensity], axis=2)
        return DenseFeatureMap(data, stride=r, source_width=w_px, source_height=h_px)


# ---------------------------------------------------------------------------
# Fine-stage backends


def _pad_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    h, w = img.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw)), mode="reflect")


class HarrisFineBackend:
    """Classical fallback: Harris corners, one-hot bin logits, DCT descriptors.

    A compliance backend so the pipeline runs with zero learned assets; it
    fills the same contract as the convolutional backend.
    """

    def __init__(self, smooth_sigma: float = 1.0, window_sigma: float = 1.5, k: float = 0.05):
        self.smooth_sigma = smooth_sigma
        self.window_sigma = window_sigma
        self.k = k

    def extract(self, image: np.ndarray) -> FineFeatures:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 2:
            raise ContractViolationError("fine backend expects a grayscale image")
        src_h, src_w = img.shape
        img = _pad_to_multiple(img, _FINE_STRIDE)
        h, w = img.shape
        hc, wc = h // 8, w // 8

        smoothed = ndimage.gaussian_filter(img, self.smooth_sigma, mode="reflect")
        gy, gx = np.gradient(smoothed)
        ixx = ndimage.gaussian_filter(gx * gx, self.window_sigma, mode="reflect")
        iyy = ndimage.gaussian_filter(gy * gy, self.window_sigma, mode="reflect")
        ixy = ndimage.gaussian_filter(gx * gy, self.window_sigma, mode="reflect")
        response = ixx * iyy - ixy**2 - self.k * (ixx + iyy) ** 2
        response = np.maximum(response, 0.0)
        peak = response.max()
        if peak > 0:
            # compressive normalisation keeps mid-strength corners usable
            response = (response / peak) ** 0.25

        cells = response.reshape(hc, 8, wc, 8).transpose(0, 2, 1, 3).reshape(hc, wc, 64)
        reliability = cells.max(axis=2)
        best_bin = cells.argmax(axis=2)
        logits = np.zeros((hc, wc, 65))
        has_corner = cells.max(axis=2) > 0
        amp = 10.0
        logits[..., 64] = np.where(has_corner, 0.0, amp)
        rows, cols = np.nonzero(has_corner)
        logits[rows, cols, best_bin[rows, cols]] = amp

        descriptors = self._dct_descriptors(smoothed, hc, wc)
        return FineFeatures(descriptors, reliability, logits, width=src_w, height=src_h)

    def _dct_descriptors(self, img: np.ndarray, hc: int, wc: int) -> np.ndarray:
        """Per-node descriptors: windowed 16x16 patch -> low-frequency DCT block."""
        half = 8
        padded = np.pad(img, half, mode="reflect")
        yy, xx = np.meshgrid(np.arange(16) - 7.5, np.arange(16) - 7.5, indexing="ij")
        window = np.exp(-(yy**2 + xx**2) / (2 * 6.0**2))
        out = np.zeros((hc, wc, 64))
        for i in range(hc):
            y = i * 8 + half
            for j in range(wc):
                x = j * 8 + half
                patch = padded[y - half : y + half, x - half : x + half]
                patch = patch - patch.mean()
                norm = np.linalg.norm(patch)
                if norm < 1e-12:
                    continue
                coeffs = sfft.dctn(patch / norm * window, norm="ortho")
                out[i, j] = coeffs[:8, :8].ravel()
        return out


# ---------------------------------------------------------------------------
# Forward-only convolutional fine backend

# name, kernel, stride, (c_in, c_out), activation
_NEURAL_PLAN = [
    ("stem1", 3, 2, (1, 24), "relu"),
    ("stem2", 3, 2, (24, 24), "relu"),
    ("stem3", 3, 2, (24, 64), "relu"),
    ("down16", 3, 2, (64, 64), "relu"),
    ("down32", 3, 2, (64, 128), "relu"),
    ("proj32", 1, 1, (128, 64), "linear"),
    ("fuse", 3, 1, (64, 64), "linear"),
    ("rel", 1, 1, (64, 1), "sigmoid"),
    ("kp1", 1, 1, (64, 64), "relu"),
    ("kp2", 1, 1, (64, 64), "relu"),
    ("kp3", 1, 1, (64, 64), "relu"),
    ("kp4", 1, 1, (64, 65), "linear"),
]


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """Plain strided cross-correlation; 3x3 kernels use zero padding of 1."""
    c_out, c_in, kh, kw = w.shape
    pad = kh // 2
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    y = np.einsum("oikl,ihwkl->ohw", w, windows, optimize=True)
    return y + b[:, None, None]


def _upsample_bilinear(x: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling with half-pixel-centre alignment."""
    c, h, w = x.shape
    out_h, out_w = h * factor, w * factor
    ys = np.clip((np.arange(out_h) + 0.5) / factor - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) / factor - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = x[:, y0][:, :, x0] * (1 - wx) + x[:, y0][:, :, x1] * wx
    bot = x[:, y1][:, :, x0] * (1 - wx) + x[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _patchify(img: np.ndarray) -> np.ndarray:
    """Reshape an image into per-cell 64-vectors of its 8x8 pixel patches."""
    h, w = img.shape
    return img.reshape(h // 8, 8, w // 8, 8).transpose(1, 3, 0, 2).reshape(64, h // 8, w // 8)


class NeuralFineBackend:
    """Forward-only convolutional extractor from persisted weights.

    Multi-level features at strides 8/16/32 are bilinearly upsampled, summed
    at stride 8 and fused into a 64-channel descriptor map; the keypoint
    head applies four 1x1 convolutions to the 8x8-patch-reshaped input.
    """

    def __init__(self, weights_dir: str | Path):
        src = Path(weights_dir)
        manifest = src / "manifest.json"
        if not manifest.exists():
            raise BackendUnavailableError(
                f"fine-backend weights not found at {src} (missing manifest.json); "
                "generate reference weights with write_reference_fine_weights() "
                "or point --fine-weights at a weights directory"
            )
        from aeroloc import store

        index = json.loads(manifest.read_text())
        self.params: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for name, kernel, stride, (c_in, c_out), _act in _NEURAL_PLAN:
            entry = index.get("layers", {}).get(name)
            if entry is None:
                raise DataFormatError(f"{manifest}: missing layer {name!r}")
            w, _ = store.read_tensor(src / entry["weights"])
            b, _ = store.read_tensor(src / entry["bias"])
            if w.shape != (c_out, c_in, kernel, kernel):
                raise DataFormatError(
                    f"{src}: layer {name} has shape {w.shape}, expected "
                    f"{(c_out, c_in, kernel, kernel)}"
                )
            self.params[name] = (w.astype(np.float64), b.astype(np.float64))

    def _layer(self, name: str, x: np.ndarray) -> np.ndarray:
        plan = {p[0]: p for p in _NEURAL_PLAN}[name]
        _, _, stride, _, act = plan
        w, b = self.params[name]
        y = _conv2d(x, w, b, stride)
        if act == "relu":
            return np.maximum(y, 0.0)
        if act == "sigmoid":
            return 1.0 / (1.0 + np.exp(-y))
        return y

    def extract(self, image: np.ndarray) -> FineFeatures:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 2:
            raise ContractViolationError("fine backend expects a grayscale image")
        src_h, src_w = img.shape
        img = _pad_to_multiple(img, _FINE_STRIDE)

        x = img[None]
        f4 = self._layer("stem2", self._layer("stem1", x))
        f8 = self._layer("stem3", f4)
        f16 = self._layer("down16", f8)
        f32 = self._layer("proj32", self._layer("down32", f16))
        fused = f8 + _upsample_bilinear(f16, 2) + _upsample_bilinear(f32, 4)
        descriptors = self._layer("fuse", fused)
        reliability = self._layer("rel", descriptors)[0]
        kp = self._layer("kp4", self._layer("kp3", self._layer("kp2", self._layer("kp1", _patchify(img)))))
        return FineFeatures(
            descriptor_map=np.moveaxis(descriptors, 0, 2),
            reliability_map=reliability,
            keypoint_logits=np.moveaxis(kp, 0, 2),
            width=src_w,
            height=src_h,
        )


def write_reference_fine_weights(out_dir: str | Path, seed: int = 0) -> None:
    """Write a randomly initialised (untrained) weight set for the conv backend.

    Useful for exercising the weight format and the forward pass without any
    trained assets; He-uniform weights, zero biases, seeded.
    """
    from aeroloc import store

    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"format": "fine-backend", "layers": {}}
    for name, kernel, _stride, (c_in, c_out), _act in _NEURAL_PLAN:
        fan_in = c_in * kernel * kernel
        a = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-a, a, size=(c_out, c_in, kernel, kernel)).astype(np.float32)
        b = np.zeros(c_out, dtype=np.float32)
        wname, bname = f"{name}.weights.glft", f"{name}.bias.glft"
        store.write_tensor(out / wname, w, {"layer": name, "role": "weights"})
        store.write_tensor(out / bname, b, {"layer": name, "role": "bias"})
        index["layers"][name] = {"weights": wname, "bias": bname}
    (out / "manifest.json").write_text(json.dumps(index, indent=2) + "\n")


def make_fine_backend(kind: str, weights_dir: str | Path | None = None):
    if kind == "fallback":
        return HarrisFineBackend()
    if kind == "neural":
        if weights_dir is None:
            raise BackendUnavailableError("the conv fine backend needs a weights directory")
        return NeuralFineBackend(weights_dir)
    raise ContractViolationError(f"unknown fine backend {kind!r}")
