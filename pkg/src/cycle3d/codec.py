"""Latent codecs standing between RGB frames and the denoiser.

``identity`` keeps pixel resolution and only rescales [0, 1] to [-1, 1].
``avgpool`` halves resolution with a 2x2 mean and decodes by nearest upsampling.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError

CODECS = ("identity", "avgpool")


class LatentCodec:
    def __init__(self, kind: str = "identity"):
        if kind not in CODECS:
            raise ConfigurationError(f"unknown codec {kind!r}; expected one of {CODECS}")
        self.kind = kind

    @property
    def factor(self) -> int:
        return 2 if self.kind == "avgpool" else 1

    def encode(self, rgb: np.ndarray) -> np.ndarray:
        """(H, W, 3) in [0, 1] -> (3, h, w) latent in [-1, 1]."""
        x = np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1)
        if self.kind == "avgpool":
            c, h, w = x.shape
            x = x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
        return 2.0 * x - 1.0

    def encode_mask(self, mask: np.ndarray) -> np.ndarray:
        """(H, W) 0/1 -> (1, h, w); a latent pixel is known only if all its pixels are."""
        m = np.asarray(mask, dtype=np.float64)
        if self.kind == "avgpool":
            h, w = m.shape
            m = m.reshape(h // 2, 2, w // 2, 2).min(axis=(1, 3))
        return m[None]

    def encode_depth(self, depth: np.ndarray) -> np.ndarray:
        """(H, W) depth, NaN in holes -> (1, h, w) with holes at 0."""
        d = np.nan_to_num(np.asarray(depth, dtype=np.float64))
        if self.kind == "avgpool":
            h, w = d.shape
            d = d.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        return d[None]

    def decode(self, z: np.ndarray) -> np.ndarray:
        """(3, h, w) latent -> (H, W, 3) clipped to [0, 1]."""
        x = (np.asarray(z, dtype=np.float64) + 1.0) / 2.0
        if self.kind == "avgpool":
            x = x.repeat(2, axis=1).repeat(2, axis=2)
        return np.clip(x, 0.0, 1.0).transpose(1, 2, 0)

    def to_dict(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        return f"LatentCodec({self.kind!r})"
