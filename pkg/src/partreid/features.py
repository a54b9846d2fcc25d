"""Feature-map sources: a small trainable backbone or precomputed maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class FeatureMap:
    """Batched ``[batch, H, W, C]`` activation tensor."""

    data: ad.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ad.ShapeError(f"FeatureMap expects [batch,H,W,C], got {self.data.shape}")

    @property
    def batch(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def channels(self):
        return self.data.shape[3]


class ToyBackbone:
    """Convolution-free stand-in for a CNN trunk.

    input ``[B, D]`` -> linear to ``H*W*k`` per-location tokens -> relu ->
    per-location linear ``k -> C`` -> relu -> ``[B, H, W, C]``.
    """

    param_names = ("backbone.patch_w", "backbone.patch_b", "backbone.mix_w", "backbone.mix_b")

    def __init__(self, input_dim, height, width, channels, tokens=8):
        self.input_dim = input_dim
        self.height = height
        self.width = width
        self.channels = channels
        self.tokens = tokens

    def init_params(self, rng, zero_final=False):
        d, hw, k, c = self.input_dim, self.height * self.width, self.tokens, self.channels
        params = {
            "backbone.patch_w": rng.normal(0.0, np.sqrt(2.0 / d), size=(d, hw * k)),
            "backbone.patch_b": np.zeros(hw * k),
            "backbone.mix_w": rng.normal(0.0, np.sqrt(2.0 / k), size=(k, c)),
            "backbone.mix_b": np.zeros(c),
        }
        if zero_final:
            params["backbone.mix_w"][:] = 0.0
        return params

    def num_params(self):
        d, hw, k, c = self.input_dim, self.height * self.width, self.tokens, self.channels
        return d * hw * k + hw * k + k * c + c

    def __call__(self, params, x):
        z = ad.relu(ad.add(ad.matmul(x, params["backbone.patch_w"]), params["backbone.patch_b"]))
        z = ad.reshape(z, (x.shape[0], self.height, self.width, self.tokens))
        z = ad.relu(ad.add(ad.matmul(z, params["backbone.mix_w"]), params["backbone.mix_b"]))
        return FeatureMap(z)


def extract(inputs, *, source, height, width, channels, backbone=None, params=None):
    """Turn a batch of raw inputs into a :class:`FeatureMap`.

    ``source="toy"`` runs ``backbone`` on ``[B, D]`` vectors;
    ``source="precomputed"`` takes ``[B, H, W, C]`` maps as-is.
    """
    x = ad.as_tensor(inputs)
    if source == "toy":
        if x.ndim != 2 or x.shape[1] != backbone.input_dim:
            raise ad.ShapeError(
                f"extract: toy backbone expects [batch, {backbone.input_dim}], got {x.shape}"
            )
        return backbone(params, x)
    if source == "precomputed":
        if x.ndim != 4 or x.shape[1:] != (height, width, channels):
            raise ad.ShapeError(
                f"extract: expected maps [batch, {height}, {width}, {channels}], got {x.shape}"
            )
        return FeatureMap(x)
    raise ValueError(f"unknown feature source {source!r}")


def duplicate_branches(fm):
    """Return the map itself and its H/W-swapped twin."""
    return fm, FeatureMap(ad.transpose(fm.data, (0, 2, 1, 3)))
