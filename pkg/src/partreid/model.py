"""Part-aware network: feature source, two branches, stripe pooling, heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .features import ToyBackbone, duplicate_branches, extract
from .parts import part_features


@dataclass(frozen=True)
class ModelConfig:
    source: str = "toy"  # "toy" or "precomputed"
    input_dim: int = 256
    height: int = 12
    width: int = 12
    channels: int = 64
    tokens: int = 8
    p1: int = 6
    p2: int = 6
    head_scale: float = 4.0

    def __post_init__(self):
        if self.source not in ("toy", "precomputed"):
            raise ValueError(f"unknown feature source {self.source!r}")
        if self.p1 < 1 or self.p2 < 0:
            raise ValueError(f"need p1 >= 1 and p2 >= 0, got p1={self.p1}, p2={self.p2}")
        if self.height < self.p1:
            raise ValueError(f"height {self.height} cannot hold {self.p1} horizontal stripes")
        if self.width < self.p2:
            raise ValueError(f"width {self.width} cannot hold {self.p2} vertical stripes")

    @property
    def num_parts(self):
        return self.p1 + self.p2

    @property
    def descriptor_dim(self):
        return self.num_parts * self.channels

    def to_dict(self):
        return asdict(self)


class PartAwareModel:
    """Stateless forward definition; parameters live in a plain dict."""

    def __init__(self, config):
        self.config = config
        self.backbone = None
        if config.source == "toy":
            self.backbone = ToyBackbone(
                config.input_dim, config.height, config.width, config.channels, config.tokens
            )

    @property
    def input_shape(self):
        c = self.config
        return (c.input_dim,) if c.source == "toy" else (c.height, c.width, c.channels)

    def init_params(self, rng, zero_final=False):
        c = self.config.channels
        params = self.backbone.init_params(rng, zero_final) if self.backbone else {}
        branches = ["horizontal"] + (["vertical"] if self.config.p2 else [])
        for name in branches:
            params[f"head.{name}.w"] = self.config.head_scale * (np.eye(c) + rng.normal(0.0, 0.01, size=(c, c)))
            params[f"head.{name}.b"] = np.zeros(c)
        return params

    def forward(self, params, x):
        """Return ``(h, f)``: pooled unit part vectors and head features.

        ``params`` maps names to tensors (or arrays when no gradient is
        needed); both outputs are ``[batch, b, C]`` tensors.
        """
        c = self.config
        params = {k: ad.as_tensor(v) for k, v in params.items()}
        fm = extract(
            x, source=c.source, height=c.height, width=c.width, channels=c.channels,
            backbone=self.backbone, params=params,
        )
        t, t_t = duplicate_branches(fm)
        h = part_features(t, t_t, c.p1, c.p2).parts

        heads = [self._head(params, "horizontal", ad.take(h, (slice(None), slice(0, c.p1))))]
        if c.p2:
            heads.append(self._head(params, "vertical", ad.take(h, (slice(None), slice(c.p1, None)))))
        f = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
        return h, f

    @staticmethod
    def _head(params, branch, h):
        z = ad.add(ad.matmul(h, params[f"head.{branch}.w"]), params[f"head.{branch}.b"])
        return ad.l2_normalize(z, axis=-1)

    def embed(self, params, x, batch_size=256):
        """Concatenated per-part unit head features, ``[n, b*C]``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ad.ShapeError(f"embed: inputs shaped {x.shape[1:]}, model expects {self.input_shape}")
        out = []
        for lo in range(0, len(x), batch_size):
            _, f = self.forward(params, x[lo : lo + batch_size])
            out.append(f.values.reshape(f.shape[0], -1))
        if not out:
            return np.zeros((0, self.config.descriptor_dim))
        return np.concatenate(out)
