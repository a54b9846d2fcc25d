"""Clustered synthetic identities standing in for a real re-ID dataset."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import SampleRecord, write_feature_file, write_manifest


@dataclass(frozen=True)
class SyntheticSpec:
    """Per identity a Gaussian center; per sample center + noise + camera shift.

    Centers are drawn from a Gaussian supported on a random ``latent_dim``
    subspace (full space when None), scaled so ``E||center||^2 = dim``;
    noise is isotropic with per-coordinate std ``sigma_intra``. A shared
    signal subspace is what lets training transfer to unseen identities.
    Identities are split in half: the first half trains, the second half is
    held out and split into one query per (identity, camera) plus gallery.
    """

    num_identities: int = 20
    samples_per_identity: int = 20
    num_cameras: int = 4
    sigma_intra: float = 0.5
    sigma_cam: float = 2.0
    dim: int = 256
    seed: int = 0
    latent_dim: int | None = 16
    train_identities: int | None = None

    def __post_init__(self):
        if self.num_identities < 2:
            raise ValueError("need at least two identities")
        if self.samples_per_identity < 1 or self.num_cameras < 1 or self.dim < 1:
            raise ValueError("samples_per_identity, num_cameras and dim must be positive")
        if self.latent_dim is not None and not 1 <= self.latent_dim <= self.dim:
            raise ValueError(f"latent_dim must lie in [1, {self.dim}]")
        if self.sigma_intra < 0 or self.sigma_cam < 0:
            raise ValueError("spreads must be non-negative")
        n_train = self.n_train
        if not 1 <= n_train < self.num_identities:
            raise ValueError(f"train_identities must lie in [1, {self.num_identities - 1}]")

    @property
    def n_train(self):
        return self.num_identities // 2 if self.train_identities is None else self.train_identities


def generate(spec):
    """In-memory dataset: ``(features [n, dim], records)`` in record order."""
    rng = np.random.default_rng(spec.seed)
    if spec.latent_dim is None:
        centers = rng.normal(size=(spec.num_identities, spec.dim))
    else:
        basis, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.latent_dim)))
        z = rng.normal(size=(spec.num_identities, spec.latent_dim))
        centers = np.sqrt(spec.dim / spec.latent_dim) * z @ basis.T
    cam_dirs = rng.normal(size=(spec.num_cameras, spec.dim))
    cam_dirs /= np.linalg.norm(cam_dirs, axis=1, keepdims=True)
    cam_offsets = spec.sigma_cam * cam_dirs

    feats, records = [], []
    width = len(str(spec.num_identities * spec.samples_per_identity))
    for ident in range(spec.num_identities):
        n = spec.samples_per_identity
        cams = rng.permutation(np.arange(n) % spec.num_cameras)
        noise = rng.normal(scale=spec.sigma_intra, size=(n, spec.dim)) if spec.sigma_intra else np.zeros((n, spec.dim))
        x = centers[ident] + noise + cam_offsets[cams]
        seen_cams = set()
        for j in range(n):
            cam = int(cams[j])
            if ident < spec.n_train:
                split = "train"
            elif cam not in seen_cams:
                split = "query"
                seen_cams.add(cam)
            else:
                split = "gallery"
            sid = f"s{len(records):0{width}d}"
            records.append(SampleRecord(sid, f"id{ident:03d}", f"c{cam}", split, f"features/{sid}.pamf"))
            feats.append(x[j])
    return np.array(feats), records


def synth_generate(spec, out_dir):
    """Write ``manifest.csv``, one feature file per sample and ``spec.json``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    feats, records = generate(spec)
    for rec, vec in zip(records, feats):
        write_feature_file(out / rec.source, vec)
    write_manifest(out / "manifest.csv", records)
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return out / "manifest.csv"
