"""Inference orchestration: bundle encoder + modulation net as a Model,
apply the full correction map, and persist/load it as a checkpoint.

The reference image influences the output only through its descriptor;
no reference content enters the spatial path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .imageio import Image
from .encoder import ExposureEncoder
from .modnet import ModNet, delta_z
from .checkpoint import write_checkpoint, read_checkpoint, CheckpointError


@dataclass
class Model:
    encoder: ExposureEncoder
    net: ModNet
    meta: dict = field(default_factory=dict)


def init_model(seed: int = 0, meta: dict | None = None) -> Model:
    rng = np.random.default_rng(seed)
    return Model(ExposureEncoder.init(rng), ModNet.init(rng), dict(meta or {}))


def correct_arrays(model: Model, i_s: np.ndarray, i_r: np.ndarray) -> np.ndarray:
    """(3,H,W) source + reference arrays -> corrected (3,H,W) array."""
    if i_s.ndim != 3 or i_r.ndim != 3:
        raise T.ShapeError("correct expects (3,H,W) arrays")
    with T.no_grad():
        z_s = model.encoder.encode_batch(i_s[None])
        z_r = model.encoder.encode_batch(i_r[None])
        dz = delta_z(z_s, z_r)
        _, i_hat = model.net.forward_batch(i_s[None].astype(np.float32), dz)
    return i_hat.data[0]


def correct(model: Model, i_s: Image, i_r: Image) -> Image:
    """Transfer the reference's exposure onto the source image."""
    return Image(correct_arrays(model, i_s.pixels, i_r.pixels))


def save_model(path, model: Model):
    rec = {}
    for p in model.encoder.params:
        rec[f"caee.{p.name}"] = p.data
    for p in model.net.params:
        rec[f"modnet.{p.name}"] = p.data
    for key, val in model.meta.items():
        rec[f"meta.{key}"] = np.float32(val)
    write_checkpoint(path, rec)


def load_model(path) -> Model:
    """Rebuild a Model from any checkpoint carrying caee./modnet. sections
    (plain model files and full training checkpoints both qualify)."""
    rec = read_checkpoint(path)
    model = init_model(seed=0)
    caee = {n[len("caee."):]: a for n, a in rec.items() if n.startswith("caee.")}
    modnet = {n[len("modnet."):]: a for n, a in rec.items()
              if n.startswith("modnet.")}
    known = set(model.encoder.params.names())
    if set(caee) - known:
        raise CheckpointError(f"unknown encoder records {sorted(set(caee) - known)}")
    if set(modnet) - set(model.net.params.names()):
        raise CheckpointError("unknown modulation net records")
    try:
        model.encoder.params.load_arrays(caee)
        model.net.params.load_arrays(modnet)
    except (KeyError, T.ShapeError) as e:
        raise CheckpointError(f"incompatible checkpoint: {e}") from e
    model.meta = {n[len("meta."):]: float(a) for n, a in rec.items()
                  if n.startswith("meta.")}
    return model
