"""Training loop: synthetic exposure pairs or a directory with a fixed
reference, Adam with a constant-then-linear-decay schedule, per-epoch
checkpoints, and a CSV loss log.

An epoch is one shuffled pass over the pair list (short tails fold into
the next epoch's reshuffle); checkpoints land on epoch boundaries, so a
resumed run walks the same per-epoch permutations and reproduces an
uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from . import imageio
from .encoder import ExposureEncoder, DESCRIPTOR_DIM
from .modnet import ModNet, SCALE_CHANNELS, delta_z
from .photostats import TAU_UNDER, TAU_OVER, DARK_WINDOW
from .losses import (LossWeights, ContrastiveState, make_teacher, ema_update,
                     total_loss, TAU_DEFAULT, MOMENTUM_DEFAULT,
                     QUEUE_CAPACITY_DEFAULT, Q_PCT_DEFAULT)
from .checkpoint import write_checkpoint, read_checkpoint


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs_const: int = 100
    epochs_decay: int = 100
    batch: int = 32
    image_size: int = 512
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = TAU_DEFAULT
    momentum: float = MOMENTUM_DEFAULT
    queue_capacity: int = QUEUE_CAPACITY_DEFAULT
    q_pct: float = Q_PCT_DEFAULT
    reference_path: str | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 2:
            raise ValueError(f"batch must be >= 2, got {self.batch}")
        if self.epochs_const < 0 or self.epochs_decay < 1:
            raise ValueError("epoch counts out of range")

    def to_dict(self) -> dict:
        """Flat snapshot of every knob, including the structural constants
        the rest of the stack is wired with."""
        return {
            "lr": self.lr,
            "epochs_const": self.epochs_const,
            "epochs_decay": self.epochs_decay,
            "batch": self.batch,
            "image_size": self.image_size,
            "seed": self.seed,
            "lambda_dc": self.weights.lambda_dc,
            "lambda_ctr": self.weights.lambda_ctr,
            "tau": self.tau,
            "momentum": self.momentum,
            "queue_capacity": self.queue_capacity,
            "q_pct": self.q_pct,
            "tau_under": TAU_UNDER,
            "tau_over": TAU_OVER,
            "dark_window": DARK_WINDOW,
            "descriptor_dim": DESCRIPTOR_DIM,
            "channels": tuple(SCALE_CHANNELS),
            "reference_path": self.reference_path,
        }


@dataclass
class SynthPairSpec:
    """Degradation sampler: I_s = clip(I_r^gamma * 2^ev)."""

    gamma_lo: float = 0.3
    gamma_hi: float = 3.0
    ev_lo: float = -2.0
    ev_hi: float = 2.0

    def __post_init__(self):
        if not (0 < self.gamma_lo <= self.gamma_hi):
            raise ValueError("empty or invalid gamma range")
        if self.ev_lo > self.ev_hi:
            raise ValueError("empty EV range")

    def degrade(self, img: np.ndarray, rng) -> np.ndarray:
        gamma = rng.uniform(self.gamma_lo, self.gamma_hi)
        ev = rng.uniform(self.ev_lo, self.ev_hi)
        return apply_degradation(img, gamma, ev)


def apply_degradation(img: np.ndarray, gamma: float, ev: float) -> np.ndarray:
    out = np.power(img.astype(np.float64), gamma) * 2.0 ** ev
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synth_base_images(rng, count: int, size: int) -> list[np.ndarray]:
    """Procedural well-exposed bases: low-frequency bilinear noise with a
    mild per-channel cast, kept away from the clip rails."""
    bases = []
    for _ in range(count):
        k = int(rng.integers(4, 9))
        low = rng.uniform(0.2, 0.8, size=(3, k, k))
        cast = rng.uniform(-0.05, 0.05, size=(3, 1, 1))
        img = imageio.resize(imageio.Image(np.clip(low + cast, 0.05, 0.95)
                                           .astype(np.float32)), size, size)
        bases.append(img.pixels)
    return bases


def make_pairs(source, seed: int, count: int = 0, size: int = 0,
               reference_path: str | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Build the (I_s, I_r) training list.

    Directory mode pairs every readable image with one fixed reference
    (the explicit reference_path, else the first image in sorted order).
    Synthetic mode degrades `count` procedural bases of side `size`.
    """
    if isinstance(source, SynthPairSpec):
        if count < 1 or size < 1:
            raise ValueError("synthetic mode needs count and size")
        rng = np.random.default_rng([seed, 0x5A17])
        pairs = []
        for base in synth_base_images(rng, count, size):
            pairs.append((source.degrade(base, rng), base))
        return pairs

    root = Path(source)
    paths = sorted(p for p in root.iterdir()
                   if p.suffix.lower() in (".ppm", ".png"))
    if not paths:
        raise ValueError(f"no images found in {root}")
    images, skipped = [], 0
    for p in paths:
        try:
            img = imageio.load(p)
        except imageio.ImageIOError:
            skipped += 1
            continue
        if size:
            img = imageio.resize(img, size, size)
        images.append((p, img.pixels))
    if skipped:
        warnings.warn(f"skipped {skipped} unreadable image(s)")
    if not images:
        raise ValueError(f"no readable images in {root}")
    if reference_path is not None:
        ref_img = imageio.load(reference_path)
        if size:
            ref_img = imageio.resize(ref_img, size, size)
        ref = ref_img.pixels
    else:
        ref = images[0][1]
    return [(px, ref) for _, px in images]


class AdamState:
    """First/second moments and the shared step counter for a list of
    (section, Param) pairs."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, named_params):
        self.named = list(named_params)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.named}
        self.v = {k: np.zeros_like(p.data) for k, p in self.named}


def adam_step(adam: AdamState, lr_t: float) -> bool:
    """Bias-corrected Adam over the registered parameters, reading each
    parameter's accumulated gradient.  Any non-finite gradient aborts the
    whole step (moments and counter untouched); returns False then."""
    grads = {}
    for key, p in adam.named:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            warnings.warn(f"non-finite gradient in {key}; step skipped")
            return False
        grads[key] = g
    adam.t += 1
    b1, b2, eps = adam.BETA1, adam.BETA2, adam.EPS
    c1 = 1.0 - b1 ** adam.t
    c2 = 1.0 - b2 ** adam.t
    for key, p in adam.named:
        g = grads[key]
        m = adam.m[key]
        v = adam.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.tensor.data = p.data - lr_t * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant for epochs_const epochs, then linear to zero."""
    total = cfg.epochs_const + cfg.epochs_decay
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if epoch < cfg.epochs_const:
        return cfg.lr
    return cfg.lr * (1.0 - (epoch - cfg.epochs_const + 1) / cfg.epochs_decay)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str | None
    history: list[tuple]          # (step, pix, dc, ctr, total, skipped)
    encoder: ExposureEncoder
    net: ModNet
    state: ContrastiveState


def _sections(enc: ExposureEncoder, net: ModNet, state: ContrastiveState,
              adam: AdamState, epoch_done: int, step: int, cfg: TrainConfig):
    rec = {}
    for p in enc.params:
        rec[f"caee.{p.name}"] = p.data
    for p in net.params:
        rec[f"modnet.{p.name}"] = p.data
    for p in state.teacher:
        rec[f"teacher.{p.name}"] = p.data
    for key, _ in adam.named:
        rec[f"adam.m.{key}"] = adam.m[key]
        rec[f"adam.v.{key}"] = adam.v[key]
    rec["adam.t"] = np.float32(adam.t)
    rec["queue.vectors"] = state.queue_array()
    rec["state.small_batch_warned"] = np.float32(state.small_batch_warned)
    rec["meta.epoch"] = np.float32(epoch_done)
    rec["meta.step"] = np.float32(step)
    rec["meta.seed"] = np.float32(cfg.seed)
    rec["meta.lr"] = np.float32(cfg.lr)
    rec["meta.batch"] = np.float32(cfg.batch)
    rec["meta.lambda_dc"] = np.float32(cfg.weights.lambda_dc)
    rec["meta.lambda_ctr"] = np.float32(cfg.weights.lambda_ctr)
    rec["meta.tau"] = np.float32(cfg.tau)
    return rec


def _restore(path, enc: ExposureEncoder, net: ModNet, state: ContrastiveState,
             adam: AdamState):
    rec = read_checkpoint(path)
    enc.params.load_arrays({n[len("caee."):]: a for n, a in rec.items()
                            if n.startswith("caee.")})
    net.params.load_arrays({n[len("modnet."):]: a for n, a in rec.items()
                            if n.startswith("modnet.")})
    state.teacher.load_arrays({n[len("teacher."):]: a for n, a in rec.items()
                               if n.startswith("teacher.")})
    for key, _ in adam.named:
        adam.m[key] = rec[f"adam.m.{key}"].copy()
        adam.v[key] = rec[f"adam.v.{key}"].copy()
    adam.t = int(rec["adam.t"])
    q = rec["queue.vectors"]
    state.load_queue(q.reshape(-1, DESCRIPTOR_DIM))
    state.small_batch_warned = bool(rec["state.small_batch_warned"])
    return int(rec["meta.step"])


def train(cfg: TrainConfig, pairs, out_path, steps: int | None = None,
          log_path=None, resume_from=None) -> TrainResult:
    """Optimize encoder and modulation net on the given (I_s, I_r) pairs.

    Stops after `steps` optimizer steps (or the full epoch schedule when
    None), checkpointing to out_path at every epoch boundary and logging
    one CSV row per step."""
    if not pairs:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(cfg.seed)
    enc = ExposureEncoder.init(rng)
    net = ModNet.init(rng)
    state = ContrastiveState(make_teacher(enc.params), cfg.momentum,
                             cfg.queue_capacity, cfg.tau, cfg.q_pct)
    named = [(f"caee.{p.name}", p) for p in enc.params]
    named += [(f"modnet.{p.name}", p) for p in net.params]
    adam = AdamState(named)

    global_step = 0
    if resume_from is not None:
        global_step = _restore(resume_from, enc, net, state, adam)

    per_epoch = len(pairs) // cfg.batch
    if per_epoch == 0:
        raise ValueError(f"fewer pairs ({len(pairs)}) than one batch ({cfg.batch})")
    epochs_total = cfg.epochs_const + cfg.epochs_decay
    if steps is None:
        target = epochs_total * per_epoch
    else:
        target = steps
        if math.ceil(target / per_epoch) > epochs_total:
            raise ValueError("step budget exceeds the epoch schedule")

    out_path = str(out_path)
    history = []
    log_file = None
    log_writer = None
    if log_path is not None:
        log_file = open(log_path, "a" if resume_from else "w", newline="")
        log_writer = csv.writer(log_file)
        if not resume_from:
            log_writer.writerow(["step", "L_pix", "L_dc", "L_ctr", "total",
                                 "skipped_anchors"])

    wrote_any = False
    try:
        # epoch index and position within it follow from the step counter,
        # so a resumed run walks the exact path of an uninterrupted one
        epoch = global_step // per_epoch
        while global_step < target and epoch < epochs_total:
            lr_t = lr_schedule(epoch, cfg)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
            for b in range(global_step % per_epoch, per_epoch):
                if global_step >= target:
                    break
                idx = order[b * cfg.batch:(b + 1) * cfg.batch]
                i_s = np.stack([pairs[i][0] for i in idx])
                i_r = np.stack([pairs[i][1] for i in idx])

                enc.params.zero_grad()
                net.params.zero_grad()
                z_s = enc.encode_batch(i_s)
                z_r = enc.encode_batch(i_r)
                dz = delta_z(z_s, z_r)
                _, i_hat = net.forward_batch(i_s, dz)
                total, parts = total_loss(i_hat, i_r, i_s, enc, state,
                                          cfg.weights, update_queue=True)
                total.backward()
                stepped = adam_step(adam, lr_t)
                if stepped and cfg.weights.lambda_ctr != 0.0:
                    ema_update(state.teacher, enc.params, cfg.momentum)

                global_step += 1
                row = (global_step, parts.pix, parts.dc, parts.ctr,
                       total.item(), parts.skipped)
                history.append(row)
                if log_writer is not None:
                    log_writer.writerow([f"{x:.8g}" if isinstance(x, float)
                                         else x for x in row])
            epoch += 1
            write_checkpoint(out_path,
                             _sections(enc, net, state, adam, epoch,
                                       global_step, cfg))
            wrote_any = True
    finally:
        if log_file is not None:
            log_file.close()
    if not wrote_any:
        write_checkpoint(out_path, _sections(enc, net, state, adam, epoch,
                                             global_step, cfg))
    return TrainResult(out_path, log_path, history, enc, net, state)
