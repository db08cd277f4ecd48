"""Training objectives: pixel L1, dark-channel L1, and the multi-positive
contrastive descriptor loss with its EMA teacher and memory queue.

The contrastive positives are mined in teacher space: for each anchor,
candidates are the other batch members plus the queue, the distance
percentile sets the positive radius, and anchors with no positive are
skipped.  The queue is fed with teacher descriptors after the loss is
computed so an anchor never sees its own current teacher vector twice.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import ExposureEncoder
from .photostats import dark_channel_t, DARK_WINDOW

TAU_DEFAULT = 0.07
MOMENTUM_DEFAULT = 0.99
QUEUE_CAPACITY_DEFAULT = 1024
Q_PCT_DEFAULT = 10.0


@dataclass
class LossWeights:
    lambda_dc: float = 0.5
    lambda_ctr: float = 0.1

    def __post_init__(self):
        if self.lambda_dc < 0 or self.lambda_ctr < 0:
            raise ValueError("loss weights must be nonnegative")


def _as_tensor(x) -> T.Tensor:
    return x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x))


def _check_match(a: T.Tensor, b: T.Tensor, what: str):
    if a.data.shape != b.data.shape:
        raise T.ShapeError(f"{what}: shapes differ {a.data.shape} vs {b.data.shape}")


def loss_pix(i_hat, i_ref) -> T.Tensor:
    """Mean absolute intensity difference."""
    a, b = _as_tensor(i_hat), _as_tensor(i_ref)
    _check_match(a, b, "loss_pix")
    return (a - b).abs().mean()


def loss_dc(i_hat, i_ref, window: int = DARK_WINDOW) -> T.Tensor:
    """Mean absolute difference of the two dark channels."""
    a, b = _as_tensor(i_hat), _as_tensor(i_ref)
    _check_match(a, b, "loss_dc")
    return (dark_channel_t(a, window) - dark_channel_t(b, window)).abs().mean()


def l2_normalize(z: T.Tensor) -> T.Tensor:
    """Row-normalize (N,D) descriptors onto the unit sphere."""
    n = (z * z).sum(axis=1, keepdims=True).sqrt()
    return z / n


def normalize_rows(z: np.ndarray) -> np.ndarray:
    return z / np.linalg.norm(z, axis=1, keepdims=True)


class ContrastiveState:
    """EMA teacher parameters plus the FIFO of teacher descriptors."""

    def __init__(self, teacher: T.ParamSet, momentum: float = MOMENTUM_DEFAULT,
                 queue_capacity: int = QUEUE_CAPACITY_DEFAULT,
                 tau: float = TAU_DEFAULT, q_pct: float = Q_PCT_DEFAULT):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0,1), got {momentum}")
        if tau <= 0.0:
            raise ValueError(f"temperature must be positive, got {tau}")
        teacher.set_requires_grad(False)
        self.teacher = teacher
        self.momentum = momentum
        self.tau = tau
        self.q_pct = q_pct
        self.queue: deque[np.ndarray] = deque(maxlen=queue_capacity)
        self.small_batch_warned = False

    @property
    def queue_capacity(self) -> int:
        return self.queue.maxlen

    def queue_array(self) -> np.ndarray:
        if not self.queue:
            return np.zeros((0, 66), dtype=np.float32)
        return np.stack(list(self.queue)).astype(np.float32)

    def load_queue(self, arr: np.ndarray):
        self.queue.clear()
        for row in np.asarray(arr, dtype=np.float32):
            self.queue.append(row.copy())

    def enqueue(self, vectors: np.ndarray):
        for row in vectors:
            v = np.asarray(row, dtype=np.float32)
            nrm = float(np.linalg.norm(v))
            if abs(nrm - 1.0) > 1e-6:
                v = v / nrm
            self.queue.append(v)


def make_teacher(student: T.ParamSet) -> T.ParamSet:
    """Frozen deep copy of the student parameters."""
    t = T.ParamSet()
    for p in student:
        t.add(p.name, p.tensor.data.copy())
    t.set_requires_grad(False)
    return t


def ema_update(teacher: T.ParamSet, student: T.ParamSet, momentum: float):
    """theta_t <- m*theta_t + (1-m)*theta_s, in place."""
    if teacher.names() != student.names():
        raise T.ShapeError("teacher/student parameter sets differ")
    for name in teacher.names():
        tt, st = teacher[name], student[name]
        if tt.data.shape != st.data.shape:
            raise T.ShapeError(f"{name}: teacher shape {tt.data.shape} != "
                               f"student {st.data.shape}")
        tt.data *= momentum
        tt.data += (1.0 - momentum) * st.data.astype(tt.data.dtype)


def positive_sets(z_teacher: np.ndarray, queue: np.ndarray, q_pct: float,
                  delta_override=None):
    """Teacher-space positive mining.

    Returns (positive index lists, candidate-mask matrix) where columns
    index [batch | queue].  Per anchor: candidates are all non-self
    columns; the positive radius is the nearest-rank q percentile of the
    candidate distances (ties at the radius included).
    """
    n = z_teacher.shape[0]
    cand = np.concatenate([z_teacher, queue], axis=0) if queue.size else z_teacher
    m = cand.shape[0]
    d = np.linalg.norm(z_teacher[:, None, :] - cand[None, :, :], axis=2)
    mask = np.ones((n, m), dtype=bool)
    mask[:, :n] ^= np.eye(n, dtype=bool)
    positives = []
    for i in range(n):
        di = d[i][mask[i]]
        if di.size == 0:
            positives.append(np.array([], dtype=np.intp))
            continue
        if delta_override is None:
            rank = max(1, math.ceil(q_pct / 100.0 * di.size))
            delta = np.sort(di)[rank - 1]
        else:
            delta = delta_override
        keep = mask[i] & (d[i] <= delta)
        positives.append(np.nonzero(keep)[0])
    return positives, mask


@dataclass
class CtrResult:
    value: T.Tensor              # scalar loss
    skipped: int                 # anchors with empty positive sets
    small_batch: bool = False    # batch < 2 fallback taken


def contrastive_loss(z_student: T.Tensor, z_teacher: np.ndarray,
                     state: ContrastiveState, delta_override=None) -> CtrResult:
    """Descriptor-level loss: student rows vs teacher rows of one batch.

    z_student carries the graph; z_teacher must already be detached.
    Rows are L2-normalized here.  The queue is read but never written
    (callers enqueue afterwards).
    """
    n = z_student.data.shape[0]
    if n < 2:
        if not state.small_batch_warned:
            warnings.warn("contrastive loss needs a batch of >= 2; returning 0")
            state.small_batch_warned = True
        return CtrResult(T.Tensor(np.zeros((), dtype=z_student.data.dtype)),
                         skipped=n, small_batch=True)
    zs = l2_normalize(z_student)
    zt = normalize_rows(np.asarray(z_teacher, dtype=np.float64))
    queue = state.queue_array().astype(np.float64)
    if queue.size:
        queue = normalize_rows(queue)
        cand = np.concatenate([zt, queue], axis=0)
    else:
        cand = zt
    positives, mask = positive_sets(zt, queue, state.q_pct, delta_override)

    m = cand.shape[0]
    surv = [i for i in range(n) if positives[i].size > 0]
    skipped = n - len(surv)
    dt = z_student.data.dtype
    if not surv:
        return CtrResult(T.Tensor(np.zeros((), dtype=dt)), skipped=skipped)

    # logits in teacher space; the graph flows only through zs
    sims = zs @ T.Tensor((cand.T / state.tau).astype(dt))      # (n, m)
    expm = sims.exp() * T.Tensor(mask.astype(dt))
    lse = expm.sum(axis=1).log()                               # (n,)
    wpos = np.zeros((n, m), dtype=dt)
    for i in surv:
        wpos[i, positives[i]] = 1.0 / positives[i].size
    pos_mean = (sims * T.Tensor(wpos)).sum(axis=1)             # (n,)
    per_anchor = lse - pos_mean
    wsurv = np.zeros(n, dtype=dt)
    wsurv[surv] = 1.0 / len(surv)
    value = (per_anchor * T.Tensor(wsurv)).sum()
    return CtrResult(value, skipped=skipped)


def loss_ctr(images: np.ndarray, student: ExposureEncoder, state: ContrastiveState,
             update_queue: bool = True, delta_override=None) -> CtrResult:
    """Operational form: encode the batch with student and teacher, apply
    the descriptor loss, then (optionally) feed the queue."""
    z_s = student.encode_batch(images)
    with T.no_grad():
        teacher_enc = ExposureEncoder(state.teacher)
        z_t = teacher_enc.encode_batch(images).data.copy()
    result = contrastive_loss(z_s, z_t, state, delta_override)
    if update_queue and not result.small_batch:
        state.enqueue(normalize_rows(z_t.astype(np.float64)).astype(np.float32))
    return result


@dataclass
class LossParts:
    pix: float
    dc: float
    ctr: float
    skipped: int


def total_loss(i_hat, i_ref, images, student, state, weights: LossWeights,
               update_queue: bool = True):
    """L = L_pix + lambda_dc*L_dc + lambda_ctr*L_ctr.

    With lambda_ctr == 0 the contrastive machinery (teacher, queue) is
    never touched; state may then be None.
    """
    pix = loss_pix(i_hat, i_ref)
    dc = loss_dc(i_hat, i_ref)
    if weights.lambda_ctr == 0.0:
        total = pix + weights.lambda_dc * dc
        parts = LossParts(pix.item(), dc.item(), 0.0, 0)
        return total, parts
    ctr = loss_ctr(images, student, state, update_queue=update_queue)
    total = pix + weights.lambda_dc * dc + weights.lambda_ctr * ctr.value
    parts = LossParts(pix.item(), dc.item(), ctr.value.item(), ctr.skipped)
    return total, parts
