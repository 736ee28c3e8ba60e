"""
Recurrent arrival-time predictor (numpy, trained from scratch).

Architecture:
    encoder:  obs(8) → linear 8→10 → ReLU → linear 10→6 → ReLU
    memory:   LSTM cell, input 6, hidden 6, gates ordered (i, f, g, o)
    decoder:  L independent heads, h(6) → linear 6→8 → ReLU → linear 8→1 → ReLU

Each head outputs the time remaining until the HDV reaches its candidate; the
predictor adds `now` to return absolute times, so every prediction is ≥ now.

Training:
    - masked mean-square error over every (trajectory, step, candidate) cell the
      HDV reaches inside the horizon and has not yet passed
    - gradients by backpropagation through time over whole trajectories
    - mini-batch gradient descent (default) or Adam, seeded shuffling

check_gradients() compares the analytic gradients with central differences.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core import EngineError, ZoneConfig
from .base import (
    ArrivalPredictor,
    EmptyDatasetError,
    ObservationScale,
    TrajectoryBatch,
    encode_observation,
    pending_mask,
)

logger = logging.getLogger(__name__)


INPUT_SIZE = 8
ENCODER_WIDTH = 10
HIDDEN_SIZE = 6
HEAD_WIDTH = 8

GRADIENT_CHECK_STEP = 1e-5
GRADIENT_CHECK_FLOOR = 1e-6


class TrainingDivergedError(EngineError):
    """Raised when the training loss becomes NaN or infinite."""
    pass


class CheckpointFormatError(EngineError):
    """Raised when a checkpoint file is missing arrays or has a wrong version."""
    pass


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

PARAM_NAMES = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2",
    "lstm_wx", "lstm_wh", "lstm_b",
    "dec_w1", "dec_b1", "dec_w2", "dec_b2",
)


def param_shapes(num_candidates: int) -> Dict[str, Tuple[int, ...]]:
    L = num_candidates
    return {
        "enc_w1": (ENCODER_WIDTH, INPUT_SIZE),
        "enc_b1": (ENCODER_WIDTH,),
        "enc_w2": (HIDDEN_SIZE, ENCODER_WIDTH),
        "enc_b2": (HIDDEN_SIZE,),
        "lstm_wx": (4 * HIDDEN_SIZE, HIDDEN_SIZE),
        "lstm_wh": (4 * HIDDEN_SIZE, HIDDEN_SIZE),
        "lstm_b": (4 * HIDDEN_SIZE,),
        "dec_w1": (L, HEAD_WIDTH, HIDDEN_SIZE),
        "dec_b1": (L, HEAD_WIDTH),
        "dec_w2": (L, HEAD_WIDTH),
        "dec_b2": (L,),
    }


def parameter_count(num_candidates: int) -> int:
    """468 shared parameters plus 65 per decoder head."""
    return sum(int(np.prod(s)) for s in param_shapes(num_candidates).values())


# fan-in of each array for the uniform(±1/sqrt(fan_in)) initialization
_FAN_IN = {
    "enc_w1": INPUT_SIZE, "enc_b1": INPUT_SIZE,
    "enc_w2": ENCODER_WIDTH, "enc_b2": ENCODER_WIDTH,
    "lstm_wx": HIDDEN_SIZE, "lstm_wh": HIDDEN_SIZE, "lstm_b": HIDDEN_SIZE,
    "dec_w1": HIDDEN_SIZE, "dec_b1": HIDDEN_SIZE,
    "dec_w2": HEAD_WIDTH, "dec_b2": HEAD_WIDTH,
}


@dataclass
class NetParams:
    """All weights of the encoder, LSTM cell and decoder heads."""
    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    lstm_wx: np.ndarray
    lstm_wh: np.ndarray
    lstm_b: np.ndarray
    dec_w1: np.ndarray
    dec_b1: np.ndarray
    dec_w2: np.ndarray
    dec_b2: np.ndarray

    def __post_init__(self) -> None:
        L = int(np.shape(self.dec_b2)[0]) if np.ndim(self.dec_b2) == 1 else -1
        if L < 1:
            raise EngineError("dec_b2 must be a 1-D array with one entry per candidate")
        for name, shape in param_shapes(L).items():
            array = np.asarray(getattr(self, name), dtype=np.float64)
            if array.shape != shape:
                raise EngineError(f"{name} has shape {array.shape}, expected {shape}")
            setattr(self, name, array)
        assert self.size == parameter_count(L)

    @property
    def num_candidates(self) -> int:
        return int(self.dec_b2.shape[0])

    @property
    def size(self) -> int:
        return sum(getattr(self, name).size for name in PARAM_NAMES)

    def arrays(self) -> List[np.ndarray]:
        return [getattr(self, name) for name in PARAM_NAMES]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_vector(cls, vector: np.ndarray, num_candidates: int) -> "NetParams":
        vector = np.asarray(vector, dtype=np.float64)
        arrays = {}
        offset = 0
        for name, shape in param_shapes(num_candidates).items():
            n = int(np.prod(shape))
            arrays[name] = vector[offset:offset + n].reshape(shape).copy()
            offset += n
        if offset != vector.size:
            raise EngineError(f"vector has {vector.size} entries, expected {offset}")
        return cls(**arrays)

    @classmethod
    def zeros(cls, num_candidates: int) -> "NetParams":
        return cls(**{name: np.zeros(shape) for name, shape in param_shapes(num_candidates).items()})

    @classmethod
    def initialize(cls, num_candidates: int, seed: int = 0) -> "NetParams":
        """
        Uniform(±1/sqrt(fan_in)) weights. Output-head biases use the non-negative
        half of that range so no head starts with a dead ReLU.
        """
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in param_shapes(num_candidates).items():
            bound = 1.0 / math.sqrt(_FAN_IN[name])
            low = 0.0 if name == "dec_b2" else -bound
            arrays[name] = rng.uniform(low, bound, size=shape)
        return cls(**arrays)

    def copy(self) -> "NetParams":
        return NetParams(**{name: getattr(self, name).copy() for name in PARAM_NAMES})


@dataclass(frozen=True)
class HiddenState:
    """LSTM output and cell memory, shape (6,) or (B, 6)."""
    h: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, batch: Optional[int] = None) -> "HiddenState":
        shape = (HIDDEN_SIZE,) if batch is None else (batch, HIDDEN_SIZE)
        return cls(np.zeros(shape), np.zeros(shape))


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def step_hidden(params: NetParams, prev: HiddenState, obs: np.ndarray) -> HiddenState:
    """
    One encoder + LSTM update.

    Args:
        params: Network weights.
        prev:   Previous (h, cell); (6,) for one vehicle or (B, 6) for a batch.
        obs:    Encoded observation(s), (8,) or (B, 8).

    Returns:
        The new HiddenState with the same leading shape as `obs`.
    """
    single = np.ndim(obs) == 1
    x = np.atleast_2d(obs)
    h_prev = np.atleast_2d(prev.h)
    c_prev = np.atleast_2d(prev.cell)

    z1 = _relu(x @ params.enc_w1.T + params.enc_b1)
    z2 = _relu(z1 @ params.enc_w2.T + params.enc_b2)
    pre = z2 @ params.lstm_wx.T + h_prev @ params.lstm_wh.T + params.lstm_b

    H = HIDDEN_SIZE
    i = _sigmoid(pre[:, :H])
    f = _sigmoid(pre[:, H:2 * H])
    g = np.tanh(pre[:, 2 * H:3 * H])
    o = _sigmoid(pre[:, 3 * H:])
    cell = f * c_prev + i * g
    h = o * np.tanh(cell)
    if single:
        return HiddenState(h[0], cell[0])
    return HiddenState(h, cell)


def _heads(params: NetParams, h: np.ndarray) -> np.ndarray:
    """(B, 6) → (B, L) time-to-arrival."""
    e1 = np.einsum("lkj,bj->blk", params.dec_w1, h) + params.dec_b1[None]
    y1 = _relu(e1)
    e2 = np.einsum("lk,blk->bl", params.dec_w2, y1) + params.dec_b2
    return _relu(e2)


def decode_arrivals(params: NetParams, hidden: HiddenState, now: float) -> np.ndarray:
    """L absolute arrival times (or (B, L) for a batched hidden state), all ≥ now."""
    single = np.ndim(hidden.h) == 1
    out = now + _heads(params, np.atleast_2d(hidden.h))
    return out[0] if single else out


class RecurrentPredictor(ArrivalPredictor):
    """Batch predictor around a trained NetParams instance."""

    kind = "recurrent"

    def __init__(
        self,
        config: ZoneConfig,
        params: NetParams,
        scale: Optional[ObservationScale] = None,
    ) -> None:
        super().__init__(config)
        if params.num_candidates != config.num_candidates:
            raise EngineError(
                f"network has {params.num_candidates} heads but the zone has {config.num_candidates} candidates"
            )
        self.params = params
        self.scale = scale if scale is not None else ObservationScale.for_zone(config)

    def _initial_model_state(self, batch: int) -> Any:
        return HiddenState.zeros(batch)

    def _advance(self, model_state: Any, raw: np.ndarray, now: float) -> Any:
        return step_hidden(self.params, model_state, encode_observation(raw, self.scale))

    def _decode(self, model_state: Any, raw: np.ndarray, now: float) -> np.ndarray:
        return decode_arrivals(self.params, model_state, now)

    def _fingerprint_payload(self) -> bytes:
        digest = hashlib.sha256(self.params.to_vector().tobytes())
        anchor = "none" if self.scale.anchor is None else repr(self.scale.anchor)
        digest.update(f"{self.scale.position_scale}|{self.scale.speed_scale}|{anchor}".encode())
        return digest.digest()


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Minibatch:
    """
    Encoded inputs and masked relative targets.

    Attributes:
        inputs:  (B, S, 8) encoded observations.
        targets: (B, S, L) time-to-arrival; 0 where masked.
        mask:    (B, S, L) cells that enter the loss.
    """
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def take(self, index: Sequence[int]) -> "Minibatch":
        index = np.asarray(index, dtype=int)
        return Minibatch(self.inputs[index], self.targets[index], self.mask[index])


def prepare_minibatch(batch: TrajectoryBatch, config: ZoneConfig, scale: ObservationScale) -> Minibatch:
    """Build training tensors from raw trajectories."""
    if len(batch) == 0:
        raise EmptyDatasetError("no trajectories to train on")
    inputs = encode_observation(batch.observations, scale)
    now = np.arange(batch.num_steps) * config.dt
    mask = pending_mask(batch, config)
    with np.errstate(invalid="ignore"):
        relative = batch.arrivals[:, None, :] - now[None, :, None]
    targets = np.where(mask, relative, 0.0)
    return Minibatch(inputs, targets, mask)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def forward_sequence(params: NetParams, inputs: np.ndarray, keep_cache: bool = False):
    """
    Run the network over (B, S, 8) encoded inputs.

    Returns:
        (outputs, cache): (B, S, L) time-to-arrival and the per-step
        intermediates needed by backpropagation (None unless keep_cache).
    """
    B, S, _ = inputs.shape
    H = HIDDEN_SIZE
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    outputs = np.zeros((B, S, params.num_candidates))
    cache = [] if keep_cache else None

    for t in range(S):
        x = inputs[:, t]
        a1 = x @ params.enc_w1.T + params.enc_b1
        z1 = _relu(a1)
        a2 = z1 @ params.enc_w2.T + params.enc_b2
        z2 = _relu(a2)
        pre = z2 @ params.lstm_wx.T + h @ params.lstm_wh.T + params.lstm_b
        i = _sigmoid(pre[:, :H])
        f = _sigmoid(pre[:, H:2 * H])
        g = np.tanh(pre[:, 2 * H:3 * H])
        o = _sigmoid(pre[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        e1 = np.einsum("lkj,bj->blk", params.dec_w1, h_new) + params.dec_b1[None]
        y1 = _relu(e1)
        e2 = np.einsum("lk,blk->bl", params.dec_w2, y1) + params.dec_b2
        outputs[:, t] = _relu(e2)
        if keep_cache:
            cache.append((x, a1, z1, a2, z2, h, c, i, f, g, o, tc, h_new, e1, y1, e2))
        h, c = h_new, c_new
    return outputs, cache


def masked_loss(params: NetParams, minibatch: Minibatch) -> float:
    outputs, _ = forward_sequence(params, minibatch.inputs)
    count = max(int(minibatch.mask.sum()), 1)
    diff = np.where(minibatch.mask, outputs - minibatch.targets, 0.0)
    return float(np.sum(diff * diff) / count)


def loss_and_grad(params: NetParams, minibatch: Minibatch) -> Tuple[float, NetParams]:
    """Masked MSE and its gradient by backpropagation through time."""
    outputs, cache = forward_sequence(params, minibatch.inputs, keep_cache=True)
    count = max(int(minibatch.mask.sum()), 1)
    diff = np.where(minibatch.mask, outputs - minibatch.targets, 0.0)
    loss = float(np.sum(diff * diff) / count)
    d_out = 2.0 * diff / count

    grads = NetParams.zeros(params.num_candidates)
    B = minibatch.inputs.shape[0]
    dh_next = np.zeros((B, HIDDEN_SIZE))
    dc_next = np.zeros((B, HIDDEN_SIZE))

    for t in reversed(range(len(cache))):
        x, a1, z1, a2, z2, h_prev, c_prev, i, f, g, o, tc, h, e1, y1, e2 = cache[t]

        # decoder heads
        de2 = d_out[:, t] * (e2 > 0)
        grads.dec_w2 += np.einsum("bl,blk->lk", de2, y1)
        grads.dec_b2 += de2.sum(axis=0)
        de1 = de2[:, :, None] * params.dec_w2[None] * (e1 > 0)
        grads.dec_w1 += np.einsum("blk,bj->lkj", de1, h)
        grads.dec_b1 += de1.sum(axis=0)
        dh = np.einsum("blk,lkj->bj", de1, params.dec_w1) + dh_next

        # LSTM cell
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        dc_next = dc * f
        dpre = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)],
            axis=1,
        )
        grads.lstm_wx += dpre.T @ z2
        grads.lstm_wh += dpre.T @ h_prev
        grads.lstm_b += dpre.sum(axis=0)
        dh_next = dpre @ params.lstm_wh

        # encoder
        da2 = (dpre @ params.lstm_wx) * (a2 > 0)
        grads.enc_w2 += da2.T @ z1
        grads.enc_b2 += da2.sum(axis=0)
        da1 = (da2 @ params.enc_w2) * (a1 > 0)
        grads.enc_w1 += da1.T @ x
        grads.enc_b1 += da1.sum(axis=0)

    return loss, grads


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def finite_difference_error(
    loss_fn: Callable[[np.ndarray], float],
    vector: np.ndarray,
    analytic: np.ndarray,
    indices: Sequence[int],
    step: float = GRADIENT_CHECK_STEP,
    floor: float = GRADIENT_CHECK_FLOOR,
) -> float:
    """
    Max relative error between `analytic` and central differences of
    `loss_fn` at the selected coordinates:

        |a - n| / max(|a|, |n|, floor)

    A gradient with the wrong sign scores 2.0.
    """
    vector = np.asarray(vector, dtype=np.float64)
    worst = 0.0
    for k in indices:
        bumped = vector.copy()
        bumped[k] = vector[k] + step
        plus = loss_fn(bumped)
        bumped[k] = vector[k] - step
        minus = loss_fn(bumped)
        numeric = (plus - minus) / (2.0 * step)
        a = float(analytic[k])
        scale = max(abs(a), abs(numeric), floor)
        worst = max(worst, abs(a - numeric) / scale)
    return worst


def check_gradients(
    params: NetParams,
    minibatch: Minibatch,
    num_checks: int = 100,
    seed: int = 0,
    step: float = GRADIENT_CHECK_STEP,
) -> float:
    """Max relative error of BPTT gradients over `num_checks` random parameters."""
    L = params.num_candidates
    _, grads = loss_and_grad(params, minibatch)
    vector = params.to_vector()
    rng = np.random.default_rng(seed)
    indices = rng.choice(vector.size, size=min(num_checks, vector.size), replace=False)

    def loss_fn(v: np.ndarray) -> float:
        return masked_loss(NetParams.from_vector(v, L), minibatch)

    return finite_difference_error(loss_fn, vector, grads.to_vector(), indices, step=step)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingHyper:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "sgd"   # "sgd" or "adam"

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise EngineError("learning_rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise EngineError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise EngineError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainingResult:
    """Final parameters and the full-dataset loss before training and after each epoch."""
    params: NetParams
    loss_curve: List[float] = field(default_factory=list)


class _Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def update(self, vector: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return vector - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(
    dataset: TrajectoryBatch,
    config: ZoneConfig,
    hyper: TrainingHyper = TrainingHyper(),
    scale: Optional[ObservationScale] = None,
    initial: Optional[NetParams] = None,
) -> TrainingResult:
    """
    Fit a NetParams instance to a trajectory dataset.

    Args:
        dataset: Training trajectories (disjoint from calibration/test).
        config:  Zone geometry; fixes the number of heads.
        hyper:   Optimizer settings; `seed` drives init and shuffling.
        scale:   Observation normalization; anchored zone scale by default.
        initial: Optional starting parameters (copied).

    Returns:
        TrainingResult with the final parameters and the loss curve.

    Raises:
        EmptyDatasetError:     If the dataset has no trajectories or no
                               reachable target cells.
        TrainingDivergedError: If the loss becomes non-finite.
    """
    scale = scale if scale is not None else ObservationScale.for_zone(config)
    data = prepare_minibatch(dataset, config, scale)
    if not data.mask.any():
        raise EmptyDatasetError("no trajectory reaches any candidate inside the horizon")

    L = config.num_candidates
    params = initial.copy() if initial is not None else NetParams.initialize(L, hyper.seed)
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 2]))
    adam = _Adam(params.size, hyper.learning_rate) if hyper.optimizer == "adam" else None

    curve = [masked_loss(params, data)]
    logger.info("training %d trajectories, initial loss %.4f", len(data), curve[0])

    for epoch in range(hyper.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), hyper.batch_size):
            chunk = data.take(order[start:start + hyper.batch_size])
            loss, grads = loss_and_grad(params, chunk)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}, batch starting at {start}"
                )
            vector = params.to_vector()
            gvec = grads.to_vector()
            if adam is not None:
                vector = adam.update(vector, gvec)
            else:
                vector = vector - hyper.learning_rate * gvec
            params = NetParams.from_vector(vector, L)

        epoch_loss = masked_loss(params, data)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(f"loss became non-finite after epoch {epoch}")
        curve.append(epoch_loss)
        logger.info("epoch %d/%d loss %.6f", epoch + 1, hyper.epochs, epoch_loss)

    return TrainingResult(params=params, loss_curve=curve)
