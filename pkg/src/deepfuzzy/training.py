"""Adam, learning-rate schedules, the training loop and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import tensor as T
from .datasets import AugmentPolicy, LabeledDataset, augment, batches, num_batches
from .errors import ConfigurationError, DivergenceError, FormatError
from .network import Network, build_network, parse_network_spec
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "batch_count", "lr", "train_loss", "val_loss", "val_error", "wall_seconds")


# --------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, batch_index: Optional[int] = None) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name} at batch {batch_index}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigurationError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ----------------------------------------------------------------- schedules

@dataclass(frozen=True)
class ScheduleSpec:
    """Compound learning-rate schedule.

    ``mode='milestone'`` divides by 10 at each epoch in ``milestones``;
    ``mode='plateau'`` divides when validation error stalls. On top of that the
    rate decays by ``epoch_decay`` per finished epoch and by the batch factor
    per finished batch (``batch_decay`` before ``phase_switch_epoch``,
    ``batch_decay_late`` from then on).
    """

    base_lr: float = 1e-3
    mode: str = "milestone"
    milestones: Tuple[int, ...] = (100, 300)
    milestone_factor: float = 0.1
    epoch_decay: float = 0.9995
    batch_decay: float = 0.9995
    batch_decay_late: float = 0.99995
    phase_switch_epoch: Optional[int] = 100
    plateau_patience: int = 20
    plateau_threshold: float = 1e-4
    max_plateau_drops: int = 2

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be positive")
        for name in ("milestone_factor", "epoch_decay", "batch_decay", "batch_decay_late"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be in (0, 1]")
        if self.mode not in ("milestone", "plateau"):
            raise ConfigurationError(f"unknown schedule mode {self.mode!r}")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    @classmethod
    def mnist(cls) -> "ScheduleSpec":
        return cls()

    @classmethod
    def cifar(cls) -> "ScheduleSpec":
        return cls(mode="plateau", milestones=(), batch_decay=0.99994, batch_decay_late=0.99994,
                   phase_switch_epoch=None)

    @classmethod
    def for_dataset(cls, name: str) -> "ScheduleSpec":
        return cls.mnist() if name == "mnist" else cls.cifar()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSpec":
        return cls(**{**d, "milestones": tuple(d.get("milestones", ()))})


def current_lr(spec: ScheduleSpec, epoch: int, batch: int, batches_per_epoch: int,
               plateau_drops: int = 0) -> float:
    """Closed-form learning rate before batch ``batch`` of epoch ``epoch`` (both 0-based)."""
    if epoch < 0 or batch < 0 or batches_per_epoch < 1:
        raise ConfigurationError("epoch/batch counters must be >= 0 and batches_per_epoch >= 1")
    if spec.mode == "milestone":
        drops = sum(1 for m in spec.milestones if epoch >= m)
    else:
        drops = plateau_drops
    elapsed = epoch * batches_per_epoch + batch
    if spec.phase_switch_epoch is None:
        early = elapsed
    else:
        early = min(elapsed, spec.phase_switch_epoch * batches_per_epoch)
    return (spec.base_lr * spec.milestone_factor ** drops * spec.epoch_decay ** epoch
            * spec.batch_decay ** early * spec.batch_decay_late ** (elapsed - early))


@dataclass
class LRSchedule:
    """Iterative form of the schedule, advanced batch by batch."""

    spec: ScheduleSpec
    lr: float = 0.0
    epoch: int = 0
    batch: int = 0
    drops: int = 0
    best_val: float = math.inf
    stale_epochs: int = 0

    def __post_init__(self):
        if self.lr == 0.0:
            self.lr = self.spec.base_lr

    def step_batch(self) -> None:
        late = self.spec.phase_switch_epoch is not None and self.epoch >= self.spec.phase_switch_epoch
        self.lr *= self.spec.batch_decay_late if late else self.spec.batch_decay
        self.batch += 1

    def end_epoch(self, val_error: Optional[float] = None) -> None:
        self.epoch += 1
        self.batch = 0
        spec = self.spec
        if spec.mode == "milestone":
            if self.epoch in spec.milestones:
                self.lr *= spec.milestone_factor
                self.drops += 1
        elif val_error is not None and not math.isnan(val_error):
            if val_error < self.best_val - spec.plateau_threshold:
                self.best_val = val_error
                self.stale_epochs = 0
            else:
                self.stale_epochs += 1
                if self.stale_epochs >= spec.plateau_patience and self.drops < spec.max_plateau_drops:
                    self.lr *= spec.milestone_factor
                    self.drops += 1
                    self.stale_epochs = 0
        self.lr *= spec.epoch_decay

    def state_dict(self) -> dict:
        return {"lr": self.lr, "epoch": self.epoch, "batch": self.batch, "drops": self.drops,
                "best_val": self.best_val, "stale_epochs": self.stale_epochs}

    @classmethod
    def from_state(cls, spec: ScheduleSpec, d: dict) -> "LRSchedule":
        return cls(spec, **d)


# -------------------------------------------------------------------- train

@dataclass
class TrainState:
    network: Network
    adam: AdamState
    schedule: LRSchedule
    seed: int
    batch_size: int
    epoch: int = 0
    best_val_error: float = math.inf
    best_epoch: int = -1
    best_params: Dict[str, np.ndarray] = field(default_factory=dict)
    history: List[dict] = field(default_factory=list)
    augment_policy: Optional[AugmentPolicy] = None


def new_train_state(network: Network, schedule: ScheduleSpec, seed: int, batch_size: int = 512,
                    augment_policy: Optional[AugmentPolicy] = None) -> TrainState:
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    return TrainState(network, AdamState(), LRSchedule(schedule), seed, batch_size,
                      best_params={k: v.copy() for k, v in network.state_arrays().items()},
                      augment_policy=augment_policy)


def evaluate(network: Network, data: LabeledDataset, batch_size: int = 1000) -> Tuple[float, float]:
    """Mean cross-entropy and error rate with dropout and augmentation off."""
    if len(data) == 0:
        return math.nan, math.nan
    total_loss = 0.0
    wrong = 0
    with T.no_grad():
        for x, y in batches(data, batch_size):
            logits = network.forward(x, training=False)
            total_loss += T.softmax_cross_entropy(logits, y).item() * len(y)
            wrong += int(np.sum(np.argmax(logits.data, axis=1) != y))
    return total_loss / len(data), wrong / len(data)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def append_metrics(path, rows: List[dict]) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k])
                             for k in METRIC_FIELDS})


def fit(network: Network, train: LabeledDataset, val: LabeledDataset, schedule: ScheduleSpec,
        epochs: int, seed: int = 0, batch_size: int = 512,
        augment_policy: Optional[AugmentPolicy] = None, state: Optional[TrainState] = None,
        checkpoint_path=None, metrics_path=None,
        on_epoch: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Train until ``state.epoch == epochs`` and return the final state.

    Pass a loaded ``state`` to resume; each epoch draws its randomness from
    ``(seed, epoch)``, so a resumed run continues exactly like an
    uninterrupted one.
    """
    if state is not None:
        network = state.network
    if tuple(train.input_shape) != tuple(network.spec.input_shape):
        raise ConfigurationError(
            f"network expects inputs {network.spec.input_shape}, data has {train.input_shape}")
    if state is None:
        state = new_train_state(network, schedule, seed, batch_size, augment_policy)
    params = network.parameters()
    n_batches = num_batches(len(train), state.batch_size)

    while state.epoch < epochs:
        epoch = state.epoch
        start = time.perf_counter()
        rng = _epoch_rng(state.seed, epoch)
        lr_at_start = state.schedule.lr
        loss_sum = 0.0
        for b, (x, y) in enumerate(batches(train, state.batch_size, shuffle=True, rng=rng)):
            if state.augment_policy is not None:
                x = augment(x, state.augment_policy, rng)
            for p in params.values():
                p.grad = None
            loss = T.softmax_cross_entropy(network.forward(x, training=True, rng=rng), y)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, batch {b}")
            T.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adam_step(params, grads, state.adam, state.schedule.lr, batch_index=b)
            state.schedule.step_batch()
            loss_sum += value * len(y)
        val_loss, val_error = evaluate(network, val)
        if val_error < state.best_val_error:
            state.best_val_error = val_error
            state.best_epoch = epoch
            state.best_params = {k: v.copy() for k, v in network.state_arrays().items()}
        state.schedule.end_epoch(val_error)
        state.epoch = epoch + 1
        row = {
            "epoch": epoch, "batch_count": n_batches, "lr": lr_at_start,
            "train_loss": loss_sum / len(train), "val_loss": val_loss, "val_error": val_error,
            "wall_seconds": time.perf_counter() - start,
        }
        state.history.append(row)
        logger.info("epoch %d lr %.3e train_loss %.4f val_loss %.4f val_error %.4f (%.1fs)",
                    epoch, lr_at_start, row["train_loss"], val_loss, val_error, row["wall_seconds"])
        if metrics_path is not None:
            append_metrics(metrics_path, [row])
        if checkpoint_path is not None:
            checkpoint_save(state, checkpoint_path)
        if on_epoch is not None:
            on_epoch(row)
    return state


def deterministic_history(history: List[dict]) -> List[tuple]:
    """History rows without wall-clock timings, for reproducibility comparisons."""
    return [tuple(row[k] for k in METRIC_FIELDS if k != "wall_seconds") for row in history]


# --------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"DFZCKPT\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


def checkpoint_save(state: TrainState, path) -> None:
    net = state.network
    arrays: List[Tuple[str, np.ndarray]] = []
    for name, arr in net.state_arrays().items():
        arrays.append((f"params/{name}", arr))
    for name in sorted(state.adam.m):
        arrays.append((f"adam_m/{name}", state.adam.m[name]))
        arrays.append((f"adam_v/{name}", state.adam.v[name]))
    for name in sorted(state.best_params):
        arrays.append((f"best/{name}", state.best_params[name]))
    meta = {
        "spec": net.spec.serialize(),
        "seed": state.seed,
        "batch_size": state.batch_size,
        "epoch": state.epoch,
        "best_val_error": state.best_val_error,
        "best_epoch": state.best_epoch,
        "history": state.history,
        "adam": {"t": state.adam.t, "beta1": state.adam.beta1, "beta2": state.adam.beta2,
                 "eps": state.adam.eps},
        "schedule_spec": state.schedule.spec.to_dict(),
        "schedule": state.schedule.state_dict(),
        "augment": asdict(state.augment_policy) if state.augment_policy is not None else None,
    }
    manifest = {"arrays": [[name, list(arr.shape)] for name, arr in arrays], "meta": meta}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def checkpoint_load(path) -> TrainState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, mlen = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = _HEADER.size
    if len(raw) < offset + mlen:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[offset:offset + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from None
    offset += mlen
    expected = offset + 8 * sum(int(np.prod(shape)) for _, shape in manifest["arrays"])
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw) - offset} bytes, expected {expected - offset}")
    arrays = {}
    for name, shape in manifest["arrays"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count

    meta = manifest["meta"]
    network = build_network(parse_network_spec(meta["spec"]), seed=0)
    network.load_arrays({k[len("params/"):]: v for k, v in arrays.items() if k.startswith("params/")})
    a = meta["adam"]
    adam = AdamState(
        m={k[len("adam_m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")},
        t=a["t"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
    )
    spec = ScheduleSpec.from_dict(meta["schedule_spec"])
    return TrainState(
        network=network, adam=adam, schedule=LRSchedule.from_state(spec, meta["schedule"]),
        seed=meta["seed"], batch_size=meta["batch_size"], epoch=meta["epoch"],
        best_val_error=meta["best_val_error"], best_epoch=meta["best_epoch"],
        best_params={k[len("best/"):]: v.copy() for k, v in arrays.items() if k.startswith("best/")},
        history=meta["history"],
        augment_policy=AugmentPolicy(**meta["augment"]) if meta["augment"] else None,
    )
