"""Adam training loop, learning-rate schedule and checkpoints.

Checkpoint layout (little-endian)::

    b"CFCK" | u8 version | u32 header length | UTF-8 JSON header | named tensors

The header records the model and training configuration, the run seed, the
held-out fold, completed epochs and the Adam step counter. Tensors are the
trainable parameters (``param/...``), the frozen backbone (``backbone/...``)
and the Adam moments (``adam_m/...``, ``adam_v/...``).

Batch order for epoch ``e`` comes from the sub-stream ``(seed, EPOCH, e)``,
so resuming after ``e`` epochs continues exactly where an uninterrupted run
would be.
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, PairSample, stack
from .errors import ConfigurationError, ContractError, IncompatibleError
from .network import CFILModel, ModelConfig, loss
from .rng import ALGORITHM, STREAM_EPOCH, make_rng
from .serialization import FormatError, read_named, write_named
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1
LOG_HEADER = "epoch,lr,mean_loss,train_acc"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    lr: float = 1e-3
    lr_after: float = 5e-4
    decay_after_epoch: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")

    def lr_for(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr if epoch <= self.decay_after_epoch else self.lr_after


@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items()),
            OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items()),
            0,
        )


def adam_step(params, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, grads=None) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's ``.grad``; a trainable tensor
    without a gradient is a caller error.
    """
    missing = [k for k, p in params.items() if (grads[k] if grads is not None else p.grad) is None]
    if missing:
        raise ContractError(f"no gradient for trainable tensor(s): {', '.join(missing)}")
    state.t += 1
    t = state.t
    for k, p in params.items():
        g = grads[k] if grads is not None else p.grad
        dt = p.data.dtype.type
        m = state.m[k]
        v = state.v[k]
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        m_hat = m / dt(1 - beta1**t)
        v_hat = v / dt(1 - beta2**t)
        p.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    mean_loss: float
    train_acc: float

    def row(self) -> str:
        return f"{self.epoch},{self.lr!r},{self.mean_loss!r},{self.train_acc!r}"


@dataclass
class TrainState:
    model: CFILModel
    adam: AdamState
    config: TrainConfig
    fold: int
    epochs_done: int = 0
    history: list[EpochLog] = field(default_factory=list)


def _batch(pairs: list[PairSample], dtype) -> tuple[Tensor, Tensor, np.ndarray]:
    parents, children, labels = stack(pairs)
    return Tensor(parents.astype(dtype)), Tensor(children.astype(dtype)), labels


def run_epoch(state: TrainState, train_pairs: list[PairSample]) -> EpochLog:
    cfg = state.config
    epoch = state.epochs_done + 1
    lr = cfg.lr_for(epoch)
    order = make_rng(cfg.seed, STREAM_EPOCH, epoch).permutation(len(train_pairs))
    params = state.model.params
    total_loss = 0.0
    correct = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = [train_pairs[i] for i in order[start : start + cfg.batch_size]]
        parent, child, labels = _batch(batch, state.model.dtype)
        for p in params.values():
            p.grad = None
        probs = state.model(parent, child)
        value = loss(probs, labels)
        value.backward()
        adam_step(params, state.adam, lr, cfg.beta1, cfg.beta2, cfg.eps)
        total_loss += value.item() * len(batch)
        correct += int(np.sum((probs.data[:, 1] >= 0.5) == (labels == 1)))
    state.epochs_done = epoch
    entry = EpochLog(epoch, lr, total_loss / len(order), correct / len(order))
    state.history.append(entry)
    return entry


def new_state(model_config: ModelConfig, config: TrainConfig, fold: int) -> TrainState:
    model = CFILModel(model_config, seed=config.seed)
    return TrainState(model, AdamState.for_params(model.params), config, fold)


def train(
    dataset: Dataset,
    fold_k: int,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    state: TrainState | None = None,
    train_pairs: list[PairSample] | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainState:
    """Train on every fold except ``fold_k`` until ``config.epochs`` epochs are done.

    Pass ``state`` (e.g. from :func:`load_checkpoint`) to continue a run.
    ``train_pairs`` overrides the training split, e.g. to overfit a subset.
    """
    if train_pairs is None:
        train_pairs, _ = dataset.select_split(fold_k)
    if not train_pairs:
        raise ConfigurationError(f"training split for fold {fold_k} is empty")
    if state is None:
        state = new_state(model_config or ModelConfig(), config, fold_k)
    while state.epochs_done < config.epochs:
        entry = run_epoch(state, train_pairs)
        log.info("epoch %d lr %g loss %.6f acc %.4f", entry.epoch, entry.lr, entry.mean_loss, entry.train_acc)
        if on_epoch is not None:
            on_epoch(entry)
    return state


def predict(model: CFILModel, pairs: list[PairSample], batch_size: int = 64) -> np.ndarray:
    """Positive-class probability for each pair."""
    scores = []
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            parent, child, _ = _batch(pairs[start : start + batch_size], model.dtype)
            scores.append(model(parent, child).data[:, 1].astype(np.float64))
    return np.concatenate(scores) if scores else np.zeros(0)


def log_text(history: list[EpochLog]) -> str:
    return "\n".join([LOG_HEADER, *(e.row() for e in history)]) + "\n"


def parse_log(text: str) -> list[EpochLog]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != LOG_HEADER:
        raise FormatError(f"training log must start with {LOG_HEADER!r}")
    out = []
    for ln in lines[1:]:
        e, lr, ml, acc = ln.split(",")
        out.append(EpochLog(int(e), float(lr), float(ml), float(acc)))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _header(state: TrainState) -> dict:
    return {
        "format": "cfil-checkpoint",
        "model": state.model.config.to_dict(),
        "train": asdict(state.config),
        "seed": state.config.seed,
        "model_seed": state.model.seed,
        "fold": state.fold,
        "epochs_done": state.epochs_done,
        "adam_step": state.adam.t,
        "rng": {"algorithm": ALGORITHM, "epoch_stream_position": state.epochs_done},
        "history": [asdict(e) for e in state.history],
    }


def checkpoint_bytes(state: TrainState) -> bytes:
    header = json.dumps(_header(state), sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict(state.model.state())
    for k in state.model.params:
        tensors[f"adam_m/{k}"] = state.adam.m[k]
        tensors[f"adam_v/{k}"] = state.adam.v[k]
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    write_named(buf, tensors)
    return buf.getvalue()


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    data = checkpoint_bytes(state)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def parse_checkpoint(data: bytes) -> TrainState:
    fp = io.BytesIO(data)
    if fp.read(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    raw = fp.read(1)
    if len(raw) != 1:
        raise FormatError("truncated checkpoint: missing version byte")
    version = raw[0]
    if version != CHECKPOINT_VERSION:
        raise IncompatibleError(
            f"checkpoint format version {version} is not supported (this build reads version {CHECKPOINT_VERSION})"
        )
    raw = fp.read(4)
    if len(raw) != 4:
        raise FormatError("truncated checkpoint: missing header length")
    (length,) = struct.unpack("<I", raw)
    raw = fp.read(length)
    if len(raw) != length:
        raise FormatError("truncated checkpoint: header cut short")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from None
    tensors = read_named(fp)
    if fp.read(1):
        raise FormatError("trailing bytes after checkpoint tensors")

    model_config = ModelConfig.from_dict(header["model"])
    config = TrainConfig(**header["train"])
    model = CFILModel(model_config, seed=header["model_seed"])
    model.load_state(tensors)
    adam = AdamState(t=int(header["adam_step"]))
    for k, p in model.params.items():
        for moment, store in (("adam_m", adam.m), ("adam_v", adam.v)):
            arr = tensors.get(f"{moment}/{k}")
            if arr is None or arr.shape != p.shape:
                raise IncompatibleError(f"{moment}/{k}: missing or shaped unlike parameter {p.shape}")
            store[k] = np.array(arr, dtype=p.dtype)
    history = [EpochLog(**e) for e in header.get("history", [])]
    return TrainState(model, adam, config, int(header["fold"]), int(header["epochs_done"]), history)


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    return parse_checkpoint(Path(path).read_bytes())
