"""SGD training loop, evaluation, and deterministic checkpointing.

Checkpoint container: 8-byte magic ``DTRVCKPT``, little-endian u32 version,
length-prefixed JSON metadata (config text, epoch, metric history, rng
state, optimizer scalars), then named tensor records (u32 name length,
name, u8 dtype tag, u32 rank, u64 extents, raw little-endian payload).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import network
from .autograd import Tape
from .config import RunConfig, parse_config, serialize_config
from .data import Dataset, augment_batch, iter_batches
from .errors import FormatError, InputError, NumericalError
from .kernels import softmax_cross_entropy_parts

CKPT_MAGIC = b"DTRVCKPT"
CKPT_VERSION = 1

METRICS_HEADER = "epoch,lr,train_loss,train_acc,test_loss,test_top1,test_top5"


@dataclass
class MetricRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_top1: float
    test_top5: float

    def csv(self) -> str:
        return (
            f"{self.epoch},{self.lr!r},{self.train_loss!r},{self.train_acc!r},"
            f"{self.test_loss!r},{self.test_top1!r},{self.test_top5!r}"
        )


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    base_lr: float
    lr: float
    momentum: float
    weight_decay: float
    velocity: dict[str, np.ndarray]
    step_count: int = 0
    schedule: str = "cosine"
    total_epochs: int = 1


def make_optimizer(model: network.Model, lr: float, momentum: float = 0.9,
                   weight_decay: float = 5e-4, schedule: str = "cosine",
                   total_epochs: int = 1) -> OptimState:
    if lr <= 0.0:
        raise InputError(f"learning rate must be positive, got {lr}")
    velocity = {e.name: np.zeros_like(e.value) for e in model.parameters()}
    return OptimState(base_lr=lr, lr=lr, momentum=momentum, weight_decay=weight_decay,
                      velocity=velocity, schedule=schedule, total_epochs=total_epochs)


def schedule_lr(st: OptimState, epoch: int) -> float:
    """Cosine decay from the base rate toward zero over the epoch budget."""
    if st.schedule == "cosine":
        st.lr = st.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / st.total_epochs))
    else:
        st.lr = st.base_lr
    return st.lr

def sgd_step(entries, grads: dict[str, np.ndarray], st: OptimState) -> None:
    """v <- momentum*v + g (+ wd*theta for decayed tensors); theta <- theta - lr*v.

    Weight decay skips batchnorm affine parameters and all biases (their
    registry entries carry decay=False).
    """
    for e in entries:
        g = grads.get(e.name)
        if g is None:
            raise InputError(f"no gradient provided for parameter {e.name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {e.name!r}; step aborted")
        v = st.velocity[e.name]
        v *= st.momentum
        v += g
        if st.weight_decay and e.decay:
            v += st.weight_decay * e.value
        e.value -= st.lr * v
    st.step_count += 1


# ---------------------------------------------------------------------------
# epochs


def train_epoch(model: network.Model, ds: Dataset, st: OptimState, rng: np.random.Generator,
                epoch: int, batch_size: int, augment_policy: str = "none") -> tuple[float, float]:
    """One pass over the training split: shuffle, augment, forward, backward,
    update. Returns (mean loss, train accuracy)."""
    schedule_lr(st, epoch)
    total_loss = 0.0
    correct = 0
    seen = 0
    for step, batch in enumerate(iter_batches(ds, batch_size, rng)):
        images = augment_batch(batch.images, rng, augment_policy)
        tape = Tape()
        logits, loss = network.loss_forward(tape, model, images, batch.labels, "training", rng)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise NumericalError(f"loss became non-finite at step {step} of epoch {epoch}")
        tape.backward(loss)
        grads = {e.name: tape.grad_for(e.value) for e in model.parameters()}
        sgd_step(model.parameters(), grads, st)
        n = len(batch.labels)
        total_loss += loss_val * n
        correct += int((network.predict(logits.value) == batch.labels).sum())
        seen += n
    return total_loss / seen, correct / seen


def top_k_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Label among the k largest logits; boundary ties go to lower indices."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def evaluate(model: network.Model, ds: Dataset, batch_size: int = 256) -> tuple[float, float, float]:
    """Inference-mode (top1, top5, mean loss) over a dataset."""
    top1 = 0
    top5 = 0
    total_loss = 0.0
    for batch in iter_batches(ds, batch_size):
        logits = network.forward_array(model, batch.images, "inference")
        loss, _ = softmax_cross_entropy_parts(logits, batch.labels)
        n = len(batch.labels)
        total_loss += loss * n
        top1 += int((network.predict(logits) == batch.labels).sum())
        top5 += int(top_k_hits(logits, batch.labels, 5).sum())
    n = len(ds)
    return top1 / n, top5 / n, total_loss / n


# ---------------------------------------------------------------------------
# checkpointing


@dataclass
class Checkpoint:
    config: RunConfig
    tensors: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    optim: dict
    rng_state: dict
    epoch: int
    history: list[dict] = field(default_factory=list)


def checkpoint_from(model: network.Model, st: OptimState, rng: np.random.Generator,
                    epoch: int, history: list[MetricRow], run_cfg: RunConfig) -> Checkpoint:
    optim = {
        "base_lr": st.base_lr, "lr": st.lr, "momentum": st.momentum,
        "weight_decay": st.weight_decay, "step_count": st.step_count,
        "schedule": st.schedule, "total_epochs": st.total_epochs,
    }
    return Checkpoint(
        config=run_cfg,
        tensors={k: v.copy() for k, v in model.state().items()},
        velocity={k: v.copy() for k, v in st.velocity.items()},
        optim=optim,
        rng_state=rng.bit_generator.state,
        epoch=epoch,
        history=[asdict(r) for r in history],
    )


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    if arr.dtype == np.float64:
        tag, dt = 0, "<f8"
    elif arr.dtype == np.float32:
        tag, dt = 1, "<f4"
    else:
        raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    fh.write(struct.pack("<B", tag))
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return raw


def _read_tensor(fh):
    head = fh.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise FormatError("truncated checkpoint while reading tensor name length")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
    (tag,) = struct.unpack("<B", _read_exact(fh, 1, f"dtype of {name!r}"))
    if tag not in (0, 1):
        raise FormatError(f"tensor {name!r} has unknown dtype tag {tag}")
    dt = "<f8" if tag == 0 else "<f4"
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name!r}"))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, f"extents of {name!r}"))
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(fh, count * (8 if tag == 0 else 4), f"payload of {name!r}")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return name, arr


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "config": serialize_config(ckpt.config),
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "rng_state": ckpt.rng_state,
        "optim": ckpt.optim,
    }
    blob = json.dumps(meta).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in sorted(ckpt.tensors.items()):
            _write_tensor(fh, name, arr)
        for name, arr in sorted(ckpt.velocity.items()):
            _write_tensor(fh, f"velocity/{name}", arr)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, "magic")
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
        try:
            meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: corrupt metadata block: {exc}") from exc
        tensors: dict[str, np.ndarray] = {}
        velocity: dict[str, np.ndarray] = {}
        while True:
            rec = _read_tensor(fh)
            if rec is None:
                break
            name, arr = rec
            if name.startswith("velocity/"):
                velocity[name[len("velocity/") :]] = arr
            else:
                tensors[name] = arr
    cfg = parse_config(meta["config"])
    return Checkpoint(
        config=cfg, tensors=tensors, velocity=velocity, optim=meta["optim"],
        rng_state=meta["rng_state"], epoch=meta["epoch"], history=meta["history"],
    )


def restore_model(ckpt: Checkpoint, model: network.Model | None = None) -> network.Model:
    """Build (or fill) a model from checkpoint tensors. Any model whose tensor
    names and shapes agree works, so a checkpoint trained at one recursion
    depth loads into a config with another."""
    if model is None:
        model = network.build_model(ckpt.config.model, seed=0)
    model.load_state(ckpt.tensors)
    return model


def restore_training(ckpt: Checkpoint):
    """Model, optimizer, and rng stream exactly as they were at save time."""
    model = restore_model(ckpt)
    o = ckpt.optim
    st = OptimState(
        base_lr=o["base_lr"], lr=o["lr"], momentum=o["momentum"], weight_decay=o["weight_decay"],
        velocity={}, step_count=o["step_count"], schedule=o["schedule"], total_epochs=o["total_epochs"],
    )
    for e in model.parameters():
        if e.name not in ckpt.velocity:
            raise FormatError(f"checkpoint is missing optimizer state for {e.name!r}")
        v = ckpt.velocity[e.name]
        if v.shape != e.value.shape:
            raise FormatError(f"optimizer state {e.name!r} has shape {v.shape}, expected {e.value.shape}")
        st.velocity[e.name] = v.copy()
    rng = np.random.default_rng(0)
    rng.bit_generator.state = ckpt.rng_state
    history = [MetricRow(**row) for row in ckpt.history]
    return model, st, rng, ckpt.epoch, history
