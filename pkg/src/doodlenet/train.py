"""SGD with momentum, exponential learning-rate decay, training loop, checkpoints.

Checkpoint layout (all integers little-endian)::

    b"DDLF" | u32 version=1 | u32 meta_len | meta (UTF-8 key=value lines)
    | u32 tensor_count | per tensor: u16 name_len, name, u8 dtype, u8 rank,
      rank x u32 extents, payload

dtype 0 is float32 and 1 is float64. Optimizer momentum buffers are stored as
tensors named ``momentum/<parameter name>``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SegDataset, SegSample, augment
from .model import DooDLeNet, ModelConfig, segmentation_loss
from .nn import Module

log = logging.getLogger(__name__)

MAGIC = b"DDLF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    gamma: float = 0.95
    crop: int | None = None
    decay_norm: bool = True
    seed: int = 0

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


@dataclass
class SGD:
    """Momentum SGD with weight decay folded into the gradient.

    ``v <- momentum * v + (g + weight_decay * w)``, ``w <- w - lr * v``.
    """

    params: list
    momentum: float = 0.9
    weight_decay: float = 0.0005
    no_decay: set = field(default_factory=set)
    buffers: list = field(default_factory=list)

    def __post_init__(self):
        if not self.buffers:
            self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step(self.params, self.buffers, lr, self.momentum, self.weight_decay, self.no_decay)


def sgd_step(params, buffers, lr: float, momentum: float, weight_decay: float,
             no_decay=frozenset()) -> None:
    for i, (p, v) in enumerate(zip(params, buffers)):
        if p.grad is None:
            raise ValueError(f"missing gradient for trainable parameter #{i}"
                             + (f" ({p.name})" if p.name else ""))
        g = p.grad
        if weight_decay and i not in no_decay:
            g = g + weight_decay * p.data
        v *= momentum
        v += g
        p.data -= lr * v


def lr_at_epoch(epoch: int, lr0: float = 0.01, gamma: float = 0.95) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * gamma ** epoch


def make_optimizer(model: Module, cfg: TrainConfig) -> SGD:
    named = list(model.named_parameters())
    for name, p in named:
        p.name = name
    no_decay = set()
    if not cfg.decay_norm:
        no_decay = {i for i, (name, _) in enumerate(named) if name.endswith((".gamma", ".beta"))}
    return SGD([p for _, p in named], cfg.momentum, cfg.weight_decay, no_decay)


def stack_batch(samples: list[SegSample], dtype=np.float32):
    color = np.stack([s.color for s in samples]).astype(dtype, copy=False)
    thermal = np.stack([s.thermal for s in samples]).astype(dtype, copy=False)
    labels = np.stack([s.labels for s in samples])
    return color, thermal, labels


def train_epoch(model: DooDLeNet, samples: list[SegSample], optimizer: SGD,
                rng: np.random.Generator, lr: float, batch_size: int = 8,
                crop: int | None = None, epoch: int = 0, step_losses: list | None = None) -> dict:
    """One pass over shuffled, augmented batches. Returns mean loss terms."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    cfg = model.config
    order = rng.permutation(len(samples))
    sums: dict[str, float] = {}
    steps = 0
    for b, start in enumerate(range(0, len(order), batch_size)):
        batch = [augment(samples[i], rng, crop) for i in order[start:start + batch_size]]
        color, thermal, labels = stack_batch(batch, cfg.np_dtype)
        out = model(color, thermal)
        total, terms = segmentation_loss(out, labels, cfg.aux_weight, cfg.variant)
        values = {"loss": total.item(), **{k: t.item() for k, t in terms.items()}}
        for name, value in values.items():
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite {name} loss at epoch {epoch}, batch {b}")
        model.zero_grad()
        total.backward()
        optimizer.step(lr)
        steps += 1
        if step_losses is not None:
            step_losses.append(values["loss"])
        for name, value in values.items():
            sums[name] = sums.get(name, 0.0) + value
    stats = {name: s / max(steps, 1) for name, s in sums.items()}
    stats["steps"] = steps
    return stats


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, epoch)))


HISTORY_FIELDS = ("epoch", "lr", "loss", "final", "aux_color", "aux_thermal", "val_miou", "steps")


def fit(model: DooDLeNet, data: SegDataset, cfg: TrainConfig, out_path: str,
        resume: str | None = None, stop_after: int | None = None) -> dict:
    """Train for ``cfg.epochs`` epochs, checkpointing the final and best-val models.

    Writes ``out_path`` (final), ``<stem>.best.ddlf`` and ``<stem>.history.csv``.
    ``stop_after`` ends the run early after that many epochs (used to emulate
    an interruption); ``resume`` continues from a checkpoint with buffers.
    """
    from .evaluate import evaluate_split  # circular at import time

    optimizer = make_optimizer(model, cfg)
    train_samples = data.samples("train")
    history: list[dict] = []
    start_epoch, best = 0, -1.0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt.params)
        for name, buf in zip((n for n, _ in model.named_parameters()), optimizer.buffers):
            key = f"momentum/{name}"
            if key not in ckpt.buffers:
                raise CheckpointError(f"{resume}: no optimizer buffer for {name}")
            buf[...] = ckpt.buffers[key]
        start_epoch = ckpt.epoch
        history = _read_history(_sibling(out_path, ".history.csv"))[:start_epoch]
        best = max((h["val_miou"] for h in history), default=-1.0)

    step_losses: list[float] = []
    stem_best = _sibling(out_path, ".best.ddlf")
    for epoch in range(start_epoch, cfg.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        lr = lr_at_epoch(epoch, cfg.lr, cfg.gamma)
        stats = train_epoch(model, train_samples, optimizer, epoch_rng(cfg.seed, epoch), lr,
                            cfg.batch_size, cfg.crop, epoch, step_losses)
        val = evaluate_split(model, data, "val", "all")
        row = {"epoch": epoch + 1, "lr": lr, "loss": stats["loss"],
               "final": stats.get("final", float("nan")),
               "aux_color": stats.get("aux_color", float("nan")),
               "aux_thermal": stats.get("aux_thermal", float("nan")),
               "val_miou": val.miou, "steps": stats["steps"]}
        history.append(row)
        log.info("epoch %d lr %.6f loss %.4f val mIoU %.4f", epoch + 1, lr, stats["loss"], val.miou)
        if val.miou > best:
            best = val.miou
            save_checkpoint(stem_best, model, epoch + 1, extra={"val_miou": repr(val.miou)})
        save_checkpoint(out_path, model, epoch + 1, optimizer)
        _write_history(_sibling(out_path, ".history.csv"), history)
    return {"history": history, "step_losses": step_losses, "best_val_miou": best}


def _sibling(path: str, suffix: str) -> str:
    stem = path[:-5] if path.endswith(".ddlf") else path
    return stem + suffix


def _write_history(path: str, history: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for h in history:
        w.writerow([h["epoch"], repr(h["lr"]), repr(h["loss"]), repr(h["final"]),
                    repr(h["aux_color"]), repr(h["aux_thermal"]), repr(h["val_miou"]), h["steps"]])
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())


def _read_history(path: str) -> list[dict]:
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("epoch", "steps") else float(v)) for k, v in r.items()})
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    epoch: int
    buffers: dict
    meta: dict


def save_checkpoint(path: str, model: DooDLeNet, epoch: int, optimizer: SGD | None = None,
                    extra: dict | None = None) -> None:
    meta = model.config.to_text() + f"epoch={epoch}\n"
    for k, v in (extra or {}).items():
        meta += f"{k}={v}\n"
    tensors = list(model.state_dict().items())
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        tensors += [(f"momentum/{n}", b) for n, b in zip(names, optimizer.buffers)]
    meta_b = meta.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a DDLF checkpoint)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta_text = take(meta_len).decode("utf-8")
    meta = dict(line.split("=", 1) for line in meta_text.splitlines() if "=" in line)
    (count,) = struct.unpack("<I", take(4))
    params, buffers = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        arr = np.frombuffer(take(int(np.prod(shape)) * dt.itemsize), dtype=dt).reshape(shape)
        arr = arr.astype(dt.newbyteorder("="), copy=True)
        (buffers if name.startswith("momentum/") else params)[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    config = ModelConfig.from_text(meta_text)
    return Checkpoint(config, params, int(meta.get("epoch", 0)), buffers, meta)


def model_from_checkpoint(path: str, config: ModelConfig | None = None) -> DooDLeNet:
    """Rebuild a model from a checkpoint; a differing ``config`` surfaces as a shape error."""
    ckpt = load_checkpoint(path)
    model = DooDLeNet(config or ckpt.config)
    model.load_state_dict(ckpt.params)
    return model
