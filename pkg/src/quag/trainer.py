"""AdamW optimization, the round-robin multi-task training loop, and
checkpoint persistence.

A training run is deterministic in (config, dataset): parameter init, batch
order, and optimizer arithmetic all derive from the config seed, so identical
runs produce bit-identical checkpoints and a resumed run continues exactly
where the uninterrupted one would be.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from quag.data import DatasetManifest, EpisodeRecord
from quag.losses import TASKS, LossBundle, caption_loss, retrieval_loss, segmentation_loss, total_loss
from quag.model import ModelConfig, QuagParams, forward_batch
from quag.tensor import Tensor

__all__ = [
    "AdamW",
    "TrainSchedule",
    "TaskLoaders",
    "NonFiniteLossError",
    "CheckpointError",
    "batch_loss",
    "train_step",
    "round_robin_epoch",
    "train",
    "TrainResult",
    "save_checkpoint",
    "load_checkpoint",
    "load_params_for_eval",
]

CHECKPOINT_MAGIC = b"QGCK"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    """A loss or gradient stopped being finite; training aborts."""


class CheckpointError(ValueError):
    pass


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Parameters without a gradient this step are treated as having a zero
    gradient, so moment decay and weight decay apply uniformly every step.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    @classmethod
    def for_model(cls, model: QuagParams) -> "AdamW":
        cfg = model.config
        return cls(model.named_parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                   eps=cfg.eps, weight_decay=cfg.weight_decay)

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise NonFiniteLossError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * update - self.lr * self.weight_decay * p.data


@dataclass
class TrainSchedule:
    """Round-robin plan: the fixed task cycle and per-epoch iteration count."""

    iterations_per_epoch: int
    epochs: int
    lam: float
    batch_size: int
    seed: int
    task_cycle: tuple[str, ...] = TASKS

    def task_at(self, iteration: int) -> str:
        return self.task_cycle[iteration % len(self.task_cycle)]

    @classmethod
    def for_dataset(cls, config: ModelConfig, n_episodes: int) -> "TrainSchedule":
        n_batches = max(1, -(-n_episodes // config.batch_size))
        return cls(
            iterations_per_epoch=len(TASKS) * n_batches,
            epochs=config.epochs,
            lam=config.lam,
            batch_size=config.batch_size,
            seed=config.seed,
        )


class TaskLoaders:
    """Deterministic per-(epoch, task) batch streams that wrap around."""

    def __init__(self, episodes: Sequence[EpisodeRecord], batch_size: int, seed: int):
        if not episodes:
            raise ValueError("cannot build loaders from an empty episode list")
        self.episodes = list(episodes)
        self.batch_size = batch_size
        self.seed = seed

    def epoch_batches(self, task: str, epoch: int) -> list[list[EpisodeRecord]]:
        task_idx = TASKS.index(task)
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, epoch, task_idx)))
        order = rng.permutation(len(self.episodes))
        return [
            [self.episodes[j] for j in order[i:i + self.batch_size]]
            for i in range(0, len(order), self.batch_size)
        ]


def batch_loss(episodes: Sequence[EpisodeRecord], model: QuagParams, task: str,
               lam: float, rng: Optional[np.random.Generator] = None) -> LossBundle:
    """One round-robin iteration's objective on a batch of episodes."""
    outputs, msp_loss = forward_batch(episodes, model, task, rng)
    if task == "ret":
        task_l = retrieval_loss([o.span for o in outputs], [ep.moment for ep in episodes])
    elif task == "seg":
        dists = [d for o in outputs for d in o.step_dists]
        targets = [t for o in outputs for t in o.step_targets]
        masks = [m for o in outputs for m in o.step_masks]
        task_l = segmentation_loss(dists, targets, masks)
    elif task == "cap":
        logits = [l for o in outputs for l in o.caption_logits]
        targets = [t for o in outputs for t in o.caption_targets]
        task_l = caption_loss(logits, targets)
    else:
        raise ValueError(f"unknown task {task!r}")
    return total_loss(task, task_l, msp_loss, lam)


def train_step(episodes: Sequence[EpisodeRecord], model: QuagParams, optimizer: AdamW,
               task: str, lam: float, rng: Optional[np.random.Generator] = None) -> LossBundle:
    model.zero_grads()
    bundle = batch_loss(episodes, model, task, lam, rng)
    bundle.total.backward()
    optimizer.step()
    return bundle


def round_robin_epoch(model: QuagParams, loaders: TaskLoaders, schedule: TrainSchedule,
                      optimizer: AdamW, epoch: int,
                      on_iteration: Optional[Callable[[int, LossBundle], None]] = None,
                      ) -> dict[str, float]:
    """Cycle ret -> seg -> cap, one batch per iteration; returns per-task means."""
    streams = {task: loaders.epoch_batches(task, epoch) for task in schedule.task_cycle}
    cursors = {task: 0 for task in schedule.task_cycle}
    sums = {task: 0.0 for task in schedule.task_cycle}
    counts = {task: 0 for task in schedule.task_cycle}
    drop_rng = np.random.default_rng(np.random.SeedSequence((schedule.seed, epoch, 997))) \
        if model.config.dropout > 0 else None
    for i in range(schedule.iterations_per_epoch):
        task = schedule.task_at(i)
        batches = streams[task]
        batch = batches[cursors[task] % len(batches)]
        cursors[task] += 1
        bundle = train_step(batch, model, optimizer, task, schedule.lam, drop_rng)
        sums[task] += bundle.task_loss.item()
        counts[task] += 1
        if on_iteration is not None:
            on_iteration(i, bundle)
    return {task: sums[task] / max(1, counts[task]) for task in schedule.task_cycle}


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config digest, then named f32 entries

def _checkpoint_entries(model: QuagParams, optimizer: AdamW, epoch: int,
                        ) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters().items():
        entries.append((name, p.data))
    for name in model.named_parameters():
        entries.append((f"opt.m.{name}", optimizer.m[name]))
        entries.append((f"opt.v.{name}", optimizer.v[name]))
    entries.append(("trainer.step", np.asarray([optimizer.t], dtype=np.float32)))
    entries.append(("trainer.epoch", np.asarray([epoch], dtype=np.float32)))
    return entries


def save_checkpoint(path: Path, config: ModelConfig, model: QuagParams,
                    optimizer: AdamW, epoch: int) -> None:
    digest = config.digest().encode("ascii")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(digest))
    blob += digest
    entries = _checkpoint_entries(model, optimizer, epoch)
    blob += struct.pack("<I", len(entries))
    for name, arr in entries:
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        for extent in arr.shape:
            blob += struct.pack("<I", extent)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def _read_checkpoint(path: Path) -> tuple[str, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version, digest_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    try:
        digest = raw[offset:offset + digest_len].decode("ascii")
        offset += digest_len
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
            offset += 4 * rank
            n_values = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n_values, offset=offset).copy()
            offset += 4 * n_values
            entries[name] = arr.reshape(shape)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint: {exc}") from exc
    return digest, entries


def load_checkpoint(path: Path, config: ModelConfig, model: QuagParams,
                    optimizer: Optional[AdamW] = None) -> int:
    """Restore parameters (and optimizer state); returns completed epochs."""
    digest, entries = _read_checkpoint(path)
    if digest != config.digest():
        raise CheckpointError(
            f"{path}: checkpoint was written for a different config "
            f"(digest {digest[:12]}.. != {config.digest()[:12]}..)"
        )
    registry = model.named_parameters()
    for name, p in registry.items():
        if name not in entries:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if entries[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {entries[name].shape}, "
                f"expected {p.data.shape}"
            )
        p.data = entries[name].astype(np.float32)
    if optimizer is not None:
        for name in registry:
            optimizer.m[name] = entries[f"opt.m.{name}"].astype(np.float32)
            optimizer.v[name] = entries[f"opt.v.{name}"].astype(np.float32)
        optimizer.t = int(entries["trainer.step"][0])
    return int(entries["trainer.epoch"][0])


def load_params_for_eval(path: Path, config: ModelConfig) -> QuagParams:
    model = QuagParams(config)
    load_checkpoint(path, config, model)
    return model


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    config_path: Path
    epochs_run: int
    final_means: dict[str, float] = field(default_factory=dict)


def train(config: ModelConfig, manifest: DatasetManifest, out_dir: Path,
          resume_from: Optional[Path] = None,
          on_epoch: Optional[Callable[[int, dict[str, float]], None]] = None) -> TrainResult:
    """Initialize from the seed, run scheduled epochs, write checkpoint + log.

    The metrics log holds one JSON object per iteration. On a non-finite loss
    or gradient the run aborts and the last epoch-end checkpoint stays on
    disk as the most recent good state.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes = manifest.load_episodes()
    schedule = TrainSchedule.for_dataset(config, len(episodes))
    loaders = TaskLoaders(episodes, config.batch_size, config.seed)
    model = QuagParams(config)
    optimizer = AdamW.for_model(model)

    start_epoch = 0
    if resume_from is not None:
        start_epoch = load_checkpoint(resume_from, config, model, optimizer)

    config_path = out_dir / "config.json"
    config_path.write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n",
                           encoding="utf-8")
    checkpoint_path = out_dir / "checkpoint.qgck"
    log_path = out_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None and log_path.exists() else "w"

    means: dict[str, float] = {}
    with open(log_path, mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, schedule.epochs):
            def record(i: int, bundle: LossBundle, _epoch=epoch) -> None:
                line = {
                    "iteration": _epoch * schedule.iterations_per_epoch + i,
                    "epoch": _epoch,
                    "task": bundle.task,
                    "task_loss": bundle.task_loss.item(),
                    "msp_loss": bundle.msp_loss.item(),
                    "total": bundle.total.item(),
                }
                log.write(json.dumps(line) + "\n")

            means = round_robin_epoch(model, loaders, schedule, optimizer, epoch, record)
            log.flush()
            save_checkpoint(checkpoint_path, config, model, optimizer, epoch + 1)
            if on_epoch is not None:
                on_epoch(epoch, means)
    if not checkpoint_path.exists():
        save_checkpoint(checkpoint_path, config, model, optimizer, start_epoch)
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        config_path=config_path,
        epochs_run=schedule.epochs - start_epoch,
        final_means=means,
    )
