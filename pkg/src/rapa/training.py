"""Training recipe: SGD with lr-coupled weight decay, step-annealed learning
rate with warm-up, mirror/brightness augmentation, CIFAR-10 binary
ingestion, and epoch-level train/eval loops.

Determinism contract: given (seed, config, dataset bytes) every metric is
bit-reproducible. Each image in an epoch draws from its own rng stream
derived from (run stream, epoch, position), so results do not depend on
worker scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .network import Network, predict_majority
from .numcore import SeededRng, ShapeError

__all__ = [
    "DatasetError",
    "TrainConfig",
    "DatasetSplit",
    "RECORD_BYTES",
    "read_batch_file",
    "load_cifar10",
    "augment",
    "lr_at_epoch",
    "sgd_step",
    "train_epoch",
    "evaluate",
]

RECORD_BYTES = 3073  # 1 label byte + 3 channel-planar 32x32 pixel planes
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"

# Conservative envelope of mean-subtracted pixel values; brightness shifts
# and adversarial perturbations are clamped to it.
PIXEL_RANGE = (-1.0, 1.0)


class DatasetError(ValueError):
    """Malformed or missing dataset input."""


@dataclass
class TrainConfig:
    lr: float = 0.005
    lr_gamma: float = 0.5
    warmup_epochs: int = 1
    warmup_divisor: float = 50.0
    anneal_every: int = 25
    weight_decay: float = 1e-4  # multiplied by the current learning rate
    batch_size: int = 10
    epochs: int = 30
    augment: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 < self.lr_gamma <= 1):
            raise ValueError("lr_gamma must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise ValueError("epoch counts must be >= 0")


@dataclass
class DatasetSplit:
    images: np.ndarray  # (N, 32, 32, 3) float32, mean-subtracted
    labels: np.ndarray  # (N,) int64
    name: str

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError("images/labels length mismatch")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, n: int) -> "DatasetSplit":
        if n <= 0 or n >= len(self):
            return self
        return DatasetSplit(self.images[:n], self.labels[:n], f"{self.name}[:{n}]")


def read_batch_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch file into (labels uint8, pixels uint8 (N, 3072)).

    Pixels stay in the on-disk channel-planar order, so re-serializing
    `label + pixels` reproduces the input bytes.
    """
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as e:
        raise DatasetError(f"{path}: {e}") from e
    n, rem = divmod(raw.size, RECORD_BYTES)
    if rem != 0:
        raise DatasetError(
            f"{path}: truncated record at byte offset {n * RECORD_BYTES} "
            f"(file size {raw.size}, record size {RECORD_BYTES})"
        )
    if n == 0:
        raise DatasetError(f"{path}: contains no records")
    records = raw.reshape(n, RECORD_BYTES)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DatasetError(
            f"{path}: label {int(labels[bad[0]])} >= 10 at byte offset "
            f"{int(bad[0]) * RECORD_BYTES}"
        )
    return labels, records[:, 1:]


def _to_images(pixels: np.ndarray) -> np.ndarray:
    n = pixels.shape[0]
    planes = pixels.reshape(n, 3, 32, 32)
    return (planes.transpose(0, 2, 3, 1).astype(np.float32)) / np.float32(255.0)


def load_cifar10(path: str) -> tuple[DatasetSplit, DatasetSplit]:
    """Load the binary-format dataset from a directory.

    Pixels are scaled to [0, 1] and the per-pixel train-set mean is
    subtracted from both splits.
    """
    train_parts = []
    for name in TRAIN_FILES:
        full = os.path.join(path, name)
        if not os.path.exists(full):
            raise DatasetError(f"missing batch file {full}")
        train_parts.append(read_batch_file(full))
    test_full = os.path.join(path, TEST_FILE)
    if not os.path.exists(test_full):
        raise DatasetError(f"missing batch file {test_full}")
    test_labels, test_pixels = read_batch_file(test_full)

    train_labels = np.concatenate([p[0] for p in train_parts]).astype(np.int64)
    train_images = _to_images(np.concatenate([p[1] for p in train_parts]))
    test_images = _to_images(test_pixels)
    mean = train_images.mean(axis=0)
    return (
        DatasetSplit(train_images - mean, train_labels, "train"),
        DatasetSplit(test_images - mean, test_labels.astype(np.int64), "test"),
    )


def augment(image: np.ndarray, rng: SeededRng) -> np.ndarray:
    """Mirror with probability 1/2, then a global brightness shift drawn
    uniformly from [-0.1, 0.1], clamped to the valid pixel range."""
    out = image
    if rng.random() < 0.5:
        out = out[:, ::-1, :]
    delta = rng.uniform(-0.1, 0.1)
    return np.clip(out + np.asarray(delta, dtype=image.dtype), *PIXEL_RANGE)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Warm-up at lr/divisor, then step anneal by lr_gamma every 25 epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.warmup_epochs:
        return cfg.lr / cfg.warmup_divisor
    steps = (epoch - cfg.warmup_epochs) // cfg.anneal_every
    return cfg.lr * cfg.lr_gamma**steps


def _decays(name: str) -> bool:
    return not (name.endswith(".bias") or name.endswith(".beta"))


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    decay_coeff: float,
) -> None:
    """In-place w <- w - lr*(g + decay_coeff*lr*w); biases and pooling betas
    are excluded from decay."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        step = lr * g
        if decay_coeff and _decays(name):
            step = step + (decay_coeff * lr * lr) * p
        p -= step.astype(p.dtype, copy=False)


def _resolve_workers(workers: int | None) -> int:
    if workers is None or workers <= 0:
        return min(4, os.cpu_count() or 1)
    return workers


def _map_items(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def train_epoch(
    net: Network,
    data: DatasetSplit,
    cfg: TrainConfig,
    rng: SeededRng,
    epoch: int,
    workers: int | None = 1,
) -> dict[str, float]:
    """One epoch of minibatch SGD; returns train error % and mean loss.

    Per image: augment, forward in train mode (fresh partitions for the
    random scheme), softmax cross-entropy backward; gradients are averaged
    over the batch and applied once per batch.
    """
    if len(data) == 0:
        raise DatasetError("empty training split")
    workers = _resolve_workers(workers)
    lr = lr_at_epoch(cfg, epoch)
    order = rng.derive("order", epoch).permutation(len(data))
    params = net.parameters()

    def run_item(pos_idx):
        pos, idx = pos_idx
        item_rng = rng.derive("item", epoch, int(pos))
        image = data.images[idx]
        if cfg.augment:
            image = augment(image, item_rng.derive("augment"))
        pred, loss, grads, _ = net.forward_backward(
            image, int(data.labels[idx]), "train", item_rng
        )
        return pred.label == int(data.labels[idx]), loss, grads

    total_loss = 0.0
    total_correct = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = [(start + o, idx) for o, idx in enumerate(order[start : start + cfg.batch_size])]
        results = _map_items(run_item, batch, workers)
        acc: dict[str, np.ndarray] = {}
        for correct, loss, grads in results:
            total_correct += bool(correct)
            total_loss += loss
            for name, g in grads.items():
                if name in acc:
                    acc[name] += g
                else:
                    acc[name] = g.astype(np.float64, copy=True)
        scale = 1.0 / len(batch)
        for name in acc:
            acc[name] *= scale
        sgd_step(params, acc, lr, cfg.weight_decay)

    n = len(order)
    return {
        "train_err_pct": 100.0 * (1.0 - total_correct / n),
        "mean_loss": total_loss / n,
        "lr": lr,
    }


def evaluate(
    net: Network,
    data: DatasetSplit,
    rng: SeededRng,
    votes: int = 1,
    workers: int | None = 1,
) -> float:
    """Test error in percent; votes > 1 uses majority-vote prediction."""
    if len(data) == 0:
        raise DatasetError("empty evaluation split")
    workers = _resolve_workers(workers)

    def run_item(i):
        item_rng = rng.derive("eval", int(i))
        if votes > 1:
            pred = predict_majority(net, data.images[i], votes, item_rng)
        else:
            pred = net.forward(data.images[i], "test", item_rng)
        return pred.label == int(data.labels[i])

    correct = _map_items(run_item, list(range(len(data))), workers)
    return 100.0 * (1.0 - sum(correct) / len(data))
