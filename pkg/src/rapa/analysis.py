"""Measurement instruments: cross-tile filter similarity, the analog-array
execution-time cost model, and the FGSM adversarial-robustness harness.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .network import Network, NetworkConfig, predict_majority
from .numcore import SeededRng, pearson_flagged
from .tiling import TiledKernelBank
from .training import PIXEL_RANGE, DatasetSplit

__all__ = [
    "SimilarityReport",
    "filter_similarity",
    "LayerCost",
    "CostReport",
    "analog_cost_model",
    "cost_model_from_layers",
    "fgsm_perturb",
    "snr_of",
    "AdversarialCurve",
    "adversarial_curve",
    "gap_reduction",
    "write_similarity_csv",
    "write_adversarial_csv",
]


# ---------------------------------------------------------------------------
# Filter similarity across tiles
# ---------------------------------------------------------------------------


@dataclass
class SimilarityReport:
    """Mean pairwise correlation of corresponding filters across tiles.

    correlations[c, i, j] is the Pearson correlation between the channel-c
    filter columns of tiles i and j (diagonal fixed at 1). The scalar s is
    the mean over unordered pairs and channels; degenerate (zero-variance)
    pairs enter the mean as 0 and are counted separately.
    """

    s: float
    correlations: np.ndarray  # (c_out, n_t, n_t)
    degenerate_pairs: int


def filter_similarity(bank: TiledKernelBank) -> SimilarityReport:
    if bank.n_t < 2:
        raise ValueError("filter similarity needs at least 2 tiles")
    c_out = bank.c_out
    corr = np.ones((c_out, bank.n_t, bank.n_t))
    total = 0.0
    pairs = 0
    degenerate = 0
    for c in range(c_out):
        for i in range(bank.n_t):
            for j in range(i + 1, bank.n_t):
                r, flagged = pearson_flagged(
                    bank.kernels[i].weights[:, c], bank.kernels[j].weights[:, c]
                )
                corr[c, i, j] = corr[c, j, i] = r
                total += r
                pairs += 1
                degenerate += flagged
    return SimilarityReport(s=total / pairs, correlations=corr, degenerate_pairs=degenerate)


def write_similarity_csv(reports: dict[int, SimilarityReport], path: str) -> None:
    """One row per (layer, channel, tile pair)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "channel", "tile_i", "tile_j", "corr"])
        for layer, report in sorted(reports.items()):
            c_out, n_t, _ = report.correlations.shape
            for c in range(c_out):
                for i in range(n_t):
                    for j in range(i + 1, n_t):
                        writer.writerow([layer, c, i, j, repr(float(report.correlations[c, i, j]))])


# ---------------------------------------------------------------------------
# Analog execution-time cost model
# ---------------------------------------------------------------------------


@dataclass
class LayerCost:
    name: str
    n_p: int
    k: int
    c_out: int
    n_t: int
    macs: int
    time_untiled: int  # analog time units = matrix-vector products = n_p
    time_tiled: int  # ceil(n_p / n_t)

    @property
    def speedup(self) -> float:
        return self.time_untiled / self.time_tiled


@dataclass
class CostReport:
    layers: list[LayerCost]
    load_balanced: bool  # tiled time units equal across layers

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_time_untiled(self) -> int:
        return sum(l.time_untiled for l in self.layers)

    @property
    def total_time_tiled(self) -> int:
        return sum(l.time_tiled for l in self.layers)


def cost_model_from_layers(layers: list[tuple[int, int, int, int]]) -> CostReport:
    """Cost report from explicit (n_p, k, c_out, n_t) quadruples.

    Analog time is proportional to the number of matrix-vector products
    (n_p), independent of the kernel matrix size; tiling divides it by n_t.
    """
    costs = []
    for i, (n_p, k, c_out, n_t) in enumerate(layers):
        if min(n_p, k, c_out, n_t) < 1:
            raise ValueError(f"layer {i}: extents must be >= 1")
        costs.append(
            LayerCost(
                name=f"conv{i + 1}",
                n_p=n_p,
                k=k,
                c_out=c_out,
                n_t=n_t,
                macs=n_p * k * c_out,
                time_untiled=n_p,
                time_tiled=-(-n_p // n_t),
            )
        )
    tiled_times = {c.time_tiled for c in costs}
    return CostReport(layers=costs, load_balanced=len(tiled_times) == 1)


def analog_cost_model(cfg: NetworkConfig) -> CostReport:
    quads = [
        (g.n_p, g.k, g.c_out, n_t)
        for g, n_t in zip(cfg.geometries(), cfg.tiles)
    ]
    return cost_model_from_layers(quads)


# ---------------------------------------------------------------------------
# FGSM robustness harness
# ---------------------------------------------------------------------------


def fgsm_perturb(
    net: Network,
    image: np.ndarray,
    label: int,
    eps: float,
    rng: SeededRng,
    clip: tuple[float, float] | None = PIXEL_RANGE,
) -> np.ndarray:
    """One-step sign-gradient perturbation of strength eps (0..255 scale).

    The loss gradient is taken through a single forward with draws fixed by
    `rng` (test mode; train mode for stochastic pooling, whose test-mode
    average has no backward). Pass clip=None to inspect the raw step.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    mode = "train" if net.cfg.pooling == "stochastic" else "test"
    _, _, _, dimage = net.forward_backward(
        image, label, mode, rng, need_input_grad=True
    )
    eps_norm = np.asarray(eps / 255.0, dtype=image.dtype)
    perturbed = image + eps_norm * np.sign(dimage).astype(image.dtype)
    if clip is not None:
        perturbed = np.clip(perturbed, *clip)
    return perturbed


def snr_of(image: np.ndarray, perturbation: np.ndarray) -> float:
    """Signal-to-noise ratio 20*log10(||x|| / ||delta||) in decibels."""
    noise = float(np.linalg.norm(np.asarray(perturbation, dtype=np.float64)))
    if noise == 0.0:
        return math.inf
    signal = float(np.linalg.norm(np.asarray(image, dtype=np.float64)))
    return 20.0 * math.log10(signal / noise)


@dataclass
class AdversarialCurve:
    """(eps, mean SNR dB, accuracy %) over the correctly-classified subset."""

    points: list[tuple[float, float, float]]
    n_correct: int  # size of the attacked subset


def _predict(net, image, votes, rng):
    if votes > 1:
        return predict_majority(net, image, votes, rng)
    return net.forward(image, "test", rng)


def adversarial_curve(
    net: Network,
    testset: DatasetSplit,
    eps_grid,
    rng: SeededRng,
    votes: int = 1,
    workers: int = 1,
) -> AdversarialCurve:
    """Accuracy under FGSM at each eps, restricted to the images the model
    classifies correctly at eps = 0 (so the curve starts at 100%)."""

    def correct_at_rest(i):
        pred = _predict(net, testset.images[i], votes, rng.derive("base", int(i)))
        return pred.label == int(testset.labels[i])

    idxs = list(range(len(testset)))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        base_ok = list(pool.map(correct_at_rest, idxs)) if workers > 1 else [
            correct_at_rest(i) for i in idxs
        ]
    correct = [i for i, ok in zip(idxs, base_ok) if ok]
    if not correct:
        raise ValueError("no correctly classified images to attack")

    points = []
    for eps in eps_grid:
        if eps == 0:
            points.append((0.0, math.inf, 100.0))
            continue

        def attack_one(i):
            image = testset.images[i]
            label = int(testset.labels[i])
            adv = fgsm_perturb(net, image, label, eps, rng.derive("attack", int(i)))
            pred = _predict(net, adv, votes, rng.derive("adv-eval", float(eps), int(i)))
            return pred.label == label, snr_of(image, adv - image)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(attack_one, correct))
        else:
            results = [attack_one(i) for i in correct]
        hits = sum(ok for ok, _ in results)
        mean_snr = float(np.mean([s for _, s in results]))
        points.append((float(eps), mean_snr, 100.0 * hits / len(correct)))
    return AdversarialCurve(points=points, n_correct=len(correct))


def gap_reduction(acc_base: float, acc_new: float) -> float:
    """How much of the gap to perfect robustness (100%) the new accuracy
    closes, in percent; undefined (nan) when the base is already perfect."""
    for name, acc in (("acc_base", acc_base), ("acc_new", acc_new)):
        if not 0 <= acc <= 100:
            raise ValueError(f"{name} must be in [0, 100], got {acc}")
    if acc_base == 100.0:
        return math.nan
    return 100.0 * (acc_new - acc_base) / (100.0 - acc_base)


def write_adversarial_csv(curve: AdversarialCurve, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epsilon", "snr_db", "accuracy_pct"])
        for eps, snr, acc in curve.points:
            writer.writerow([repr(eps), repr(snr), repr(acc)])
