"""Learned semantic distance and the small-perturbation detector head.

A single embedding network maps images onto the unit sphere; triplets
(clean anchor, correct-label reconstruction, wrong-label reconstruction)
from the frozen conditional generator train it with a margin loss. The
detector thresholds the embedding distance between an input and its
reconstruction under the classifier's predicted label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .cgan import CganCheckpoint, reconstruct_batch, reconstruct_for_label
from .classifier import TargetClassifier, TrainingDivergedError, predict_batch
from .data import LabeledDataset, batches
from .utils import (image_to_tensor, images_to_tensor, load_state_arrays,
                    state_dict_arrays)


class MetricNetwork(nn.Module):
    """3 conv blocks + linear projection; embeddings are L2-normalized."""

    def __init__(self, in_channels: int, image_hw: int, embedding_dim: int = 64):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.conv1 = nn.Conv2d(in_channels, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(64, 128, 3, stride=2, padding=1)
        hw = (image_hw + 7) // 8
        self.proj = nn.Linear(128 * hw * hw, embedding_dim)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.1)
        h = F.leaky_relu(self.conv2(h), 0.1)
        h = F.leaky_relu(self.conv3(h), 0.1)
        e = self.proj(h.flatten(1))
        return F.normalize(e, p=2, dim=1)


def embed(m: MetricNetwork, x: np.ndarray) -> np.ndarray:
    m.eval()
    with torch.no_grad():
        return m(image_to_tensor(x)).squeeze(0).numpy()


def embed_batch(m: MetricNetwork, xs: np.ndarray) -> np.ndarray:
    m.eval()
    with torch.no_grad():
        return m(images_to_tensor(xs)).numpy()


def embedding_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a, np.float64) - np.asarray(b, np.float64)))


def triplet_margin_loss(anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray,
                        margin: float = 1.0) -> float:
    """max(d(a,p) - d(a,n) + margin, 0) with Euclidean d on the embeddings."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    d_ap = embedding_distance(anchor, positive)
    d_an = embedding_distance(anchor, negative)
    return max(d_ap - d_an + margin, 0.0)


@dataclass(frozen=True)
class MinedTriplet:
    anchor: int     # index of the (anchor, candidates) group
    positive: int   # index into that group's positives
    negative: int   # index into that group's negatives


def mine_triplets(groups: Sequence[tuple[np.ndarray, Sequence[np.ndarray], Sequence[np.ndarray]]],
                  policy: str = "all_combinations", margin: float = 1.0) -> list[MinedTriplet]:
    """Select triplets from (anchor, positives, negatives) embedding groups.

    all_combinations emits the full cross-product. semi_hard keeps triplets
    with d(a,p) < d(a,n) < d(a,p) + margin; when an (anchor, positive) pair
    has no qualifying negative, it falls back to that pair's hardest
    (closest) negative.
    """
    if policy not in ("all_combinations", "semi_hard"):
        raise ValueError(f"unknown mining policy {policy!r}")
    out: list[MinedTriplet] = []
    for gi, (anchor, positives, negatives) in enumerate(groups):
        if len(positives) == 0 or len(negatives) == 0:
            raise ValueError(f"group {gi}: anchors need at least one positive and one negative")
        if policy == "all_combinations":
            out.extend(MinedTriplet(gi, pi, ni)
                       for pi in range(len(positives)) for ni in range(len(negatives)))
            continue
        d_an = [embedding_distance(anchor, n) for n in negatives]
        for pi, pos in enumerate(positives):
            d_ap = embedding_distance(anchor, pos)
            chosen = [ni for ni, dn in enumerate(d_an) if d_ap < dn < d_ap + margin]
            if not chosen:
                chosen = [int(np.argmin(d_an))]
            out.extend(MinedTriplet(gi, pi, ni) for ni in chosen)
    return out


@dataclass
class MetricConfig:
    embedding_dim: int = 64
    steps: int = 1200
    batch_size: int = 32
    learning_rate: float = 1e-3
    margin: float = 1.0
    mining: str = "semi_hard"   # or "all_combinations"


def _wrong_labels(labels: np.ndarray, class_count: int,
                  rng: np.random.Generator) -> np.ndarray:
    offsets = rng.integers(1, class_count, size=len(labels))
    return (labels + offsets) % class_count


def train_metric(cgan: CganCheckpoint, train: LabeledDataset, config: MetricConfig,
                 seed: int) -> MetricNetwork:
    """Online triplet training against the frozen conditional generator.

    Positives are reconstructions under the true label; negatives are
    reconstructions under a uniformly sampled wrong label. Within a batch,
    every wrong-label reconstruction whose conditioning label differs from
    an anchor's true label serves as a candidate negative for that anchor.
    """
    torch.manual_seed(seed)
    h, w, c = train.image_shape
    net = MetricNetwork(c, h, config.embedding_dim)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    rng = np.random.Generator(np.random.PCG64(seed * 31 + 7))
    margin = config.margin

    epoch = 0
    stream = iter(())
    net.train()
    for step in range(config.steps):
        batch = next(stream, None)
        if batch is None:
            stream = iter(batches(train, min(config.batch_size, len(train)),
                                  seed=seed + epoch, shuffle=True))
            epoch += 1
            batch = next(stream)
        wrong = _wrong_labels(batch.labels, train.class_count, rng)
        positives = reconstruct_batch(cgan, batch.images, batch.labels)
        negatives = reconstruct_batch(cgan, batch.images, wrong)

        xb = images_to_tensor(batch.images)
        pb = images_to_tensor(positives)
        nb = images_to_tensor(negatives)
        emb = net(torch.cat([xb, pb, nb], dim=0))
        b = len(batch)
        e_a, e_p, e_n = emb[:b], emb[b:2 * b], emb[2 * b:]

        # candidate negatives per anchor: wrong-label recons with a label
        # different from the anchor's own class
        d_ap = (e_a - e_p).norm(dim=1)                      # (B,)
        d_an = torch.cdist(e_a, e_n)                        # (B, B)
        valid = torch.from_numpy(batch.labels[:, None] != wrong[None, :])
        if config.mining == "semi_hard":
            semi = (d_an > d_ap[:, None]) & (d_an < (d_ap[:, None] + margin)) & valid
            d_masked = torch.where(valid, d_an, torch.inf)
            hardest = d_masked.argmin(dim=1)
            use = semi.clone()
            none_semi = ~semi.any(dim=1)
            use[none_semi, hardest[none_semi]] = True
        else:
            use = valid
        losses = torch.clamp(d_ap[:, None] - d_an + margin, min=0.0)
        loss = losses[use].mean()
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite triplet loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    return net


@dataclass
class SpDetector:
    """Thresholded semantic distance; immutable after calibration."""

    metric: MetricNetwork
    threshold: float
    calibration: dict = field(default_factory=dict)


def sp_distance(metric: MetricNetwork, cgan: CganCheckpoint, x: np.ndarray,
                y_pred: int) -> float:
    """Embedding distance between x and its reconstruction under y_pred."""
    recon = reconstruct_for_label(cgan, x, int(y_pred))
    return embedding_distance(embed(metric, x), embed(metric, recon))


def sp_distance_batch(metric: MetricNetwork, cgan: CganCheckpoint, xs: np.ndarray,
                      ys: np.ndarray) -> np.ndarray:
    recons = reconstruct_batch(cgan, xs, ys)
    e_x = embed_batch(metric, xs)
    e_r = embed_batch(metric, recons)
    return np.linalg.norm(e_x.astype(np.float64) - e_r.astype(np.float64), axis=1)


def calibrate_sp(metric: MetricNetwork, cgan: CganCheckpoint, clf: TargetClassifier,
                 clean_validation: LabeledDataset, target_clean_fpr: float) -> SpDetector:
    """Set the threshold at the clean-distance quantile for the target FPR.

    Distances are computed against reconstructions under the *predicted*
    label, exactly as at detection time.
    """
    if not 0.0 < target_clean_fpr < 1.0:
        raise ValueError("target_clean_fpr must be in (0,1)")
    preds = predict_batch(clf, clean_validation.images)
    distances = sp_distance_batch(metric, cgan, clean_validation.images, preds)
    if np.ptp(distances) == 0.0:
        raise RuntimeError("degenerate clean distance distribution; cannot calibrate")
    ordered = np.sort(distances)
    n = len(ordered)
    k = int(np.floor(target_clean_fpr * n))
    threshold = float(ordered[max(n - 1 - k, 0)])
    return SpDetector(metric=metric, threshold=threshold, calibration={
        "dataset": clean_validation.name,
        "n_images": int(n),
        "target_clean_fpr": float(target_clean_fpr),
        "clean_distance_mean": float(distances.mean()),
    })


@dataclass(frozen=True)
class SpResult:
    flagged: bool
    distance: float


def detect_sp(sp: SpDetector, cgan: CganCheckpoint, x: np.ndarray, y_pred: int) -> SpResult:
    """Flag iff distance strictly exceeds the threshold."""
    d = sp_distance(sp.metric, cgan, x, y_pred)
    return SpResult(flagged=bool(d > sp.threshold), distance=d)


def save_metric(net: MetricNetwork, path, seed: int = 0, meta: dict | None = None,
                in_channels: int | None = None, image_hw: int | None = None) -> None:
    arch = {
        "in_channels": in_channels if in_channels is not None else net.conv1.in_channels,
        "image_hw": image_hw,
        "embedding_dim": net.embedding_dim,
    }
    save_checkpoint(path, kind="metric", architecture=arch, seed=seed,
                    arrays=state_dict_arrays(net), meta=meta or {})


def load_metric(path) -> MetricNetwork:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "metric":
        raise ValueError(f"{path} holds a {ckpt.kind!r} checkpoint, not a metric network")
    arch = ckpt.architecture
    hw = arch.get("image_hw")
    if hw is None:
        # infer from the projection layer's input size
        proj_in = ckpt.arrays["proj.weight"].shape[1]
        hw = int(np.sqrt(proj_in / 128)) * 8
    net = MetricNetwork(arch["in_channels"], hw, arch["embedding_dim"])
    load_state_arrays(net, ckpt.arrays)
    net.eval()
    return net


def save_sp_detector(sp: SpDetector, metric_path, record_path) -> None:
    """Persist threshold + calibration next to the metric checkpoint."""
    record = {
        "format": "mixdefense-sp-v1",
        "threshold": sp.threshold,
        "calibration": sp.calibration,
        "metric_checkpoint": str(metric_path),
    }
    with open(record_path, "w") as f:
        json.dump(record, f, indent=1, sort_keys=True)


def load_sp_detector(record_path, metric: MetricNetwork | None = None) -> SpDetector:
    with open(record_path) as f:
        record = json.load(f)
    if record.get("format") != "mixdefense-sp-v1":
        raise ValueError(f"{record_path}: not an SP detector record")
    if metric is None:
        metric = load_metric(record["metric_checkpoint"])
    return SpDetector(metric=metric, threshold=record["threshold"],
                      calibration=record["calibration"])
