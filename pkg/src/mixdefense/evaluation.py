"""Measurement protocol: detection/robust-accuracy curves, layer curves,
failure export, and the two defense-aware case studies.

Accuracy-vs-budget sweeps follow a fixed recipe: one calibrated threshold
set per dataset across all attacks; budgeted attacks get a fresh attack set
per budget, unbudgeted ones run once and are binned by achieved norm;
detection accuracy uses balanced clean/adversarial mixtures built from the
successful examples; robust-classifier accuracy counts every attacked
sample, successful or not. Points backed by fewer than 100 successful
examples are marked censored.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .attacks import AdversarialExample, AttackSpec, PerturbationBudget, generate_attack_set
from .cgan import CganCheckpoint, reconstruct_batch
from .classifier import TargetClassifier, predict_batch
from .metric import MetricNetwork, SpDetector, sp_distance_batch
from .pipeline import DetectorVerdict
from .saec import SaecDetector, detect as saec_detect
from .utils import image_to_tensor, images_to_tensor, tensor_to_images

CENSOR_MIN_SUCCESSFUL = 100
DETECTOR_MODES = ("full", "lp", "sp")


@dataclass(frozen=True)
class ConfusionCounts:
    """Positives are clean images, negatives are adversarial ones."""
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def acc_detector(counts: ConfusionCounts) -> float:
    """Balanced detection accuracy (TP+TN)/total."""
    if counts.total == 0:
        raise ValueError("empty confusion counts")
    return (counts.tp + counts.tn) / counts.total


def acc_rc(n_aes: int, n_detected: int, n_correct: int) -> float:
    """Robust-classifier accuracy: detected-or-correct over all attacked inputs."""
    if n_aes <= 0:
        raise ValueError("n_aes must be positive")
    if n_detected + n_correct > n_aes:
        raise ValueError("detected + correct cannot exceed the number of AEs")
    return (n_detected + n_correct) / n_aes


@dataclass(frozen=True)
class CurvePoint:
    budget: float
    norm: str          # "l2" or "linf"
    scale: str         # "raw" (flattened-image units) or "rms" (per-pixel)
    metric: str        # "acc_detector" | "acc_rc" | "acc_undefended"
    value: float
    n_samples: int
    n_successful_aes: int
    censored: bool


@dataclass
class ProbeRecords:
    """Per-image detector observables shared by all detector modes."""
    lp_flagged: np.ndarray
    lp_score: np.ndarray
    label: np.ndarray
    sp_flagged: np.ndarray
    sp_distance: np.ndarray

    def flagged(self, mode: str) -> np.ndarray:
        if mode == "lp":
            return self.lp_flagged
        if mode == "sp":
            return self.sp_flagged
        if mode == "full":
            return self.lp_flagged | self.sp_flagged
        raise ValueError(f"unknown detector mode {mode!r}")


def probe_images(saec_det: SaecDetector, clf: TargetClassifier, sp: SpDetector,
                 cgan: CganCheckpoint, images: np.ndarray) -> ProbeRecords:
    scores = np.array([saec_det.score(x) for x in images])
    if saec_det.direction == "flag_below":
        lp_flagged = scores < saec_det.threshold
    else:
        lp_flagged = scores > saec_det.threshold
    labels = predict_batch(clf, images)
    distances = sp_distance_batch(sp.metric, cgan, images, labels)
    return ProbeRecords(lp_flagged=lp_flagged, lp_score=scores, label=labels,
                        sp_flagged=distances > sp.threshold, sp_distance=distances)


def detection_counts(clean: ProbeRecords, adversarial: ProbeRecords,
                     mode: str = "full") -> ConfusionCounts:
    clean_flag = clean.flagged(mode)
    ae_flag = adversarial.flagged(mode)
    return ConfusionCounts(
        tp=int((~clean_flag).sum()), fn=int(clean_flag.sum()),
        tn=int(ae_flag.sum()), fp=int((~ae_flag).sum()))


def robust_counts(probes: ProbeRecords, true_labels: np.ndarray,
                  mode: str = "full") -> tuple[int, int]:
    """(n_detected, n_correct) with disjoint accounting: a detected input is
    rejected before it can count as correctly classified."""
    flagged = probes.flagged(mode)
    detected = int(flagged.sum())
    correct = int((~flagged & (probes.label == np.asarray(true_labels))).sum())
    return detected, correct


def _point(budget, norm, scale, metric, value, n_samples, n_success) -> CurvePoint:
    return CurvePoint(budget=float(budget), norm=norm, scale=scale, metric=metric,
                      value=float(value), n_samples=int(n_samples),
                      n_successful_aes=int(n_success),
                      censored=bool(n_success < CENSOR_MIN_SUCCESSFUL))


def _evaluate_point(saec_det, clf, sp, cgan, ds, examples: list[AdversarialExample],
                    budget: float, norm: str, scale: str, detectors: Sequence[str],
                    seed: int) -> dict[str, list[CurvePoint]]:
    success = [e for e in examples if e.success]
    n_success = len(success)
    out: dict[str, list[CurvePoint]] = {mode: [] for mode in detectors}

    ae_all = probe_images(saec_det, clf, sp, cgan,
                          np.stack([e.perturbed for e in examples]))
    true_labels = np.array([e.true_label for e in examples])
    undefended = float((ae_all.label == true_labels).mean())

    clean_probes = None
    success_probe_rows = np.array([e.success for e in examples])
    if n_success:
        rng = np.random.Generator(np.random.PCG64(seed))
        clean_idx = rng.choice(len(ds), size=min(n_success, len(ds)), replace=False)
        clean_probes = probe_images(saec_det, clf, sp, cgan, ds.images[clean_idx])

    for mode in detectors:
        if clean_probes is not None:
            ae_success = ProbeRecords(
                lp_flagged=ae_all.lp_flagged[success_probe_rows],
                lp_score=ae_all.lp_score[success_probe_rows],
                label=ae_all.label[success_probe_rows],
                sp_flagged=ae_all.sp_flagged[success_probe_rows],
                sp_distance=ae_all.sp_distance[success_probe_rows])
            counts = detection_counts(clean_probes, ae_success, mode)
            out[mode].append(_point(budget, norm, scale, "acc_detector",
                                    acc_detector(counts), counts.total, n_success))
        detected, correct = robust_counts(ae_all, true_labels, mode)
        out[mode].append(_point(budget, norm, scale, "acc_rc",
                                acc_rc(len(examples), detected, correct),
                                len(examples), n_success))
        out[mode].append(_point(budget, norm, scale, "acc_undefended", undefended,
                                len(examples), n_success))
    return out


def sweep_curves(saec_det: SaecDetector, clf: TargetClassifier, sp: SpDetector,
                 cgan: CganCheckpoint, ds, method: str, norm: str,
                 eps_grid: Sequence[float] | None = None, n_per_point: int = 500,
                 seed: int = 0, detectors: Sequence[str] = ("full",),
                 n_bins: int = 10, attack_overrides: dict | None = None,
                 ) -> dict[str, list[CurvePoint]]:
    """Accuracy-vs-budget curves for one attack under one or more detector modes.

    All modes share the same attack sets and clean samples, so layer curves
    and the full pipeline are directly comparable point by point.
    """
    overrides = dict(attack_overrides or {})
    results: dict[str, list[CurvePoint]] = {mode: [] for mode in detectors}
    if method in ("fgsm", "fgm", "bim"):
        if not eps_grid:
            raise ValueError(f"{method} sweep needs a non-empty eps grid")
        n_ae = max(n_per_point // 2, 0)
        if n_ae == 0:
            return results
        for i, eps in enumerate(eps_grid):
            spec = AttackSpec(method=method, budget=PerturbationBudget(norm, float(eps)),
                              **overrides)
            examples = generate_attack_set(clf, ds, spec, n_ae, seed + 7919 * i + 13)
            pts = _evaluate_point(saec_det, clf, sp, cgan, ds, examples, eps, norm,
                                  "raw", detectors, seed + 104729 * i + 7)
            for mode in detectors:
                results[mode].extend(pts[mode])
    else:
        if n_per_point == 0:
            return results
        spec = AttackSpec(method=method, norm=norm, **overrides)
        examples = generate_attack_set(clf, ds, spec, n_per_point, seed + 5)
        ordered = sorted(range(len(examples)), key=lambda i: examples[i].norms[norm])
        for i, chunk in enumerate(np.array_split(np.array(ordered), n_bins)):
            if len(chunk) == 0:
                continue
            group = [examples[j] for j in chunk]
            budget = max(e.norms[norm] for e in group)
            pts = _evaluate_point(saec_det, clf, sp, cgan, ds, group, budget, norm,
                                  "raw", detectors, seed + 104729 * i + 7)
            for mode in detectors:
                results[mode].extend(pts[mode])
    return results


def sweep_curve(saec_det, clf, sp, cgan, ds, method, norm, eps_grid=None,
                n_per_point=500, seed=0, detector="full", n_bins=10,
                attack_overrides=None) -> list[CurvePoint]:
    return sweep_curves(saec_det, clf, sp, cgan, ds, method, norm, eps_grid,
                        n_per_point, seed, (detector,), n_bins, attack_overrides)[detector]


def layer_curves(saec_det, clf, sp, cgan, ds, method, norm, eps_grid=None,
                 n_per_point=500, seed=0, n_bins=10,
                 attack_overrides=None) -> dict[str, list[CurvePoint]]:
    """Full pipeline plus each layer alone, on identical attack sets."""
    return sweep_curves(saec_det, clf, sp, cgan, ds, method, norm, eps_grid,
                        n_per_point, seed, DETECTOR_MODES, n_bins, attack_overrides)


CURVE_FIELDS = ("budget", "norm", "scale", "metric", "value",
                "n_samples", "n_successful_aes", "censored")


def write_curve_csv(points: Sequence[CurvePoint], path) -> None:
    with open(path, "w") as f:
        f.write("# schema=mixdefense-curve-v1\n")
        f.write(",".join(CURVE_FIELDS) + "\n")
        for p in points:
            f.write(f"{p.budget:.9g},{p.norm},{p.scale},{p.metric},{p.value:.9g},"
                    f"{p.n_samples},{p.n_successful_aes},{1 if p.censored else 0}\n")


def read_curve_csv(path) -> list[CurvePoint]:
    out = []
    with open(path) as f:
        if f.readline().strip() != "# schema=mixdefense-curve-v1":
            raise ValueError(f"{path}: unknown curve schema")
        f.readline()
        for line in f:
            cells = line.strip().split(",")
            rec = dict(zip(CURVE_FIELDS, cells))
            out.append(CurvePoint(budget=float(rec["budget"]), norm=rec["norm"],
                                  scale=rec["scale"], metric=rec["metric"],
                                  value=float(rec["value"]), n_samples=int(rec["n_samples"]),
                                  n_successful_aes=int(rec["n_successful_aes"]),
                                  censored=rec["censored"] == "1"))
    return out


# ---------------------------------------------------------------------------
# defense-aware case studies


def _composite_input_gradient(cgan: CganCheckpoint, metric: MetricNetwork,
                              x: np.ndarray, target: int) -> np.ndarray:
    """Gradient of the metric distance between the input and its
    reconstruction under the target label, taken through encoder, generator
    and metric network end to end."""
    cgan.encoder.eval(); cgan.generator.eval(); metric.eval()
    xt = image_to_tensor(x).requires_grad_(True)
    mean, _ = cgan.encoder(xt)
    recon = cgan.generator(mean, torch.tensor([int(target)]))
    e_x = metric(xt)
    e_r = metric(recon)
    dist = (e_x - e_r).norm(dim=1).sum()
    (grad,) = torch.autograd.grad(dist, xt)
    return grad.squeeze(0).permute(1, 2, 0).numpy()


def adaptive_input_attack(cgan: CganCheckpoint, metric: MetricNetwork,
                          clf: TargetClassifier, sp: SpDetector, images: np.ndarray,
                          target_labels: np.ndarray, eps_grid: Sequence[float],
                          out_dir=None) -> list[dict]:
    """Targeted single-step attack on the reconstruction model's inputs.

    Per budget: push each image along the sign of the composite gradient to
    shrink its distance-to-reconstruction under the (wrong) target label,
    then record whether the semantic layer still flags it and whether the
    reconstruction still follows the conditioning label.
    """
    for eps in eps_grid:
        if eps < 0 or eps > 0.5:
            raise ValueError(f"input-attack eps {eps} outside the sane range [0, 0.5]")
    rows = []
    for eps in eps_grid:
        if eps == 0.0:
            adv = images.astype(np.float32).copy()
        else:
            adv = np.stack([
                np.clip(x - np.float32(eps)
                        * np.sign(_composite_input_gradient(cgan, metric, x, int(t)),
                                  dtype=np.float32), 0.0, 1.0)
                for x, t in zip(images, target_labels)]).astype(np.float32)
        distances = sp_distance_batch(metric, cgan, adv, target_labels)
        flagged = distances > sp.threshold
        recons = reconstruct_batch(cgan, adv, target_labels)
        recon_labels = predict_batch(clf, recons)
        agree = recon_labels == np.asarray(target_labels)
        rows.append({
            "eps": float(eps),
            "n": int(len(images)),
            "detection_rate": float(flagged.mean()),
            "mean_distance": float(distances.mean()),
            "label_agreement": float(agree.mean()),
        })
        if out_dir is not None:
            save_image_grid([list(adv), list(recons)],
                            Path(out_dir) / f"input_attack_eps{eps:.3f}.png")
    if out_dir is not None:
        _write_case_study_csv(rows, Path(out_dir) / "input_attack.csv")
    return rows


def adaptive_latent_attack(cgan: CganCheckpoint, metric: MetricNetwork,
                           clf: TargetClassifier, sp: SpDetector, images: np.ndarray,
                           fixed_labels: np.ndarray, eps_grid: Sequence[float],
                           out_dir=None) -> list[dict]:
    """Unconstrained attack directly on latent vectors, condition held fixed.

    The attacker gets to move z itself (stronger than any input-space
    attack); reported is how often the decoded image still matches the
    conditioning class and how often the semantic layer still fires.
    """
    for eps in eps_grid:
        if eps < 0 or eps > 1.0:
            raise ValueError(f"latent-attack eps {eps} outside the sane range [0, 1]")
    cgan.encoder.eval(); cgan.generator.eval(); metric.eval()
    xb = images_to_tensor(images)
    yb = torch.from_numpy(np.asarray(fixed_labels, dtype=np.int64))
    with torch.no_grad():
        z0, _ = cgan.encoder(xb)
        e_x = metric(xb)
    rows = []
    for eps in eps_grid:
        if eps == 0.0:
            z = z0.clone()
        else:
            zv = z0.clone().requires_grad_(True)
            recon = cgan.generator(zv, yb)
            dist = (metric(recon) - e_x).norm(dim=1).sum()
            (grad,) = torch.autograd.grad(dist, zv)
            z = z0 - eps * grad.sign()
        with torch.no_grad():
            recon = cgan.generator(z, yb)
            d = (metric(recon) - e_x).norm(dim=1).numpy()
        recon_np = tensor_to_images(recon)
        recon_labels = predict_batch(clf, recon_np)
        rows.append({
            "eps": float(eps),
            "n": int(len(images)),
            "label_agreement": float((recon_labels == np.asarray(fixed_labels)).mean()),
            "mean_distance": float(d.mean()),
            "above_threshold_rate": float((d > sp.threshold).mean()),
        })
        if out_dir is not None:
            save_image_grid([list(images), list(recon_np)],
                            Path(out_dir) / f"latent_attack_eps{eps:.3f}.png")
    if out_dir is not None:
        _write_case_study_csv(rows, Path(out_dir) / "latent_attack.csv")
    return rows


def _write_case_study_csv(rows: list[dict], path) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w") as f:
        f.write("# schema=mixdefense-case-study-v1\n")
        f.write(",".join(keys) + "\n")
        for row in rows:
            f.write(",".join(f"{row[k]:.9g}" if isinstance(row[k], float) else str(row[k])
                             for k in keys) + "\n")


# ---------------------------------------------------------------------------
# failure export


def save_image_grid(rows: list[list[np.ndarray]], path, pad: int = 2) -> None:
    """Write a grid PNG: one list of images per row, all images same shape."""
    if not rows or not rows[0]:
        return
    h, w = rows[0][0].shape[:2]
    n_cols = max(len(r) for r in rows)
    canvas = np.ones(((h + pad) * len(rows) + pad, (w + pad) * n_cols + pad, 3),
                     dtype=np.float32)
    for ri, row in enumerate(rows):
        for ci, img in enumerate(row):
            tile = img if img.shape[-1] == 3 else np.repeat(img, 3, axis=-1)
            top = pad + ri * (h + pad)
            left = pad + ci * (w + pad)
            canvas[top:top + h, left:left + w] = tile
    Image.fromarray(np.round(canvas * 255).astype(np.uint8)).save(path)


def export_failures(verdicts: Sequence[DetectorVerdict], images: np.ndarray,
                    is_adversarial: np.ndarray, cgan: CganCheckpoint,
                    clf: TargetClassifier, k: int, out_dir) -> dict:
    """Dump the first k false negatives (clean rejected) and false positives
    (adversarial accepted) as input/reconstruction grids plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    is_adversarial = np.asarray(is_adversarial, dtype=bool)
    fn_rows, fp_rows = [], []
    for i, v in enumerate(verdicts):
        if not is_adversarial[i] and v.final != "accepted" and len(fn_rows) < k:
            fn_rows.append((i, v))
        elif is_adversarial[i] and v.final == "accepted" and len(fp_rows) < k:
            fp_rows.append((i, v))

    manifest = {"false_negatives": [], "false_positives": []}

    def _dump(rows, tag):
        if rows:
            idx = [i for i, _ in rows]
            labels = np.array([v.predicted_label if v.predicted_label is not None
                               else predict_batch(clf, images[i:i + 1])[0]
                               for i, v in rows])
            recons = reconstruct_batch(cgan, images[idx], labels)
            save_image_grid([list(images[idx]), list(recons)], out_dir / f"{tag}.png")
        for i, v in rows:
            manifest[tag].append({
                "input_id": v.input_id, "index": int(i), "final": v.final,
                "lp_flagged": v.lp_flagged, "lp_score": v.lp_score,
                "predicted_label": v.predicted_label,
                "sp_flagged": v.sp_flagged, "sp_distance": v.sp_distance,
            })

    _dump(fn_rows, "false_negatives")
    _dump(fp_rows, "false_positives")
    import json
    with open(out_dir / "failures_manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def linspace_grid(start: float, stop: float, count: int) -> list[float]:
    """Inclusive linear grid, the CLI's start:stop:count convention."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if count == 1:
        return [float(start)]
    return [float(v) for v in np.linspace(start, stop, count)]
