"""Composition of the two defense layers around the target classifier.

Stage 1 screens inputs with the statistical detector before any inference;
survivors get classified; stage 3 checks the prediction semantically. A
verdict therefore never carries both a stage-1 rejection and stage-2/3
fields: inputs rejected up front are never classified at all.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .cgan import CganCheckpoint
from .classifier import TargetClassifier, predict
from .metric import SpDetector, detect_sp
from .saec import SaecDetector, detect as saec_detect

FINAL_STATES = ("rejected_lp", "rejected_sp", "accepted")


@dataclass(frozen=True)
class DetectorVerdict:
    input_id: int
    lp_flagged: bool
    lp_score: float
    predicted_label: int | None
    sp_flagged: bool | None
    sp_distance: float | None
    final: str

    def __post_init__(self):
        if self.final not in FINAL_STATES:
            raise ValueError(f"invalid final state {self.final!r}")
        if self.lp_flagged and (self.predicted_label is not None
                                or self.sp_flagged is not None or self.sp_distance is not None):
            raise ValueError("stage-1 rejection precludes classifier/semantic fields")
        if self.final == "accepted" and (self.lp_flagged or self.sp_flagged):
            raise ValueError("accepted verdicts cannot carry a flag")

    @property
    def accepted_label(self) -> int | None:
        return self.predicted_label if self.final == "accepted" else None


def classify_defended(saec: SaecDetector, clf: TargetClassifier, sp: SpDetector,
                      cgan: CganCheckpoint, x: np.ndarray, input_id: int = 0) -> DetectorVerdict:
    """Run one input through statistical screen, classifier, semantic check."""
    lp = saec_detect(saec, x)
    if lp.flagged:
        return DetectorVerdict(input_id=input_id, lp_flagged=True, lp_score=lp.score,
                               predicted_label=None, sp_flagged=None, sp_distance=None,
                               final="rejected_lp")
    label = predict(clf, x)
    sp_res = detect_sp(sp, cgan, x, label)
    return DetectorVerdict(input_id=input_id, lp_flagged=False, lp_score=lp.score,
                           predicted_label=label, sp_flagged=sp_res.flagged,
                           sp_distance=sp_res.distance,
                           final="rejected_sp" if sp_res.flagged else "accepted")


def verdict_stream(saec: SaecDetector, clf: TargetClassifier, sp: SpDetector,
                   cgan: CganCheckpoint, images: Sequence[np.ndarray],
                   ids: Sequence[int] | None = None) -> list[DetectorVerdict]:
    """Order-preserving map of classify_defended over a sequence of images."""
    if ids is None:
        ids = range(len(images))
    return [classify_defended(saec, clf, sp, cgan, x, input_id=int(i))
            for i, x in zip(ids, images)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


VERDICT_FIELDS = ("input_id", "lp_flagged", "lp_score", "predicted_label",
                  "sp_flagged", "sp_distance", "final")


def write_verdicts_csv(verdicts: Sequence[DetectorVerdict], path) -> None:
    with open(path, "w") as f:
        f.write("# schema=mixdefense-verdict-v1\n")
        f.write(",".join(VERDICT_FIELDS) + "\n")
        for v in verdicts:
            row = [_fmt(getattr(v, field)) for field in VERDICT_FIELDS]
            f.write(",".join(row) + "\n")


def read_verdicts_csv(path) -> list[DetectorVerdict]:
    out = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "# schema=mixdefense-verdict-v1":
            raise ValueError(f"{path}: unknown verdict schema {header!r}")
        f.readline()  # column names
        for line in f:
            cells = line.rstrip("\n").split(",")
            rec = dict(zip(VERDICT_FIELDS, cells))
            out.append(DetectorVerdict(
                input_id=int(rec["input_id"]),
                lp_flagged=rec["lp_flagged"] == "1",
                lp_score=float(rec["lp_score"]),
                predicted_label=int(rec["predicted_label"]) if rec["predicted_label"] else None,
                sp_flagged=(rec["sp_flagged"] == "1") if rec["sp_flagged"] else None,
                sp_distance=float(rec["sp_distance"]) if rec["sp_distance"] else None,
                final=rec["final"]))
    return out


def write_verdicts_jsonl(verdicts: Sequence[DetectorVerdict], path) -> None:
    with open(path, "w") as f:
        for v in verdicts:
            f.write(json.dumps(asdict(v), sort_keys=True) + "\n")
