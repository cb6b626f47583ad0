"""Shared desk-scale trained artifacts for the test suite.

Training the pipeline components takes tens of minutes, so they are built
once with fixed configs/seeds and cached on disk under .cache/artifacts,
keyed by a hash of every config involved. Deterministic training makes the
cache equivalent to a fresh build. Run `python3 tests/artifacts.py` to
prebuild everything outside pytest.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from mixdefense.cgan import CganConfig, load_cgan, save_cgan, train_cgan
from mixdefense.classifier import (ClassifierConfig, load_classifier,
                                   save_classifier, train_classifier)
from mixdefense.data import train_validation_split
from mixdefense.metric import (MetricConfig, calibrate_sp, load_metric,
                               load_sp_detector, save_metric, save_sp_detector,
                               train_metric)
from mixdefense.saec import calibrate as calibrate_saec
from mixdefense.saec import load_saec, save_saec
from mixdefense.synth import synth_digits

CACHE = Path(__file__).resolve().parent.parent / ".cache" / "artifacts"

DATA_SEED = 7
TRAIN_SIZE = 8000
TEST_SIZE = 2000

CLF_CONFIG = ClassifierConfig(epochs=3)
CLF_SEED = 1

CGAN_CONFIG = CganConfig(iterations=2500, batch_size=32, base_channels=64,
                         progress_every=250)
CGAN_SEED = 2

METRIC_CONFIG = MetricConfig(steps=1200, batch_size=32)
METRIC_SEED = 3

SAEC_AMPLITUDES = (0.05, 0.1, 0.2, 0.3)
SAEC_FPR = 0.01
SAEC_SEED = 4

SP_FPR = 0.05
SP_VALIDATION_FRACTION = 0.2
SP_VALIDATION_SEED = 11


def _stamp() -> str:
    payload = json.dumps({
        "data": [DATA_SEED, TRAIN_SIZE, TEST_SIZE],
        "clf": [asdict(CLF_CONFIG), CLF_SEED],
        "cgan": [asdict(CGAN_CONFIG), CGAN_SEED],
        "metric": [asdict(METRIC_CONFIG), METRIC_SEED],
        "saec": [list(SAEC_AMPLITUDES), SAEC_FPR, SAEC_SEED],
        "sp": [SP_FPR, SP_VALIDATION_FRACTION, SP_VALIDATION_SEED],
    }, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _cache_dir() -> Path:
    d = CACHE / _stamp()
    d.mkdir(parents=True, exist_ok=True)
    return d


def digits_train():
    return synth_digits(TRAIN_SIZE, DATA_SEED, split="train")


def digits_test():
    return synth_digits(TEST_SIZE, DATA_SEED + 100003, split="test")


def _log(msg: str) -> None:
    print(f"[artifacts] {msg}", file=sys.stderr, flush=True)


def classifier():
    path = _cache_dir() / "classifier.ckpt"
    if path.exists():
        return load_classifier(path)
    _log("training classifier ...")
    t0 = time.time()
    clf = train_classifier(digits_train(), CLF_CONFIG, CLF_SEED, test=digits_test())
    _log(f"classifier done in {time.time() - t0:.0f}s, acc={clf.test_accuracy:.4f}")
    save_classifier(clf, path)
    return load_classifier(path)


def classifier_path() -> Path:
    classifier()
    return _cache_dir() / "classifier.ckpt"


def contranet():
    path = _cache_dir() / "contranet.ckpt"
    if path.exists():
        return load_cgan(path)
    _log("training conditional GAN ...")
    t0 = time.time()
    ckpt = train_cgan(digits_train(), CGAN_CONFIG, CGAN_SEED)
    _log(f"cgan done in {time.time() - t0:.0f}s")
    save_cgan(ckpt, path)
    return load_cgan(path)


def metric_net():
    path = _cache_dir() / "metric.ckpt"
    if path.exists():
        return load_metric(path)
    cgan = contranet()
    _log("training metric network ...")
    t0 = time.time()
    net = train_metric(cgan, digits_train(), METRIC_CONFIG, METRIC_SEED)
    _log(f"metric done in {time.time() - t0:.0f}s")
    save_metric(net, path, seed=METRIC_SEED, in_channels=1, image_hw=28)
    return load_metric(path)


def saec_detector():
    path = _cache_dir() / "saec.json"
    if path.exists():
        return load_saec(path)
    _log("calibrating statistical detector ...")
    det = calibrate_saec(digits_train(), SAEC_AMPLITUDES, SAEC_FPR, SAEC_SEED)
    save_saec(det, path)
    return load_saec(path)


def sp_detector():
    path = _cache_dir() / "sp.json"
    if path.exists():
        return load_sp_detector(path, metric=metric_net())
    net = metric_net()
    cgan = contranet()
    clf = classifier()
    _, validation = train_validation_split(digits_train(), SP_VALIDATION_FRACTION,
                                           SP_VALIDATION_SEED)
    _log("calibrating semantic detector ...")
    sp = calibrate_sp(net, cgan, clf, validation, SP_FPR)
    save_sp_detector(sp, _cache_dir() / "metric.ckpt", path)
    return load_sp_detector(path, metric=net)


def build_all() -> None:
    classifier()
    contranet()
    metric_net()
    saec_detector()
    sp_detector()
    _log(f"all artifacts ready under {_cache_dir()}")


if __name__ == "__main__":
    build_all()
