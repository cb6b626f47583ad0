"""Command-line entry point tying training, calibration, attack generation
and evaluation together.

Every subcommand reads an optional INI config plus flag overrides (flags
win), writes its artifacts into the output directory, and drops a manifest
JSON (merged config snapshot, seeds, input checkpoint hashes) sufficient to
reproduce the run. Exit codes: 0 success, 1 runtime failure (single-line
machine-parsable error on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .attacks import (AttackSpec, PerturbationBudget, generate_attack_set,
                      load_attack_set, save_attack_set, success_rate)
from .cgan import (CganConfig, load_cgan, save_cgan, train_cgan,
                   write_loss_history_csv)
from .checkpoint import file_sha256
from .classifier import (ClassifierConfig, load_classifier, save_classifier,
                         train_classifier)
from .config import ConfigError, RunConfig, parse_eps_grid
from .data import (LabeledDataset, load_cifar_binary, load_mnist_idx,
                   train_validation_split)
from .evaluation import (adaptive_input_attack, adaptive_latent_attack,
                         export_failures, probe_images, read_curve_csv,
                         sweep_curves, write_curve_csv)
from .metric import (MetricConfig, calibrate_sp, load_metric, load_sp_detector,
                     save_metric, save_sp_detector, train_metric)
from .pipeline import verdict_stream, write_verdicts_csv
from .saec import calibrate as calibrate_saec_detector, load_saec, save_saec
from .synth import synth_digits, synth_shapes

OUTPUT_ENV_VAR = "MIXDEFENSE_OUT"


# ---------------------------------------------------------------------------
# plumbing


def _config_from_args(args) -> RunConfig:
    overrides: dict[tuple[str, str], str] = {}
    for section, key, value in getattr(args, "_overrides", []):
        overrides[(section, key)] = value
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        overrides[(section, key)] = value
    cfg = RunConfig.load(getattr(args, "config", None), overrides)
    jobs = cfg.getint("out", "jobs")
    if jobs > 0:
        torch.set_num_threads(jobs)
    return cfg


def _outdir(args, cfg: RunConfig) -> Path:
    out = getattr(args, "out", None) or os.environ.get(OUTPUT_ENV_VAR) or cfg.get("out", "dir")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise FileNotFoundError(f"missing {what} checkpoint at '{path}'")
    return Path(path)


def _artifact(args, attr: str, out: Path, default_name: str, what: str) -> Path:
    given = getattr(args, attr, None)
    return _require(Path(given) if given else out / default_name, what)


def _load_split(cfg: RunConfig, split: str) -> LabeledDataset:
    name = cfg.get("data", "name")
    seed = cfg.getint("data", "seed")
    if name == "synth-digits":
        n = cfg.getint("data", "synth_train_size" if split == "train" else "synth_test_size")
        return synth_digits(n, seed + (0 if split == "train" else 100003), split=split)
    if name == "synth-shapes":
        n = cfg.getint("data", "synth_train_size" if split == "train" else "synth_test_size")
        return synth_shapes(n, seed + (0 if split == "train" else 100003), split=split)
    if name == "mnist-idx":
        images = cfg.get("data", f"{split}_images")
        labels = cfg.get("data", f"{split}_labels")
        if not images or not labels:
            raise ConfigError(f"data.{split}_images and data.{split}_labels must be set "
                              f"for dataset mnist-idx")
        return load_mnist_idx(_require(Path(images), "IDX image"),
                              _require(Path(labels), "IDX label"), split=split)
    if name == "cifar10-bin":
        paths = cfg.getpaths("data", f"{split}_batches")
        if not paths:
            raise ConfigError(f"data.{split}_batches must be set for dataset cifar10-bin")
        return load_cifar_binary([_require(Path(p), "CIFAR batch") for p in paths], split=split)
    raise ConfigError(f"unknown dataset name {name!r}")


def _write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict[str, Path],
                    outputs: list[Path], extra: dict | None = None) -> None:
    manifest = {
        "format": "mixdefense-manifest-v1",
        "command": command,
        "config": cfg.snapshot(),
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)}
                   for name, p in inputs.items()},
        "outputs": [str(p) for p in outputs],
    }
    if extra:
        manifest.update(extra)
    with open(out / f"manifest_{command}.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_classifier(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    cc = ClassifierConfig(
        arch=cfg.get("classifier", "arch"),
        epochs=cfg.getint("classifier", "epochs"),
        batch_size=cfg.getint("classifier", "batch_size"),
        learning_rate=cfg.getfloat("classifier", "learning_rate"),
        momentum=cfg.getfloat("classifier", "momentum"),
        weight_decay=cfg.getfloat("classifier", "weight_decay"),
        lr_decay_epochs=tuple(cfg.getints("classifier", "lr_decay_epochs")),
        lr_decay_factor=cfg.getfloat("classifier", "lr_decay_factor"))
    clf = train_classifier(train, cc, cfg.getint("classifier", "seed"), test=test)
    path = out / "classifier.ckpt"
    save_classifier(clf, path)
    _write_manifest(out, "train-classifier", cfg, {}, [path])
    print(f"train-classifier dataset={train.name} test_accuracy={clf.test_accuracy:.4f} "
          f"checkpoint={path}")
    return 0


def cmd_train_contranet(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    train = _load_split(cfg, "train")
    gc = CganConfig(
        latent_dim=cfg.getint("cgan", "latent_dim"),
        iterations=cfg.getint("cgan", "iterations"),
        batch_size=cfg.getint("cgan", "batch_size"),
        lr_generator=cfg.getfloat("cgan", "lr_generator"),
        lr_encoder=cfg.getfloat("cgan", "lr_encoder"),
        lr_discriminator=cfg.getfloat("cgan", "lr_discriminator"),
        discriminator_steps=cfg.getint("cgan", "discriminator_steps"),
        lambda_ssim=cfg.getfloat("cgan", "lambda_ssim"),
        base_channels=cfg.getint("cgan", "base_channels"))
    ckpt = train_cgan(train, gc, cfg.getint("cgan", "seed"))
    path = out / "contranet.ckpt"
    save_cgan(ckpt, path)
    loss_csv = out / "contranet_losses.csv"
    write_loss_history_csv(ckpt, loss_csv)
    _write_manifest(out, "train-contranet", cfg, {}, [path, loss_csv])
    print(f"train-contranet dataset={train.name} iterations={gc.iterations} checkpoint={path}")
    return 0


def cmd_train_metric(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    cgan_path = _artifact(args, "contranet", out, "contranet.ckpt", "contranet")
    cgan = load_cgan(cgan_path)
    train = _load_split(cfg, "train")
    mc = MetricConfig(
        embedding_dim=cfg.getint("metric", "embedding_dim"),
        steps=cfg.getint("metric", "steps"),
        batch_size=cfg.getint("metric", "batch_size"),
        learning_rate=cfg.getfloat("metric", "learning_rate"),
        margin=cfg.getfloat("metric", "margin"),
        mining=cfg.get("metric", "mining"))
    net = train_metric(cgan, train, mc, cfg.getint("metric", "seed"))
    path = out / "metric.ckpt"
    h, w, c = train.image_shape
    save_metric(net, path, seed=cfg.getint("metric", "seed"),
                meta={"mining": mc.mining, "margin": mc.margin},
                in_channels=c, image_hw=h)
    _write_manifest(out, "train-metric", cfg, {"contranet": cgan_path}, [path])
    print(f"train-metric dataset={train.name} steps={mc.steps} checkpoint={path}")
    return 0


def cmd_calibrate_saec(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    train = _load_split(cfg, "train")
    det = calibrate_saec_detector(
        train,
        noise_amplitudes=cfg.getfloats("saec", "noise_amplitudes"),
        target_clean_fpr=cfg.getfloat("saec", "target_clean_fpr"),
        seed=cfg.getint("saec", "seed"),
        p=cfg.getfloat("saec", "p"),
        bins=cfg.getint("saec", "bins"),
        bin_range=(cfg.getfloat("saec", "range_lo"), cfg.getfloat("saec", "range_hi")),
        max_images=cfg.getint("saec", "max_images"))
    path = out / "saec.json"
    save_saec(det, path)
    _write_manifest(out, "calibrate-saec", cfg, {}, [path])
    print(f"calibrate-saec dataset={train.name} direction={det.direction} "
          f"threshold={det.threshold:.6g} record={path}")
    return 0


def cmd_calibrate_sp(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    clf_path = _artifact(args, "classifier", out, "classifier.ckpt", "classifier")
    cgan_path = _artifact(args, "contranet", out, "contranet.ckpt", "contranet")
    metric_path = _artifact(args, "metric", out, "metric.ckpt", "metric")
    clf = load_classifier(clf_path)
    cgan = load_cgan(cgan_path)
    net = load_metric(metric_path)
    train = _load_split(cfg, "train")
    _, validation = train_validation_split(train, cfg.getfloat("sp", "validation_fraction"),
                                           cfg.getint("sp", "validation_seed"))
    sp = calibrate_sp(net, cgan, clf, validation, cfg.getfloat("sp", "target_clean_fpr"))
    path = out / "sp.json"
    save_sp_detector(sp, metric_path, path)
    _write_manifest(out, "calibrate-sp", cfg,
                    {"classifier": clf_path, "contranet": cgan_path, "metric": metric_path},
                    [path])
    print(f"calibrate-sp dataset={train.name} threshold={sp.threshold:.6g} record={path}")
    return 0


def _attack_overrides(cfg: RunConfig) -> dict:
    return {
        "steps": cfg.getint("attack", "steps"),
        "confidence": cfg.getfloat("attack", "confidence"),
        "binary_search_steps": cfg.getint("attack", "binary_search_steps"),
        "iterations": cfg.getint("attack", "iterations"),
        "initial_c": cfg.getfloat("attack", "initial_c"),
        "cw_lr": cfg.getfloat("attack", "cw_lr"),
        "max_iterations": cfg.getint("attack", "max_iterations"),
        "overshoot": cfg.getfloat("attack", "overshoot"),
    }


def cmd_attack(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    clf_path = _artifact(args, "classifier", out, "classifier.ckpt", "classifier")
    clf = load_classifier(clf_path)
    test = _load_split(cfg, "test")
    method = cfg.get("attack", "method")
    norm = cfg.get("attack", "norm")
    n = cfg.getint("attack", "n")
    seed = cfg.getint("attack", "seed")
    overrides = _attack_overrides(cfg)
    clf_hash = file_sha256(clf_path)
    outputs = []
    if method in ("fgsm", "fgm", "bim"):
        for eps in parse_eps_grid(cfg.get("attack", "eps")):
            spec = AttackSpec(method=method, budget=PerturbationBudget(norm, eps), **overrides)
            examples = generate_attack_set(clf, test, spec, n, seed)
            archive = out / f"attacks_{method}_{norm}_eps{eps:.4f}.npz"
            save_attack_set(examples, spec, seed, archive,
                            classifier_checkpoint_hash=clf_hash)
            outputs.append(archive)
            print(f"attack method={method} norm={norm} eps={eps:.4f} n={n} "
                  f"success_rate={success_rate(examples):.3f} archive={archive}")
    else:
        spec = AttackSpec(method=method, norm=norm, **overrides)
        examples = generate_attack_set(clf, test, spec, n, seed)
        archive = out / f"attacks_{method}_{norm}.npz"
        save_attack_set(examples, spec, seed, archive, classifier_checkpoint_hash=clf_hash)
        outputs.append(archive)
        print(f"attack method={method} norm={norm} n={n} "
              f"success_rate={success_rate(examples):.3f} archive={archive}")
    _write_manifest(out, "attack", cfg, {"classifier": clf_path}, outputs)
    return 0


def _load_pipeline(args, cfg, out):
    clf_path = _artifact(args, "classifier", out, "classifier.ckpt", "classifier")
    cgan_path = _artifact(args, "contranet", out, "contranet.ckpt", "contranet")
    metric_path = _artifact(args, "metric", out, "metric.ckpt", "metric")
    saec_path = _artifact(args, "saec", out, "saec.json", "saec")
    sp_path = _artifact(args, "sp", out, "sp.json", "sp")
    clf = load_classifier(clf_path)
    cgan = load_cgan(cgan_path)
    net = load_metric(metric_path)
    saec_det = load_saec(saec_path)
    sp = load_sp_detector(sp_path, metric=net)
    inputs = {"classifier": clf_path, "contranet": cgan_path, "metric": metric_path,
              "saec": saec_path, "sp": sp_path}
    return saec_det, clf, sp, cgan, inputs


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    saec_det, clf, sp, cgan, inputs = _load_pipeline(args, cfg, out)
    test = _load_split(cfg, "test")
    method = cfg.get("attack", "method")
    norm = cfg.get("attack", "norm")
    detector = cfg.get("eval", "detector")
    eps_grid = (parse_eps_grid(cfg.get("attack", "eps"))
                if method in ("fgsm", "fgm", "bim") else None)
    curves = sweep_curves(saec_det, clf, sp, cgan, test, method, norm, eps_grid,
                          n_per_point=cfg.getint("eval", "n_per_point"),
                          seed=cfg.getint("eval", "seed"), detectors=(detector,),
                          n_bins=cfg.getint("eval", "n_bins"),
                          attack_overrides=_attack_overrides(cfg))
    points = curves[detector]
    csv_path = out / f"curve_{method}_{norm}_{detector}.csv"
    write_curve_csv(points, csv_path)
    _write_manifest(out, "evaluate", cfg, inputs, [csv_path])
    det_points = [p for p in points if p.metric == "acc_detector"]
    rc_points = [p for p in points if p.metric == "acc_rc"]
    mean_det = float(np.mean([p.value for p in det_points])) if det_points else float("nan")
    mean_rc = float(np.mean([p.value for p in rc_points])) if rc_points else float("nan")
    print(f"evaluate method={method} norm={norm} detector={detector} "
          f"points={len(det_points)} mean_acc_detector={mean_det:.4f} "
          f"mean_acc_rc={mean_rc:.4f} curve={csv_path}")
    return 0


def cmd_layer_curves(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    saec_det, clf, sp, cgan, inputs = _load_pipeline(args, cfg, out)
    test = _load_split(cfg, "test")
    method = cfg.get("attack", "method")
    norm = cfg.get("attack", "norm")
    eps_grid = (parse_eps_grid(cfg.get("attack", "eps"))
                if method in ("fgsm", "fgm", "bim") else None)
    curves = sweep_curves(saec_det, clf, sp, cgan, test, method, norm, eps_grid,
                          n_per_point=cfg.getint("eval", "n_per_point"),
                          seed=cfg.getint("eval", "seed"),
                          detectors=("full", "lp", "sp"),
                          n_bins=cfg.getint("eval", "n_bins"),
                          attack_overrides=_attack_overrides(cfg))
    outputs = []
    for mode, points in curves.items():
        csv_path = out / f"curve_{method}_{norm}_{mode}.csv"
        write_curve_csv(points, csv_path)
        outputs.append(csv_path)
    _write_manifest(out, "layer-curves", cfg, inputs, outputs)
    print(f"layer-curves method={method} norm={norm} files="
          + ",".join(str(p) for p in outputs))
    return 0


def cmd_adaptive_case_study(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    saec_det, clf, sp, cgan, inputs = _load_pipeline(args, cfg, out)
    test = _load_split(cfg, "test")
    n = min(cfg.getint("attack", "n"), len(test))
    seed = cfg.getint("attack", "seed")
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.choice(len(test), size=n, replace=False)
    images = test.images[idx]
    labels = test.labels[idx]
    eps_grid = parse_eps_grid(cfg.get("attack", "eps"))
    case_dir = out / f"case_study_{args.mode}"
    case_dir.mkdir(parents=True, exist_ok=True)
    if args.mode == "input":
        targets = (labels + rng.integers(1, test.class_count, size=n)) % test.class_count
        rows = adaptive_input_attack(cgan, sp.metric, clf, sp, images, targets,
                                     eps_grid, out_dir=case_dir)
    else:
        spec = AttackSpec(method="fgsm",
                          budget=PerturbationBudget("linf", max(eps_grid) or 0.2))
        examples = generate_attack_set(clf, test, spec, n, seed + 17)
        adv = [e for e in examples if e.success] or examples
        images = np.stack([e.perturbed for e in adv])
        labels = np.array([e.predicted_label for e in adv])
        rows = adaptive_latent_attack(cgan, sp.metric, clf, sp, images, labels,
                                      eps_grid, out_dir=case_dir)
    _write_manifest(out, f"adaptive-case-study-{args.mode}", cfg, inputs, [case_dir])
    for row in rows:
        print(f"case-study mode={args.mode} " +
              " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in row.items()))
    return 0


def cmd_export_failures(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    saec_det, clf, sp, cgan, inputs = _load_pipeline(args, cfg, out)
    archive = _require(Path(args.attack_archive), "attack archive")
    examples = load_attack_set(archive)
    test = _load_split(cfg, "test")
    rng = np.random.Generator(np.random.PCG64(cfg.getint("eval", "seed")))
    n_clean = min(len(examples), len(test))
    clean_idx = rng.choice(len(test), size=n_clean, replace=False)
    images = np.concatenate([test.images[clean_idx],
                             np.stack([e.perturbed for e in examples])])
    is_ae = np.concatenate([np.zeros(n_clean, bool), np.ones(len(examples), bool)])
    verdicts = verdict_stream(saec_det, clf, sp, cgan, images)
    verdict_csv = out / "failure_verdicts.csv"
    write_verdicts_csv(verdicts, verdict_csv)
    manifest = export_failures(verdicts, images, is_ae, cgan, clf, args.k, out / "failures")
    _write_manifest(out, "export-failures", cfg, {**inputs, "attack_archive": archive},
                    [verdict_csv, out / "failures"])
    print(f"export-failures k={args.k} "
          f"false_negatives={len(manifest['false_negatives'])} "
          f"false_positives={len(manifest['false_positives'])} out={out / 'failures'}")
    return 0


def cmd_saec_score(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    saec_path = _artifact(args, "saec", out, "saec.json", "saec")
    det = load_saec(saec_path)
    test = _load_split(cfg, "test")
    n = min(cfg.getint("attack", "n"), len(test))
    rng = np.random.Generator(np.random.PCG64(cfg.getint("eval", "seed")))
    idx = rng.choice(len(test), size=n, replace=False)
    csv_path = out / "saec_scores.csv"
    flagged = 0
    with open(csv_path, "w") as f:
        f.write("# schema=mixdefense-saec-scores-v1\n")
        f.write("input_id,score,flagged\n")
        for i in idx:
            s = det.score(test.images[i])
            flag = s < det.threshold if det.direction == "flag_below" else s > det.threshold
            flagged += int(flag)
            f.write(f"{i},{s:.9g},{1 if flag else 0}\n")
    _write_manifest(out, "saec-score", cfg, {"saec": saec_path}, [csv_path])
    print(f"saec-score n={n} flag_rate={flagged / n:.4f} scores={csv_path}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = _config_from_args(args)
    out = _outdir(args, cfg)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for path in args.curves.split(","):
        points = read_curve_csv(_require(Path(path.strip()), "curve CSV"))
        for metric in sorted({p.metric for p in points}):
            sel = sorted((p for p in points if p.metric == metric), key=lambda p: p.budget)
            ax.plot([p.budget for p in sel], [p.value for p in sel], marker="o",
                    label=f"{Path(path).stem}:{metric}")
    ax.set_xlabel("perturbation budget")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    target = Path(args.out_file) if args.out_file else out / "curves.png"
    fig.savefig(target, dpi=150, bbox_inches="tight")
    plt.close(fig)
    print(f"plot file={target}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (defaults apply when omitted)")
    p.add_argument("--out", help=f"output directory (or ${OUTPUT_ENV_VAR}, or out.dir)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config value; repeatable")
    p.add_argument("--jobs", type=int, default=None, help="cap worker thread count")


_ALIAS = {
    "dataset": ("data", "name"),
    "epochs": ("classifier", "epochs"),
    "arch": ("classifier", "arch"),
    "iterations": ("cgan", "iterations"),
    "steps": ("metric", "steps"),
    "fpr": None,  # handled per command
    "attack": ("attack", "method"),
    "method": ("attack", "method"),
    "norm": ("attack", "norm"),
    "eps": ("attack", "eps"),
    "n": ("attack", "n"),
    "n_per_point": ("eval", "n_per_point"),
    "detector": ("eval", "detector"),
    "seed": None,  # handled per command
}


def _collect_overrides(args, command: str) -> None:
    pairs = []
    for attr, target in _ALIAS.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if attr == "fpr":
            section = "sp" if command == "calibrate-sp" else "saec"
            pairs.append((section, "target_clean_fpr", str(value)))
        elif attr == "seed":
            section = {"train-classifier": "classifier", "train-contranet": "cgan",
                       "train-metric": "metric", "calibrate-saec": "saec",
                       "attack": "attack", "evaluate": "eval", "layer-curves": "eval",
                       "adaptive-case-study": "attack", "export-failures": "eval",
                       "saec-score": "eval"}.get(command)
            if section:
                pairs.append((section, "seed", str(value)))
        else:
            pairs.append((target[0], target[1], str(value)))
    if getattr(args, "jobs", None):
        pairs.append(("out", "jobs", str(args.jobs)))
    args._overrides = pairs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixdefense",
                                     description="Two-layer adversarial-example "
                                                 "detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, flags=(), extra=None):
        p = sub.add_parser(name)
        _add_common(p)
        for flag in flags:
            p.add_argument(f"--{flag.replace('_', '-')}", dest=flag)
        if extra:
            extra(p)
        p.set_defaults(func=func, _command=name)
        return p

    add("train-classifier", cmd_train_classifier, ["dataset", "epochs", "arch", "seed"])
    add("train-contranet", cmd_train_contranet, ["dataset", "iterations", "seed"])
    add("train-metric", cmd_train_metric, ["dataset", "steps", "seed", "contranet"])
    add("calibrate-saec", cmd_calibrate_saec, ["dataset", "fpr", "seed"])
    add("calibrate-sp", cmd_calibrate_sp,
        ["dataset", "fpr", "classifier", "contranet", "metric"])
    add("attack", cmd_attack, ["dataset", "classifier", "method", "norm", "eps", "n", "seed"])
    add("evaluate", cmd_evaluate,
        ["dataset", "classifier", "contranet", "metric", "saec", "sp",
         "attack", "norm", "eps", "n_per_point", "detector", "seed"])
    add("layer-curves", cmd_layer_curves,
        ["dataset", "classifier", "contranet", "metric", "saec", "sp",
         "attack", "norm", "eps", "n_per_point", "seed"])
    add("adaptive-case-study", cmd_adaptive_case_study,
        ["dataset", "classifier", "contranet", "metric", "saec", "sp", "eps", "n", "seed"],
        extra=lambda p: p.add_argument("--mode", choices=("input", "latent"),
                                       required=True))
    add("export-failures", cmd_export_failures,
        ["dataset", "classifier", "contranet", "metric", "saec", "sp", "seed"],
        extra=lambda p: (p.add_argument("--attack-archive", required=True),
                         p.add_argument("--k", type=int, default=10)))
    add("saec-score", cmd_saec_score, ["dataset", "saec", "n", "seed"])
    add("plot", cmd_plot, [],
        extra=lambda p: (p.add_argument("--curves", required=True,
                                        help="comma-separated curve CSV paths"),
                         p.add_argument("--out-file")))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _collect_overrides(args, args._command)
    try:
        return args.func(args)
    except Exception as e:  # single-line machine-parsable error contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
