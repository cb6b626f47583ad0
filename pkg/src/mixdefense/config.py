"""Run configuration: flat key=value sections with documented defaults.

A config file is INI-style text. Every key has a default below; unknown
sections or keys are rejected so typos fail loudly. Command-line flags
override file values, which override defaults.
"""

from __future__ import annotations

import configparser
from pathlib import Path

# every known key with its default (as the string form the parser sees)
DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "name": "synth-digits",       # synth-digits | synth-shapes | mnist-idx | cifar10-bin
        "train_images": "",           # mnist-idx paths
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "train_batches": "",          # cifar10-bin: comma-separated paths
        "test_batches": "",
        "synth_train_size": "8000",
        "synth_test_size": "2000",
        "seed": "7",
    },
    "classifier": {
        "arch": "lenet",
        "epochs": "3",
        "batch_size": "128",
        "learning_rate": "0.05",
        "momentum": "0.9",
        "weight_decay": "0.0005",
        "lr_decay_epochs": "",
        "lr_decay_factor": "0.1",
        "seed": "1",
    },
    "cgan": {
        "latent_dim": "128",
        "iterations": "2500",
        "batch_size": "32",
        "lr_generator": "0.0002",
        "lr_encoder": "0.0002",
        "lr_discriminator": "0.0002",
        "discriminator_steps": "2",
        "lambda_ssim": "1.0",
        "base_channels": "64",
        "seed": "2",
    },
    "metric": {
        "embedding_dim": "64",
        "steps": "1200",
        "batch_size": "32",
        "learning_rate": "0.001",
        "margin": "1.0",
        "mining": "semi_hard",
        "seed": "3",
    },
    "saec": {
        "p": "8",
        "bins": "256",
        "range_lo": "-4",
        "range_hi": "4",
        "noise_amplitudes": "0.05,0.1,0.2,0.3",
        "target_clean_fpr": "0.01",
        "max_images": "2000",
        "seed": "4",
    },
    "sp": {
        "target_clean_fpr": "0.05",
        "validation_fraction": "0.2",
        "validation_seed": "11",
    },
    "attack": {
        "method": "fgsm",
        "norm": "linf",
        "eps": "0.05:0.4:10",         # start:stop:count inclusive linear grid
        "n": "500",
        "steps": "10",
        "confidence": "0.0",
        "binary_search_steps": "9",
        "iterations": "1000",
        "initial_c": "0.01",
        "cw_lr": "0.01",
        "max_iterations": "50",
        "overshoot": "0.02",
        "seed": "6",
    },
    "eval": {
        "n_per_point": "500",
        "n_bins": "10",
        "detector": "full",
        "seed": "8",
    },
    "out": {
        "dir": "runs",
        "jobs": "0",                  # 0 = leave the worker count untouched
    },
}


class ConfigError(ValueError):
    """Config file contains unknown sections/keys or malformed values."""


class RunConfig:
    """Merged defaults + file + flag overrides, with typed accessors."""

    def __init__(self, values: dict[str, dict[str, str]]):
        self._values = values

    @classmethod
    def load(cls, path=None, overrides: dict[tuple[str, str], str] | None = None) -> "RunConfig":
        values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        if path is not None:
            parser = configparser.ConfigParser()
            text = Path(path).read_text()
            parser.read_string(text, source=str(path))
            for section in parser.sections():
                if section not in DEFAULTS:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, value in parser.items(section):
                    if key not in DEFAULTS[section]:
                        raise ConfigError(f"unknown config key {section}.{key}")
                    values[section][key] = value
        for (section, key), value in (overrides or {}).items():
            if section not in DEFAULTS or key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            values[section][key] = str(value)
        return cls(values)

    def get(self, section: str, key: str) -> str:
        return self._values[section][key]

    def getint(self, section: str, key: str) -> int:
        return int(self.get(section, key))

    def getfloat(self, section: str, key: str) -> float:
        return float(self.get(section, key))

    def getfloats(self, section: str, key: str) -> list[float]:
        raw = self.get(section, key).strip()
        return [float(v) for v in raw.split(",") if v.strip()] if raw else []

    def getints(self, section: str, key: str) -> list[int]:
        raw = self.get(section, key).strip()
        return [int(v) for v in raw.split(",") if v.strip()] if raw else []

    def getpaths(self, section: str, key: str) -> list[str]:
        raw = self.get(section, key).strip()
        return [v.strip() for v in raw.split(",") if v.strip()] if raw else []

    def snapshot(self) -> dict:
        return {s: dict(kv) for s, kv in self._values.items()}


def parse_eps_grid(text: str) -> list[float]:
    """start:stop:count inclusive linear spacing, or a single value."""
    parts = text.split(":")
    if len(parts) == 1:
        return [float(parts[0])]
    if len(parts) != 3:
        raise ConfigError(f"eps grid must be 'start:stop:count', got {text!r}")
    start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    if count < 1:
        raise ConfigError("eps grid count must be >= 1")
    if count == 1:
        return [start]
    import numpy as np
    return [float(v) for v in np.linspace(start, stop, count)]
