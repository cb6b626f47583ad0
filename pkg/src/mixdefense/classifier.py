"""The target classifier under defense: training, inference, input gradients.

Two desk-scale architectures: a LeNet-style convnet for 28x28 grayscale and
a compact residual network for 32x32 RGB. Inference is deterministic (eval
mode, argmax ties broken toward the lowest class index), which keeps every
downstream verdict reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledDataset, batches
from .utils import image_to_tensor, images_to_tensor, load_state_arrays, state_dict_arrays


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class ClassifierConfig:
    arch: str = "lenet"          # "lenet" (28x28x1) or "small_resnet" (32x32x3)
    epochs: int = 3
    batch_size: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple[int, ...] = ()   # epochs after which lr is multiplied by decay
    lr_decay_factor: float = 0.1


class LeNet(nn.Module):
    """2 conv + 2 fully-connected, for single-channel 28x28 inputs."""

    def __init__(self, class_count: int):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 5)
        self.conv2 = nn.Conv2d(16, 32, 5)
        self.fc1 = nn.Linear(32 * 4 * 4, 128)
        self.fc2 = nn.Linear(128, class_count)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        return self.fc2(x)


class _BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SmallResNet(nn.Module):
    """Compact residual net (~0.7M parameters) for 3-channel 32x32 inputs."""

    def __init__(self, class_count: int):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1, bias=False), nn.BatchNorm2d(32), nn.ReLU())
        self.stage1 = nn.Sequential(_BasicBlock(32, 32), _BasicBlock(32, 32))
        self.stage2 = nn.Sequential(_BasicBlock(32, 64, stride=2), _BasicBlock(64, 64))
        self.stage3 = nn.Sequential(_BasicBlock(64, 128, stride=2), _BasicBlock(128, 128))
        self.head = nn.Linear(128, class_count)

    def forward(self, x):
        x = self.stage3(self.stage2(self.stage1(self.stem(x))))
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.head(x)


_ARCHS: dict[str, tuple[Callable[[int], nn.Module], tuple[int, int, int]]] = {
    "lenet": (LeNet, (28, 28, 1)),
    "small_resnet": (SmallResNet, (32, 32, 3)),
}


@dataclass
class TargetClassifier:
    net: nn.Module
    arch: str
    input_shape: tuple[int, int, int]
    class_count: int
    seed: int
    config: ClassifierConfig
    test_accuracy: float | None = None
    deterministic_kernels: bool = True  # CPU kernels; recorded per the reproducibility contract


def build_net(arch: str, class_count: int) -> tuple[nn.Module, tuple[int, int, int]]:
    if arch not in _ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(_ARCHS)}")
    ctor, shape = _ARCHS[arch]
    return ctor(class_count), shape


def train_classifier(train: LabeledDataset, config: ClassifierConfig, seed: int,
                     test: LabeledDataset | None = None) -> TargetClassifier:
    """SGD-with-momentum training; reproducible given (config, seed)."""
    if len(train) == 0:
        raise ValueError("training set is empty")
    torch.manual_seed(seed)
    net, input_shape = build_net(config.arch, train.class_count)
    if train.image_shape != input_shape:
        raise ValueError(f"{config.arch} expects {input_shape}, dataset has {train.image_shape}")
    opt = torch.optim.SGD(net.parameters(), lr=config.learning_rate,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    lr = config.learning_rate
    net.train()
    for epoch in range(config.epochs):
        if epoch in config.lr_decay_epochs:
            lr *= config.lr_decay_factor
            for group in opt.param_groups:
                group["lr"] = lr
        for batch in batches(train, min(config.batch_size, len(train)),
                             seed=seed * 1000 + epoch, shuffle=True):
            xb = images_to_tensor(batch.images)
            yb = torch.from_numpy(batch.labels)
            opt.zero_grad()
            loss = F.cross_entropy(net(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} (lr={lr}); aborting")
            loss.backward()
            opt.step()
    net.eval()
    clf = TargetClassifier(net=net, arch=config.arch, input_shape=input_shape,
                           class_count=train.class_count, seed=seed, config=config)
    if test is not None:
        clf.test_accuracy = accuracy(clf, test)
    return clf


def _check_shape(clf: TargetClassifier, x: np.ndarray) -> None:
    if tuple(x.shape) != clf.input_shape:
        raise ValueError(f"input shape {x.shape} does not match classifier {clf.input_shape}")


def logits(clf: TargetClassifier, x: np.ndarray) -> np.ndarray:
    """Raw class scores; deterministic in eval mode."""
    _check_shape(clf, x)
    clf.net.eval()
    with torch.no_grad():
        out = clf.net(image_to_tensor(x)).squeeze(0).numpy()
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("classifier produced non-finite logits")
    return out


def logits_batch(clf: TargetClassifier, xs: np.ndarray) -> np.ndarray:
    clf.net.eval()
    with torch.no_grad():
        return clf.net(images_to_tensor(xs)).numpy()


def softmax_probabilities(clf: TargetClassifier, x: np.ndarray) -> np.ndarray:
    z = logits(clf, x)
    e = np.exp(z - z.max())
    return e / e.sum()


def predict(clf: TargetClassifier, x: np.ndarray) -> int:
    """argmax of logits; ties resolve to the lowest class index."""
    return int(np.argmax(logits(clf, x)))


def predict_batch(clf: TargetClassifier, xs: np.ndarray) -> np.ndarray:
    return np.argmax(logits_batch(clf, xs), axis=1)


def accuracy(clf: TargetClassifier, ds: LabeledDataset, batch_size: int = 512) -> float:
    correct = 0
    for start in range(0, len(ds), batch_size):
        stop = min(start + batch_size, len(ds))
        pred = predict_batch(clf, ds.images[start:stop])
        correct += int((pred == ds.labels[start:stop]).sum())
    return correct / len(ds)


@dataclass(frozen=True)
class LossSpec:
    """Scalar loss whose input-gradient the attacks consume.

    kind: "true_xent" (cross-entropy at the true label), "targeted_xent"
    (cross-entropy at a chosen target label), or "custom" (callable on the
    logits tensor returning a scalar).
    """
    kind: str
    label: int | None = None
    custom: Callable[[torch.Tensor], torch.Tensor] | None = None


def _loss_value(spec: LossSpec, out: torch.Tensor, class_count: int) -> torch.Tensor:
    if spec.kind in ("true_xent", "targeted_xent"):
        if spec.label is None or not (0 <= spec.label < class_count):
            raise ValueError(f"loss label {spec.label} invalid for {class_count} classes")
        return F.cross_entropy(out, torch.tensor([spec.label]))
    if spec.kind == "custom":
        if spec.custom is None:
            raise ValueError("custom loss requires a callable")
        return spec.custom(out.squeeze(0))
    raise ValueError(f"unknown loss kind {spec.kind!r}")


def input_gradient(clf: TargetClassifier, x: np.ndarray, loss_spec: LossSpec) -> np.ndarray:
    """Gradient of the specified scalar loss w.r.t. the input pixels."""
    _check_shape(clf, x)
    clf.net.eval()
    xt = image_to_tensor(x).requires_grad_(True)
    loss = _loss_value(loss_spec, clf.net(xt), clf.class_count)
    (grad,) = torch.autograd.grad(loss, xt)
    g = grad.squeeze(0).permute(1, 2, 0).numpy()
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return g


def input_gradient_batch(clf: TargetClassifier, xs: np.ndarray, ys: np.ndarray,
                         targeted: bool = False) -> np.ndarray:
    """Per-sample cross-entropy input gradients for a batch (sum trick)."""
    clf.net.eval()
    xt = images_to_tensor(xs).requires_grad_(True)
    losses = F.cross_entropy(clf.net(xt), torch.from_numpy(np.asarray(ys)), reduction="sum")
    (grad,) = torch.autograd.grad(losses, xt)
    g = grad.permute(0, 2, 3, 1).numpy()
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return g


def save_classifier(clf: TargetClassifier, path) -> None:
    arch_desc = {
        "arch": clf.arch,
        "input_shape": list(clf.input_shape),
        "class_count": clf.class_count,
        "layers": [f"{name}: {mod}" for name, mod in clf.net.named_children()],
    }
    meta = {
        "config": asdict(clf.config),
        "test_accuracy": clf.test_accuracy,
        "deterministic_kernels": clf.deterministic_kernels,
    }
    save_checkpoint(path, kind="classifier", architecture=arch_desc, seed=clf.seed,
                    arrays=state_dict_arrays(clf.net), meta=meta)


def load_classifier(path) -> TargetClassifier:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "classifier":
        raise ValueError(f"{path} holds a {ckpt.kind!r} checkpoint, not a classifier")
    arch = ckpt.architecture["arch"]
    net, input_shape = build_net(arch, ckpt.architecture["class_count"])
    load_state_arrays(net, ckpt.arrays)
    net.eval()
    cfg_dict = dict(ckpt.meta.get("config", {}))
    if "lr_decay_epochs" in cfg_dict:
        cfg_dict["lr_decay_epochs"] = tuple(cfg_dict["lr_decay_epochs"])
    config = ClassifierConfig(**cfg_dict) if cfg_dict else ClassifierConfig(arch=arch)
    return TargetClassifier(net=net, arch=arch, input_shape=input_shape,
                            class_count=ckpt.architecture["class_count"], seed=ckpt.seed,
                            config=config, test_accuracy=ckpt.meta.get("test_accuracy"),
                            deterministic_kernels=ckpt.meta.get("deterministic_kernels", True))
