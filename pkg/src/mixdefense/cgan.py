"""Class-conditional reconstruction model: encoder, generator, discriminator.

The encoder maps an image to a diagonal-Gaussian latent; the generator
rebuilds the image from the latent *conditioned on a class label* through
class-conditional batch normalization; a projection discriminator (shared
feature trunk, unconditional head plus class-embedding inner product)
pushes reconstructions toward the real conditional distribution. After
training only encoder and generator are used: an input reconstructed under
a label that contradicts its content comes out unfaithful, which is the
signal the semantic defense layer thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import TrainingDivergedError
from .data import LabeledDataset, batches
from .utils import (image_to_tensor, images_to_tensor, load_state_arrays,
                    state_dict_arrays, tensor_to_image, tensor_to_images)

SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# ---------------------------------------------------------------------------
# distances


def _uniform_window_means(x: torch.Tensor, win: int) -> torch.Tensor:
    c = x.shape[1]
    weight = torch.full((c, 1, win, win), 1.0 / (win * win), dtype=x.dtype)
    return F.conv2d(x, weight, groups=c)


def ssim_t(x: torch.Tensor, y: torch.Tensor, win: int = SSIM_WINDOW,
           c1: float = SSIM_C1, c2: float = SSIM_C2) -> torch.Tensor:
    """Mean SSIM over valid win x win windows, per batch item (B,) tensor.

    Uniform window, unbiased covariance normalization (N/(N-1)), data range
    [0,1]; channels are averaged, matching the standard reference
    implementation's defaults.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    np_ = win * win
    cov_norm = np_ / (np_ - 1)
    ux = _uniform_window_means(x, win)
    uy = _uniform_window_means(y, win)
    uxx = _uniform_window_means(x * x, win)
    uyy = _uniform_window_means(y * y, win)
    uxy = _uniform_window_means(x * y, win)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return s.mean(dim=(1, 2, 3))


def reconstruction_distance_t(x: torch.Tensor, y: torch.Tensor,
                              lambda_ssim: float = 1.0) -> torch.Tensor:
    """Dist(x,y) = mean squared error + lambda * (1 - SSIM), per batch item."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = ((x - y) ** 2).mean(dim=(1, 2, 3))
    return mse + lambda_ssim * (1.0 - ssim_t(x, y))


def reconstruction_distance(x: np.ndarray, y: np.ndarray, lambda_ssim: float = 1.0) -> float:
    """Single-image reconstruction distance on (H,W,C) arrays."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    with torch.no_grad():
        d = reconstruction_distance_t(image_to_tensor(x).double(),
                                      image_to_tensor(y).double(), lambda_ssim)
    return float(d.item())


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    with torch.no_grad():
        return float(ssim_t(image_to_tensor(x).double(), image_to_tensor(y).double()).item())


# ---------------------------------------------------------------------------
# latent + KL


@dataclass(frozen=True)
class LatentVector:
    z: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None    # per-coordinate scale (standard deviation)


def kl_term_t(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q(z|x) || N(0,I)) per batch item, with the variance convention.

    0.5 * sum(var + mean^2 - 1 - log var); zero exactly at mean=0, var=1.
    """
    return 0.5 * (logvar.exp() + mean ** 2 - 1.0 - logvar).sum(dim=-1)


def kl_term(mean: np.ndarray, variance: np.ndarray) -> float:
    """Closed-form Gaussian KL to the standard normal; variance must be > 0."""
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance <= 0):
        raise ValueError("variance must be strictly positive")
    return float(0.5 * np.sum(variance + mean ** 2 - 1.0 - np.log(variance)))


# ---------------------------------------------------------------------------
# networks


class Encoder(nn.Module):
    """4 conv blocks -> (mean, log-variance) of the latent posterior."""

    def __init__(self, in_channels: int, image_hw: int, latent_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(64, 128, 3, stride=2, padding=1)
        self.conv4 = nn.Conv2d(128, 128, 3, padding=1)
        hw = (image_hw + 7) // 8
        self.mean_head = nn.Linear(128 * hw * hw, latent_dim)
        self.logvar_head = nn.Linear(128 * hw * hw, latent_dim)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.1)
        h = F.leaky_relu(self.conv2(h), 0.1)
        h = F.leaky_relu(self.conv3(h), 0.1)
        h = F.leaky_relu(self.conv4(h), 0.1)
        h = h.flatten(1)
        return self.mean_head(h), self.logvar_head(h)


class ClassConditionalBatchNorm(nn.Module):
    """Batch norm whose scale/shift are looked up per conditioning class."""

    def __init__(self, num_features: int, class_count: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(num_features, affine=False)
        self.gamma = nn.Embedding(class_count, num_features)
        self.beta = nn.Embedding(class_count, num_features)
        nn.init.ones_(self.gamma.weight)
        nn.init.zeros_(self.beta.weight)

    def forward(self, x, y):
        out = self.bn(x)
        g = self.gamma(y).unsqueeze(-1).unsqueeze(-1)
        b = self.beta(y).unsqueeze(-1).unsqueeze(-1)
        return g * out + b


class _GenBlock(nn.Module):
    def __init__(self, c_in, c_out, class_count, upsample):
        super().__init__()
        self.upsample = upsample
        self.cbn1 = ClassConditionalBatchNorm(c_in, class_count)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.cbn2 = ClassConditionalBatchNorm(c_out, class_count)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, y):
        h = F.relu(self.cbn1(x, y))
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.cbn2(h, y)))
        return h + self.skip(x)


class ConditionalGenerator(nn.Module):
    """Residual upsampling generator with class batch-norm conditioning.

    Output goes through a sigmoid, so pixels always land in [0,1].
    """

    def __init__(self, out_channels: int, image_hw: int, class_count: int,
                 latent_dim: int, base: int = 128):
        super().__init__()
        self.h0 = image_hw // 4
        self.base = base
        self.fc = nn.Linear(latent_dim, base * self.h0 * self.h0)
        self.blocks = nn.ModuleList([
            _GenBlock(base, base, class_count, upsample=False),
            _GenBlock(base, base // 2, class_count, upsample=True),
            _GenBlock(base // 2, base // 4, class_count, upsample=True),
            _GenBlock(base // 4, base // 4, class_count, upsample=False),
        ])
        self.out_conv = nn.Conv2d(base // 4, out_channels, 3, padding=1)

    def forward(self, z, y):
        h = self.fc(z).view(-1, self.base, self.h0, self.h0)
        for block in self.blocks:
            h = block(h, y)
        return torch.sigmoid(self.out_conv(F.relu(h)))


class _DiscBlock(nn.Module):
    def __init__(self, c_in, c_out, downsample):
        super().__init__()
        self.downsample = downsample
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = self.conv2(F.relu(self.conv1(F.relu(x))))
        s = self.skip(x)
        if self.downsample:
            h = F.avg_pool2d(h, 2)
            s = F.avg_pool2d(s, 2)
        return h + s


class ProjectionDiscriminator(nn.Module):
    """Feature trunk + unconditional head + class-embedding projection.

    score(x,y) = linear(h) + <embedding(y), h>, h = global sum pool of the
    trunk features. The score is raw (pre-sigmoid).
    """

    def __init__(self, in_channels: int, class_count: int, feat: int = 128):
        super().__init__()
        self.blocks = nn.Sequential(
            _DiscBlock(in_channels, 32, downsample=True),
            _DiscBlock(32, 64, downsample=True),
            _DiscBlock(64, feat, downsample=True),
            _DiscBlock(feat, feat, downsample=False),
        )
        self.uncond = nn.Linear(feat, 1)
        self.embed = nn.Embedding(class_count, feat)

    def features(self, x):
        return F.relu(self.blocks(x)).sum(dim=(2, 3))

    def forward(self, x, y):
        h = self.features(x)
        return self.uncond(h).squeeze(-1) + (self.embed(y) * h).sum(dim=1)


# ---------------------------------------------------------------------------
# public ops


def encode(enc: Encoder, x: np.ndarray, mode: str = "mean",
           seed: int | None = None) -> LatentVector:
    """Posterior latent for one image; "mean" is deterministic, "sample"
    draws z = mean + std * eps with a seeded standard normal eps."""
    enc.eval()
    with torch.no_grad():
        mean, logvar = enc(image_to_tensor(x))
    mean = mean.squeeze(0)
    std = (0.5 * logvar.squeeze(0)).exp()
    if mode == "mean":
        z = mean
    elif mode == "sample":
        if seed is None:
            raise ValueError("sample mode requires a seed")
        g = torch.Generator()
        g.manual_seed(int(seed))
        z = mean + std * torch.randn(mean.shape, generator=g)
    else:
        raise ValueError(f"unknown encode mode {mode!r}")
    return LatentVector(z=z.numpy(), mean=mean.numpy(), std=std.numpy())


def reconstruct(gen: ConditionalGenerator, z, y: int) -> np.ndarray:
    """Deterministic decode of latent z under class y; pixels in [0,1]."""
    if isinstance(z, LatentVector):
        z = z.z
    gen.eval()
    zt = torch.from_numpy(np.asarray(z, dtype=np.float32)).reshape(1, -1)
    yt = torch.tensor([int(y)])
    if not 0 <= int(y) < gen.blocks[0].cbn1.gamma.num_embeddings:
        raise ValueError(f"class index {y} out of range")
    with torch.no_grad():
        out = gen(zt, yt)
    return tensor_to_image(out)


def discriminate(dis: ProjectionDiscriminator, x: np.ndarray, y: int) -> float:
    if not 0 <= int(y) < dis.embed.num_embeddings:
        raise ValueError(f"class index {y} out of range")
    dis.eval()
    with torch.no_grad():
        s = dis(image_to_tensor(x), torch.tensor([int(y)]))
    return float(s.item())


def _sample_eps(shape, seed: int) -> torch.Tensor:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return torch.randn(shape, generator=g)


def _encode_sample_t(enc, xb, eps):
    mean, logvar = enc(xb)
    std = (0.5 * logvar).exp()
    return mean + std * eps, mean, logvar


def encoder_loss(images: np.ndarray, labels: np.ndarray, enc: Encoder,
                 gen: ConditionalGenerator, seed: int = 0,
                 eps: torch.Tensor | None = None, lambda_ssim: float = 1.0) -> float:
    """Mean over the batch of KL(q(z|x)||N(0,I)) + Dist(x, G(E(x), y))."""
    enc.eval(); gen.eval()
    xb = images_to_tensor(images)
    yb = torch.from_numpy(np.asarray(labels))
    with torch.no_grad():
        mean, logvar = enc(xb)
        if eps is None:
            eps = _sample_eps(mean.shape, seed)
        z = mean + (0.5 * logvar).exp() * eps
        recon = gen(z, yb)
        loss = kl_term_t(mean, logvar) + reconstruction_distance_t(xb, recon, lambda_ssim)
    return float(loss.mean().item())


def generator_loss(images: np.ndarray, labels: np.ndarray, enc: Encoder,
                   gen: ConditionalGenerator, dis: ProjectionDiscriminator,
                   seed: int = 0, eps: torch.Tensor | None = None,
                   lambda_ssim: float = 1.0) -> float:
    """Mean of Dist(x, x') - log d(1|x', y), the non-saturating form."""
    enc.eval(); gen.eval(); dis.eval()
    xb = images_to_tensor(images)
    yb = torch.from_numpy(np.asarray(labels))
    with torch.no_grad():
        mean, logvar = enc(xb)
        if eps is None:
            eps = _sample_eps(mean.shape, seed)
        z = mean + (0.5 * logvar).exp() * eps
        recon = gen(z, yb)
        adv = F.softplus(-dis(recon, yb))   # -log sigmoid(score)
        loss = reconstruction_distance_t(xb, recon, lambda_ssim) + adv
    return float(loss.mean().item())


def discriminator_loss(images: np.ndarray, labels: np.ndarray, enc: Encoder,
                       gen: ConditionalGenerator, dis: ProjectionDiscriminator,
                       seed: int = 0, eps: torch.Tensor | None = None) -> float:
    """Mean of -log d(1|x,y) - log d(0|x',y) with x' the reconstruction."""
    enc.eval(); gen.eval(); dis.eval()
    xb = images_to_tensor(images)
    yb = torch.from_numpy(np.asarray(labels))
    with torch.no_grad():
        mean, logvar = enc(xb)
        if eps is None:
            eps = _sample_eps(mean.shape, seed)
        z = mean + (0.5 * logvar).exp() * eps
        recon = gen(z, yb)
        loss = F.softplus(-dis(xb, yb)) + F.softplus(dis(recon, yb))
    return float(loss.mean().item())


# ---------------------------------------------------------------------------
# training


@dataclass
class CganConfig:
    latent_dim: int = 128
    iterations: int = 2500
    batch_size: int = 32
    lr_generator: float = 2e-4
    lr_encoder: float = 2e-4
    lr_discriminator: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    discriminator_steps: int = 2      # D updates per (G, E) update
    lambda_ssim: float = 1.0
    base_channels: int = 64
    snapshot_every: int = 50          # divergence-recovery snapshot cadence
    progress_every: int = 0           # 0 = silent; else log to stderr every N iters


@dataclass
class CganCheckpoint:
    encoder: Encoder
    generator: ConditionalGenerator
    discriminator: ProjectionDiscriminator
    config: CganConfig
    seed: int
    input_shape: tuple[int, int, int]
    class_count: int
    loss_history: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.float32))
    # columns: iteration, encoder loss, generator loss, discriminator loss


def _epoch_batches(ds: LabeledDataset, batch_size: int, seed: int) -> Iterator:
    epoch = 0
    while True:
        for batch in batches(ds, batch_size, seed=seed + epoch, shuffle=True):
            yield batch
        epoch += 1


def train_cgan(train: LabeledDataset, config: CganConfig, seed: int) -> CganCheckpoint:
    """Alternating updates per training iteration: generator, encoder, then
    discriminator (with config.discriminator_steps D batches)."""
    torch.manual_seed(seed)
    h, w, c = train.image_shape
    if h != w:
        raise ValueError("square images expected")
    enc = Encoder(c, h, config.latent_dim)
    gen = ConditionalGenerator(c, h, train.class_count, config.latent_dim,
                               base=config.base_channels)
    dis = ProjectionDiscriminator(c, train.class_count)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_generator, betas=config.adam_betas)
    opt_e = torch.optim.Adam(enc.parameters(), lr=config.lr_encoder, betas=config.adam_betas)
    opt_d = torch.optim.Adam(dis.parameters(), lr=config.lr_discriminator, betas=config.adam_betas)

    stream = _epoch_batches(train, min(config.batch_size, len(train)), seed * 7919)
    noise = torch.Generator()
    noise.manual_seed(seed * 6007 + 1)

    history = []
    snapshot = None

    def take_snapshot():
        return {
            "enc": {k: v.clone() for k, v in enc.state_dict().items()},
            "gen": {k: v.clone() for k, v in gen.state_dict().items()},
            "dis": {k: v.clone() for k, v in dis.state_dict().items()},
        }

    def build_checkpoint():
        return CganCheckpoint(encoder=enc, generator=gen, discriminator=dis,
                              config=config, seed=seed, input_shape=train.image_shape,
                              class_count=train.class_count,
                              loss_history=np.array(history, dtype=np.float32).reshape(-1, 4))

    enc.train(); gen.train(); dis.train()
    for it in range(config.iterations):
        batch = next(stream)
        xb = images_to_tensor(batch.images)
        yb = torch.from_numpy(batch.labels)

        # generator: fool the discriminator while reconstructing the input
        with torch.no_grad():
            mean, logvar = enc(xb)
            z = mean + (0.5 * logvar).exp() * torch.randn(mean.shape, generator=noise)
        recon = gen(z, yb)
        loss_g = (reconstruction_distance_t(xb, recon, config.lambda_ssim)
                  + F.softplus(-dis(recon, yb))).mean()
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        # encoder: reconstruction + KL to the standard-normal prior
        mean, logvar = enc(xb)
        z = mean + (0.5 * logvar).exp() * torch.randn(mean.shape, generator=noise)
        recon = gen(z, yb)
        loss_e = (kl_term_t(mean, logvar)
                  + reconstruction_distance_t(xb, recon, config.lambda_ssim)).mean()
        opt_e.zero_grad()
        opt_g.zero_grad()   # gradient flows through G; discard its side
        loss_e.backward()
        opt_e.step()

        # discriminator: real (x,y) up, reconstruction (x',y) down
        loss_d_val = 0.0
        for _ in range(config.discriminator_steps):
            dbatch = next(stream)
            dxb = images_to_tensor(dbatch.images)
            dyb = torch.from_numpy(dbatch.labels)
            with torch.no_grad():
                dmean, dlogvar = enc(dxb)
                dz = dmean + (0.5 * dlogvar).exp() * torch.randn(dmean.shape, generator=noise)
                drecon = gen(dz, dyb)
            loss_d = (F.softplus(-dis(dxb, dyb)) + F.softplus(dis(drecon, dyb))).mean()
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            loss_d_val = float(loss_d.item())

        values = (float(loss_e.item()), float(loss_g.item()), loss_d_val)
        if not all(np.isfinite(values)):
            if snapshot is not None:
                enc.load_state_dict(snapshot["enc"])
                gen.load_state_dict(snapshot["gen"])
                dis.load_state_dict(snapshot["dis"])
            err = TrainingDivergedError(f"non-finite loss at iteration {it}: "
                                        f"L(E)={values[0]}, L(G)={values[1]}, L(D)={values[2]}")
            err.checkpoint = build_checkpoint()  # last finite snapshot state
            raise err
        history.append((it, *values))
        if it % config.snapshot_every == 0:
            snapshot = take_snapshot()
        if config.progress_every and (it + 1) % config.progress_every == 0:
            import sys
            print(f"cgan iter {it + 1}/{config.iterations} "
                  f"L(E)={values[0]:.3f} L(G)={values[1]:.3f} L(D)={values[2]:.3f}",
                  file=sys.stderr, flush=True)

    enc.eval(); gen.eval(); dis.eval()
    return build_checkpoint()


def reconstruct_batch(cgan: CganCheckpoint, images: np.ndarray,
                      labels: np.ndarray) -> np.ndarray:
    """Mean-mode encode + conditional decode for a batch of images."""
    cgan.encoder.eval(); cgan.generator.eval()
    with torch.no_grad():
        xb = images_to_tensor(images)
        mean, _ = cgan.encoder(xb)
        out = cgan.generator(mean, torch.from_numpy(np.asarray(labels, dtype=np.int64)))
    return tensor_to_images(out)


def reconstruct_for_label(cgan: CganCheckpoint, x: np.ndarray, y: int) -> np.ndarray:
    """Single-image deterministic reconstruction under class y."""
    return reconstruct(cgan.generator, encode(cgan.encoder, x, mode="mean"), y)


def write_loss_history_csv(ckpt: CganCheckpoint, path) -> None:
    with open(path, "w") as f:
        f.write("# schema=mixdefense-cgan-loss-v1\n")
        f.write("iteration,encoder_loss,generator_loss,discriminator_loss\n")
        for row in ckpt.loss_history:
            f.write(f"{int(row[0])},{row[1]:.6f},{row[2]:.6f},{row[3]:.6f}\n")


def save_cgan(ckpt: CganCheckpoint, path) -> None:
    arrays = {}
    arrays.update(state_dict_arrays(ckpt.encoder, "encoder."))
    arrays.update(state_dict_arrays(ckpt.generator, "generator."))
    arrays.update(state_dict_arrays(ckpt.discriminator, "discriminator."))
    arrays["loss_history"] = ckpt.loss_history.astype(np.float32)
    cfg = asdict(ckpt.config)
    cfg["adam_betas"] = list(cfg["adam_betas"])
    save_checkpoint(path, kind="cgan",
                    architecture={"input_shape": list(ckpt.input_shape),
                                  "class_count": ckpt.class_count,
                                  "latent_dim": ckpt.config.latent_dim,
                                  "base_channels": ckpt.config.base_channels},
                    seed=ckpt.seed, arrays=arrays, meta={"config": cfg})


def load_cgan(path) -> CganCheckpoint:
    raw = load_checkpoint(path)
    if raw.kind != "cgan":
        raise ValueError(f"{path} holds a {raw.kind!r} checkpoint, not a cgan")
    h, w, c = raw.architecture["input_shape"]
    class_count = raw.architecture["class_count"]
    cfg_dict = dict(raw.meta["config"])
    cfg_dict["adam_betas"] = tuple(cfg_dict["adam_betas"])
    config = CganConfig(**cfg_dict)
    enc = Encoder(c, h, config.latent_dim)
    gen = ConditionalGenerator(c, h, class_count, config.latent_dim, base=config.base_channels)
    dis = ProjectionDiscriminator(c, class_count)
    loss_history = raw.arrays.pop("loss_history")
    load_state_arrays(enc, raw.arrays, "encoder.")
    load_state_arrays(gen, raw.arrays, "generator.")
    load_state_arrays(dis, raw.arrays, "discriminator.")
    enc.eval(); gen.eval(); dis.eval()
    return CganCheckpoint(encoder=enc, generator=gen, discriminator=dis, config=config,
                          seed=raw.seed, input_shape=(h, w, c), class_count=class_count,
                          loss_history=loss_history.reshape(-1, 4))
