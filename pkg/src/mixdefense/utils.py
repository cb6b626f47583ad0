"""Shared numpy/torch conversion and seeding helpers."""

from __future__ import annotations

import numpy as np
import torch


def _writable_f32(x: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if not arr.flags.writeable:   # datasets freeze their arrays
        arr = arr.copy()
    return arr


def image_to_tensor(x: np.ndarray) -> torch.Tensor:
    """(H,W,C) float array in [0,1] -> (1,C,H,W) float32 tensor."""
    if x.ndim != 3:
        raise ValueError(f"expected (H,W,C) image, got shape {x.shape}")
    return torch.from_numpy(_writable_f32(x)).permute(2, 0, 1).unsqueeze(0)


def images_to_tensor(xs: np.ndarray) -> torch.Tensor:
    """(N,H,W,C) -> (N,C,H,W) float32 tensor."""
    if xs.ndim != 4:
        raise ValueError(f"expected (N,H,W,C) images, got shape {xs.shape}")
    return torch.from_numpy(_writable_f32(xs)).permute(0, 3, 1, 2)


def tensor_to_images(t: torch.Tensor) -> np.ndarray:
    """(N,C,H,W) tensor -> (N,H,W,C) float32 array."""
    return t.detach().permute(0, 2, 3, 1).contiguous().cpu().numpy().astype(np.float32, copy=False)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1,C,H,W) or (C,H,W) tensor -> (H,W,C) float32 array."""
    if t.ndim == 4:
        t = t.squeeze(0)
    return t.detach().permute(1, 2, 0).contiguous().cpu().numpy().astype(np.float32, copy=False)


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def count_parameters(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def state_dict_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a state dict to float32 numpy arrays for checkpointing."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[prefix + name] = tensor.detach().cpu().numpy().astype(np.float32)
    return out


def load_state_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray],
                      prefix: str = "") -> None:
    """Inverse of state_dict_arrays; casts back to each parameter's dtype."""
    state = module.state_dict()
    new_state = {}
    for name, tensor in state.items():
        arr = arrays[prefix + name]
        new_state[name] = torch.from_numpy(np.array(arr)).to(tensor.dtype).reshape(tensor.shape)
    module.load_state_dict(new_state)
