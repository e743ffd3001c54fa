"""PNG sample grids: input x, every level image upsampled, target y."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import to_uint8
from .generator import generate
from .tensor import Tensor


def upsample_nearest(img: np.ndarray, size: int) -> np.ndarray:
    factor = size // img.shape[-1]
    return img.repeat(factor, axis=-2).repeat(factor, axis=-1)


def grid_rows(x: np.ndarray, levels: list[np.ndarray], y: np.ndarray) -> np.ndarray:
    """Stack (B, 3, H, W) arrays into an (B*H, (L+2)*W, 3) uint8 mosaic."""
    size = x.shape[-1]
    cols = [x] + [upsample_nearest(l, size) for l in levels] + [y]
    rows = [np.concatenate([to_uint8(c[i]) for c in cols], axis=1) for i in range(x.shape[0])]
    return np.concatenate(rows, axis=0)


def sample_grid(G, batch, dtype=np.float32) -> np.ndarray:
    trace = generate(G, Tensor(batch.x, dtype=dtype), Tensor(batch.label_map, dtype=dtype))
    levels = [trace.images[n].data for n in sorted(trace.images)]
    return grid_rows(batch.x, levels, batch.y)


def save_grid(mosaic: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mosaic).save(path)
    return path


def sample_writer(batch):
    """Callback for the training loop that writes ``samples/step_XXXXXX.png``."""

    def write(state, out_dir: Path):
        mosaic = sample_grid(state.G, batch, state.config.dtype)
        save_grid(mosaic, Path(out_dir) / "samples" / f"step_{state.step:06d}.png")

    return write
