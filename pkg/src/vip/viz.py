"""Per-part spatial attention maps: average the encoder affinity over heads,
normalize each selected part's map to [0, 255], and write grayscale PGM files
plus a red-channel overlay composite."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from .network import Model, forward


class VizError(ValueError):
    """Bad block/part selection or malformed image file."""


@dataclass
class AttentionMap:
    """Quantized affinity of one part at one block."""

    block: int
    part: int
    grid: np.ndarray  # uint8 [H_s, W_s]
    source: str = ""


def quantize_map(row: np.ndarray, height: int, width: int) -> np.ndarray:
    """Min-max scale a length-L affinity row to uint8 [H, W].

    Constant rows map to all zeros. Quantization rounds half away from zero,
    so the result is invariant to positive affine rescaling of the row.
    """
    grid = np.asarray(row, dtype=np.float64).reshape(height, width)
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.zeros((height, width), dtype=np.uint8)
    scaled = (grid - lo) * (255.0 / (hi - lo))
    return np.floor(scaled + 0.5).astype(np.uint8)


def write_pgm(path, grid: np.ndarray):
    grid = np.asarray(grid, dtype=np.uint8)
    if grid.ndim != 2:
        raise VizError(f"PGM needs a 2-D grid, got shape {grid.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii"))
        fh.write(grid.tobytes())


def write_ppm(path, rgb: np.ndarray):
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise VizError(f"PPM needs an HxWx3 array, got shape {rgb.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


_PNM_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def read_pnm(path):
    """Parse a binary PGM (P5) or PPM (P6); returns a uint8 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    match = _PNM_HEADER.match(blob)
    if not match:
        raise VizError(f"{path}: not a binary PGM/PPM file")
    kind, width, height, maxval = (match.group(1), int(match.group(2)),
                                   int(match.group(3)), int(match.group(4)))
    if maxval != 255:
        raise VizError(f"{path}: only maxval 255 is supported, got {maxval}")
    depth = 1 if kind == b"P5" else 3
    pixels = np.frombuffer(blob, dtype=np.uint8, count=height * width * depth,
                           offset=match.end())
    if pixels.size != height * width * depth:
        raise VizError(f"{path}: truncated pixel data")
    if depth == 1:
        return pixels.reshape(height, width).copy()
    return pixels.reshape(height, width, 3).copy()


def _upsample_nearest(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    ys = (np.arange(height) * grid.shape[0]) // height
    xs = (np.arange(width) * grid.shape[1]) // width
    return grid[np.ix_(ys, xs)]


def export_affinity(model: Model, image: np.ndarray, block: int,
                    part_indices, out_dir: str) -> list[AttentionMap]:
    """Run one eval forward on ``image`` [3, H, W] and export the selected
    parts of the chosen block's affinity as PGM files, plus one PPM overlay
    blending the combined map into the red channel at 50%."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise VizError(f"expected an image [3, H, W], got shape {image.shape}")
    _, affinities = forward(model, image[None].astype(model.dtype))
    if not 0 <= block < len(affinities):
        raise VizError(f"block index {block} out of range [0, {len(affinities)})")
    aff = affinities[block]
    per_head = aff.values.data[0]           # [G, N, L]
    mean_map = per_head.mean(axis=0)        # [N, L]
    n_parts = mean_map.shape[0]
    os.makedirs(out_dir, exist_ok=True)
    maps = []
    for part in part_indices:
        if not 0 <= part < n_parts:
            raise VizError(f"part index {part} out of range [0, {n_parts})")
        grid = quantize_map(mean_map[part], aff.height, aff.width)
        write_pgm(os.path.join(out_dir, f"block{block}_part{part}.pgm"), grid)
        maps.append(AttentionMap(block, part, grid))

    combined = np.zeros((aff.height, aff.width), dtype=np.uint8)
    for m in maps:
        combined = np.maximum(combined, m.grid)
    h, w = image.shape[1], image.shape[2]
    up = _upsample_nearest(combined, h, w)
    base = np.clip(image * 255.0, 0.0, 255.0)
    overlay = np.empty((h, w, 3), dtype=np.uint8)
    overlay[..., 0] = np.floor(0.5 * base[0] + 0.5 * up + 0.5).astype(np.uint8)
    overlay[..., 1] = np.floor(0.5 * base[1] + 0.5).astype(np.uint8)
    overlay[..., 2] = np.floor(0.5 * base[2] + 0.5).astype(np.uint8)
    write_ppm(os.path.join(out_dir, f"block{block}_overlay.ppm"), overlay)
    return maps
