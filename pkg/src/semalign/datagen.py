"""Procedural toy dataset: textured polygon shapes with known landmarks.

Each sample pair is a textured polygon on a cluttered background plus a
geometrically warped (and photometrically jittered) rendering of the same
geometry. The warp is known analytically, so every pair carries exact dense
ground truth and exact landmark correspondences. Pairs meant to imitate
*semantically similar* images re-render the target from the same geometry
with a different texture seed before warping.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path as FsPath
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from matplotlib.path import Path as MplPath
from PIL import Image

from .exceptions import DataError, DegenerateWarpError
from .geometry import (
    DenseGT,
    backward_warp,
    eval_warp,
    invert_warp,
    make_grid,
    random_affine,
    random_tps,
    warp_to_flow,
)

FLOW_MAGIC = b"SAFL"
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class ShapeSpec:
    """Recipe for one procedural shape instance."""

    category_id: int = 0
    vertex_count: int = 6
    texture_seed: int = 0
    k_landmarks: int = 6
    image_size: int = 64
    center_jitter: float = 0.12

    def __post_init__(self):
        if self.k_landmarks < 5:
            raise ValueError(f"need at least 5 landmarks, got {self.k_landmarks}")
        if self.k_landmarks > self.vertex_count:
            raise ValueError("k_landmarks cannot exceed vertex_count")


@dataclass(frozen=True)
class WarpParams:
    """Ranges for the random geometric perturbation of a pair."""

    kinds: Sequence[str] = ("affine", "tps")
    max_rotation_deg: float = 25.0
    scale_range: Sequence[float] = (0.8, 1.25)
    max_translation: float = 0.2
    tps_control_grid: int = 3
    tps_displacement_std: float = 0.08
    validity_floor: float = 0.6


@dataclass(frozen=True)
class PhotometricParams:
    """Ranges for brightness/contrast jitter, noise and occlusion."""

    brightness: float = 0.15
    contrast: float = 0.15
    noise_std: float = 0.02
    occlusion_prob: float = 0.0
    occlusion_area: Sequence[float] = (0.05, 0.15)


@dataclass
class SamplePair:
    """A source/target image pair with exact dense and landmark ground truth.

    ``occlusion`` marks *source* pixels whose ground-truth target position
    falls inside the occluded target region.
    """

    image_s: np.ndarray  # (S, S, 3) uint8
    image_t: np.ndarray
    gt: DenseGT
    landmarks_s: torch.Tensor  # (K, 2) normalized
    landmarks_t: torch.Tensor
    occlusion: np.ndarray  # (S, S) bool
    split: str = "train"
    pair_id: str = ""


def _polygon_vertices(rng: np.random.Generator, count: int, center_jitter: float) -> np.ndarray:
    # Evenly spread angles with jitter keep the polygon simple (non-crossing).
    angles = 2 * np.pi * np.arange(count) / count + rng.uniform(-0.25, 0.25, size=count)
    # Shrink the radii as the center wanders so landmarks stay inside [-1, 1].
    rmax = min(0.7, 0.95 - center_jitter)
    radii = rng.uniform(0.5 * rmax, rmax, size=count)
    center = rng.uniform(-center_jitter, center_jitter, size=2)
    return center + np.stack((radii * np.cos(angles), radii * np.sin(angles)), axis=1)


def generate_shape(spec: ShapeSpec, seed: int):
    """Render one textured shape; returns (uint8 image, landmarks (K, 2)).

    Geometry depends on (category_id, seed), texture on (texture_seed, seed),
    so two calls differing only in texture_seed share landmarks exactly.
    """
    geom_rng = np.random.default_rng([spec.category_id, int(seed)])
    tex_rng = np.random.default_rng([spec.texture_seed, int(seed), 7919])
    size = spec.image_size

    verts = _polygon_vertices(geom_rng, spec.vertex_count, spec.center_jitter)
    grid = make_grid(size, size).numpy().reshape(-1, 2)
    mask = MplPath(verts).contains_points(grid).reshape(size, size)

    # Cluttered background: smooth low-frequency noise plus a few blobs.
    low = tex_rng.uniform(0.1, 0.9, size=(6, 6, 3))
    bg = np.array(
        Image.fromarray((low * 255).astype(np.uint8)).resize((size, size), Image.BILINEAR),
        dtype=np.float64,
    ) / 255.0
    for _ in range(4):
        cy, cx = tex_rng.integers(0, size, size=2)
        h, w = tex_rng.integers(3, size // 4, size=2)
        bg[cy : cy + h, cx : cx + w] = tex_rng.uniform(0, 1, size=3)

    # Foreground: two-tone stripes plus fine noise.
    xs = grid[:, 0].reshape(size, size)
    ys = grid[:, 1].reshape(size, size)
    theta = tex_rng.uniform(0, np.pi)
    freq = tex_rng.uniform(4.0, 12.0)
    phase = tex_rng.uniform(0, 2 * np.pi)
    stripes = 0.5 * (1 + np.sin(freq * (xs * np.cos(theta) + ys * np.sin(theta)) + phase))
    c1 = tex_rng.uniform(0.2, 1.0, size=3)
    c2 = tex_rng.uniform(0.0, 0.8, size=3)
    fg = stripes[..., None] * c1 + (1 - stripes[..., None]) * c2
    fg += tex_rng.normal(0, 0.03, size=fg.shape)

    img = np.where(mask[..., None], fg, bg).clip(0, 1)
    centroid = verts.mean(axis=0)
    landmarks = centroid + 0.9 * (verts[: spec.k_landmarks] - centroid)
    return (img * 255).astype(np.uint8), torch.as_tensor(landmarks, dtype=torch.float64)


def _to_float_chw(image: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(image, dtype=torch.float64).permute(2, 0, 1) / 255.0


def _render_target(image: np.ndarray, warp) -> np.ndarray:
    """Render the target view so that the forward warp maps source -> target."""
    size = image.shape[0]
    inv_flow = warp_to_flow(invert_warp(warp), size, size).flow
    warped = backward_warp(_to_float_chw(image), inv_flow)
    return warped.permute(1, 2, 0).numpy()


def _sample_warp(rng: np.random.Generator, params: WarpParams):
    kind = params.kinds[int(rng.integers(len(params.kinds)))]
    if kind == "affine":
        return random_affine(
            rng,
            max_rotation_deg=params.max_rotation_deg,
            scale_range=params.scale_range,
            max_translation=params.max_translation,
        )
    return random_tps(
        rng,
        control_grid=params.tps_control_grid,
        displacement_std=params.tps_displacement_std,
    )


def make_pair(
    image: np.ndarray,
    landmarks: torch.Tensor,
    warp_params: WarpParams,
    photometric_params: PhotometricParams,
    seed: int,
    *,
    target_image: Optional[np.ndarray] = None,
    max_retries: int = 5,
) -> SamplePair:
    """Build a SamplePair from a source image by random warp plus jitter.

    ``target_image`` (same geometry, possibly different texture) is warped
    to produce the target view; it defaults to the source image itself.
    Warps failing the validity floor are resampled up to ``max_retries``.
    """
    base_target = image if target_image is None else target_image
    size = image.shape[0]
    for attempt in range(max_retries):
        rng = np.random.default_rng([int(seed), attempt, 104729])
        try:
            warp = _sample_warp(rng, warp_params)
            gt = warp_to_flow(warp, size, size)
        except DegenerateWarpError:
            continue
        if gt.validity.double().mean().item() < warp_params.validity_floor:
            continue
        target = _render_target(base_target, warp)

        p = photometric_params
        mean = target.mean()
        target = mean + (target - mean) * rng.uniform(1 - p.contrast, 1 + p.contrast)
        target = target + rng.uniform(-p.brightness, p.brightness)
        target = target + rng.normal(0, p.noise_std, size=target.shape)

        occ = np.zeros((size, size), dtype=bool)
        if rng.uniform() < p.occlusion_prob:
            area = rng.uniform(*p.occlusion_area) * size * size
            w = int(np.sqrt(area) * rng.uniform(0.7, 1.4))
            h = max(2, int(area / max(w, 2)))
            w = max(2, min(w, size - 1))
            h = max(2, min(h, size - 1))
            y0 = int(rng.integers(0, size - h))
            x0 = int(rng.integers(0, size - w))
            target[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0, 1, size=(h, w, 3))
            # Normalized bounds of the occluded target rectangle.
            lo_x = -1 + 2 * x0 / (size - 1)
            hi_x = -1 + 2 * (x0 + w - 1) / (size - 1)
            lo_y = -1 + 2 * y0 / (size - 1)
            hi_y = -1 + 2 * (y0 + h - 1) / (size - 1)
            fx, fy = gt.flow[..., 0].numpy(), gt.flow[..., 1].numpy()
            occ = (
                (fx >= lo_x) & (fx <= hi_x) & (fy >= lo_y) & (fy <= hi_y)
                & gt.validity.numpy()
            )

        landmarks_t = eval_warp(warp, landmarks)
        return SamplePair(
            image_s=image,
            image_t=(target.clip(0, 1) * 255).astype(np.uint8),
            gt=gt,
            landmarks_s=landmarks,
            landmarks_t=landmarks_t,
            occlusion=occ,
        )
    raise DataError(f"no acceptable warp after {max_retries} retries (seed {seed})")


@dataclass(frozen=True)
class StreamConfig:
    """Recipe for a deterministic, index-addressable stream of pairs."""

    categories: int = 4
    image_size: int = 64
    vertex_count: int = 6
    k_landmarks: int = 6
    center_jitter: float = 0.12  # how far shape centers wander from the image center
    warp: WarpParams = WarpParams()
    photometric: PhotometricParams = PhotometricParams()
    appearance_change: bool = False  # different target texture (cross-instance look)


def pair_at_index(cfg: StreamConfig, global_seed: int, index: int) -> SamplePair:
    """Pair #index of the stream; depends only on (global_seed, index)."""
    ss = np.random.SeedSequence([int(global_seed), int(index)])
    rng = np.random.default_rng(ss)
    category = int(rng.integers(cfg.categories))
    shape_seed = int(rng.integers(2**31))
    tex_s = int(rng.integers(2**31))
    tex_t = int(rng.integers(2**31))
    pair_seed = int(rng.integers(2**31))
    spec = ShapeSpec(
        category_id=category,
        vertex_count=cfg.vertex_count,
        texture_seed=tex_s,
        k_landmarks=cfg.k_landmarks,
        image_size=cfg.image_size,
        center_jitter=cfg.center_jitter,
    )
    image, landmarks = generate_shape(spec, shape_seed)
    target_image = None
    if cfg.appearance_change:
        target_image, _ = generate_shape(replace(spec, texture_seed=tex_t), shape_seed)
    pair = make_pair(
        image,
        landmarks,
        cfg.warp,
        cfg.photometric,
        pair_seed,
        target_image=target_image,
    )
    pair.pair_id = f"{category:02d}_{index:06d}"
    return pair


def pair_stream(cfg: StreamConfig, global_seed: int, count: int, start: int = 0) -> Iterator[SamplePair]:
    for i in range(start, start + count):
        yield pair_at_index(cfg, global_seed, i)


def split_dataset(pair_ids: Sequence[str], ratios: Sequence[float], seed: int) -> dict:
    """Deterministic split into train/val/test by seeded shuffle.

    Returns {pair_id: split_name}. Ratios must sum to 1.
    """
    if not pair_ids:
        raise DataError("cannot split an empty dataset")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    ids = list(pair_ids)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n = len(ids)
    n_train = int(round(ratios[0] * n))
    n_val = int(round((ratios[0] + ratios[1]) * n)) - n_train
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            split = "train"
        elif rank < n_train + n_val:
            split = "val"
        else:
            split = "test"
        assignment[ids[idx]] = split
    return assignment


# ---------------------------------------------------------------------------
# On-disk dataset format
# ---------------------------------------------------------------------------

def write_flow(path, flow: torch.Tensor, validity: torch.Tensor) -> None:
    """Raw flow file: 16-byte header (magic 'SAFL', uint32 H, W, C little-
    endian) followed by float32 little-endian data in C order.

    Channels are (target_x, target_y, validity) on the source grid.
    """
    H, W = flow.shape[:2]
    data = np.concatenate(
        (flow.numpy().astype("<f4"), validity.numpy().astype("<f4")[..., None]), axis=-1
    )
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<III", H, W, data.shape[-1]))
        f.write(data.tobytes())


def read_flow(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FLOW_MAGIC:
            raise DataError(f"bad flow magic in {path}: {magic!r}")
        H, W, C = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(), dtype="<f4").reshape(H, W, C)
    flow = torch.as_tensor(data[..., :2].copy(), dtype=torch.float64)
    validity = torch.as_tensor(data[..., 2] > 0.5)
    return flow, validity


def write_dataset(pairs: Sequence[SamplePair], out_dir, ratios=(0.7, 0.2, 0.1), seed: int = 0):
    """Write images/, flows/ and manifest.jsonl; returns the manifest records."""
    out = FsPath(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "flows").mkdir(parents=True, exist_ok=True)
    splits = split_dataset([p.pair_id for p in pairs], ratios, seed)
    records = []
    with open(out / MANIFEST_NAME, "w") as mf:
        for p in pairs:
            img_s = f"images/{p.pair_id}_src.png"
            img_t = f"images/{p.pair_id}_tgt.png"
            occ = f"images/{p.pair_id}_occ.png"
            flow = f"flows/{p.pair_id}.flow"
            Image.fromarray(p.image_s).save(out / img_s)
            Image.fromarray(p.image_t).save(out / img_t)
            Image.fromarray((p.occlusion * 255).astype(np.uint8)).save(out / occ)
            write_flow(out / flow, p.gt.flow, p.gt.validity)
            rec = {
                "id": p.pair_id,
                "category": p.pair_id.split("_")[0],
                "split": splits[p.pair_id],
                "image_s": img_s,
                "image_t": img_t,
                "occlusion": occ,
                "flow": flow,
                "landmarks_s": p.landmarks_s.tolist(),
                "landmarks_t": p.landmarks_t.tolist(),
            }
            records.append(rec)
            mf.write(json.dumps(rec) + "\n")
    return records


def read_manifest(data_dir):
    path = FsPath(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def load_pair(data_dir, record: dict) -> SamplePair:
    root = FsPath(data_dir)
    image_s = np.array(Image.open(root / record["image_s"]))
    image_t = np.array(Image.open(root / record["image_t"]))
    occ = np.array(Image.open(root / record["occlusion"])) > 127
    flow, validity = read_flow(root / record["flow"])
    gt = DenseGT(warp=None, flow=flow, validity=validity)
    return SamplePair(
        image_s=image_s,
        image_t=image_t,
        gt=gt,
        landmarks_s=torch.tensor(record["landmarks_s"], dtype=torch.float64),
        landmarks_t=torch.tensor(record["landmarks_t"], dtype=torch.float64),
        occlusion=occ,
        split=record["split"],
        pair_id=record["id"],
    )
