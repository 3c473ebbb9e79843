"""Training-slice preprocessor.

Phase I drops slices whose cleaned tumor mask is empty or too small, phase II
finds the smallest surviving slice count over all samples and phase III
truncates every sample to it. Also: per-slice [0, 1] normalization and the
three-channel label encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

BRATS_LABELS = {1: "NTC", 2: "ED", 4: "ET"}


class PreprocessError(ValueError):
    pass


@dataclass
class Volume:
    sample_id: str
    images: np.ndarray  # [S, H, W] float32
    masks: np.ndarray  # [S, H, W] uint8 label codes
    label_map: dict[int, str] = field(default_factory=lambda: dict(BRATS_LABELS))
    slice_ids: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.images.ndim != 3 or self.images.shape != self.masks.shape:
            raise PreprocessError(
                f"{self.sample_id}: image stack {self.images.shape} and mask stack "
                f"{self.masks.shape} must be equal-shaped [S, H, W]"
            )
        if self.slice_ids is None:
            self.slice_ids = np.arange(len(self.images))
        self.slice_ids = np.asarray(self.slice_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    def select(self, indices) -> "Volume":
        idx = np.asarray(indices, dtype=np.int64)
        return Volume(self.sample_id, self.images[idx], self.masks[idx],
                      dict(self.label_map), self.slice_ids[idx])


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 128
    open_kernel: int = 3
    close_kernel: int = 3
    close_repeats: int = 2
    area_threshold: int = 64
    apply_phase2_3: bool = True
    truncate_mode: str = "first"

    def __post_init__(self):
        if self.target_size <= 0:
            raise PreprocessError("target_size must be positive")
        if self.area_threshold < 0:
            raise PreprocessError("area_threshold must be >= 0")
        for k in (self.open_kernel, self.close_kernel):
            if k < 1 or k % 2 == 0:
                raise PreprocessError(f"structuring elements must be odd-sized, got {k}")
        if self.truncate_mode not in ("first", "center"):
            raise PreprocessError(f"truncate_mode must be 'first' or 'center', got {self.truncate_mode!r}")


def _square(k: int) -> np.ndarray:
    return np.ones((k, k), dtype=bool)


def morph_open(mask, kernel: int = 3) -> np.ndarray:
    se = _square(kernel)
    m = ndimage.binary_erosion(np.asarray(mask, dtype=bool), se, border_value=0)
    return ndimage.binary_dilation(m, se, border_value=0)


def morph_close(mask, kernel: int = 3, repeats: int = 1) -> np.ndarray:
    se = _square(kernel)
    m = np.asarray(mask, dtype=bool)
    for _ in range(repeats):
        m = ndimage.binary_dilation(m, se, border_value=0)
        m = ndimage.binary_erosion(m, se, border_value=0)
    return m


def resize_nearest(arr: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes to ``size x size``."""
    h, w = arr.shape[-2:]
    if (h, w) == (size, size):
        return arr.copy()
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return arr[..., rows[:, None], cols[None, :]]


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize (half-pixel centres, edge clamped) of a 2-D or [S, H, W] array."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[-2:]
    if (h, w) == (size, size):
        return img.copy()
    r = (np.arange(size) + 0.5) * h / size - 0.5
    c = (np.arange(size) + 0.5) * w / size - 0.5
    rr, cc = np.meshgrid(r, c, indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest").astype(np.float32)
    return np.stack([resize_bilinear(s, size) for s in img])


def clean_mask(mask_slice: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    m = resize_nearest(np.asarray(mask_slice), cfg.target_size) > 0
    m = morph_open(m, cfg.open_kernel)
    return morph_close(m, cfg.close_kernel, cfg.close_repeats)


@dataclass
class Phase1Result:
    kept: list[int]
    areas: list[int]
    components: list[int]

    @property
    def all_dropped(self) -> bool:
        return not self.kept


def phase1_filter(volume: Volume, cfg: PreprocessConfig | None = None) -> Phase1Result:
    """Indices of slices whose cleaned tumor area exceeds the threshold."""
    cfg = cfg or PreprocessConfig()
    if len(volume) == 0:
        raise PreprocessError(f"{volume.sample_id}: volume has no slices")
    kept, areas, comps = [], [], []
    for i, mask_slice in enumerate(volume.masks):
        m = clean_mask(mask_slice, cfg)
        if not m.any():
            areas.append(0)
            comps.append(0)
            continue
        labels, n = ndimage.label(m)
        sizes = np.bincount(labels.ravel())[1:]
        area = int(sizes.sum())
        areas.append(area)
        comps.append(int(n))
        if area > cfg.area_threshold:
            kept.append(i)
    return Phase1Result(kept, areas, comps)


def phase2_min_count(volumes) -> int:
    counts = {}
    for v in volumes:
        if len(v) == 0:
            raise PreprocessError(f"sample {v.sample_id} has no slices left after phase I")
        counts[v.sample_id] = len(v)
    if not counts:
        raise PreprocessError("phase II needs at least one volume")
    return min(counts.values())


def phase3_truncate(volume: Volume, least_num: int, mode: str = "first") -> Volume:
    n = len(volume)
    if least_num > n:
        raise PreprocessError(f"{volume.sample_id}: cannot keep {least_num} of {n} slices")
    if least_num < 0:
        raise PreprocessError("least_num must be >= 0")
    start = 0 if mode == "first" else (n - least_num) // 2
    return volume.select(range(start, start + least_num))


def normalize01(img) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant slice maps to zeros."""
    x = np.asarray(img, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x, dtype=np.float32)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def encode_labels(mask, label_map: dict[int, str] | None = None) -> np.ndarray:
    """One indicator channel per tumor code, in ``label_map`` order."""
    label_map = label_map or BRATS_LABELS
    m = np.asarray(mask)
    known = set(label_map) | {0}
    unknown = sorted(set(np.unique(m).tolist()) - known)
    if unknown:
        raise PreprocessError(f"unknown label code(s) {unknown}; known: {sorted(known)}")
    codes = list(label_map)
    return np.stack([m == c for c in codes], axis=-1).astype(np.uint8)


def to_arrays(volume: Volume, size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Network-ready ``([S, H, W, 1] float32 in [0, 1], [S, H, W, C] uint8)`` arrays."""
    images, masks = volume.images, volume.masks
    if size is not None:
        images = resize_bilinear(images, size)
        masks = resize_nearest(masks, size)
    x = np.stack([normalize01(s) for s in images])[..., None] if len(images) else \
        np.zeros((0, *images.shape[1:], 1), np.float32)
    y = encode_labels(masks, volume.label_map)
    return x, y


@dataclass
class PipelineResult:
    volumes: list[Volume]
    manifest: dict


def run_pipeline(volumes, cfg: PreprocessConfig | None = None) -> PipelineResult:
    """Phases I-III over a list of volumes; output slices are resized to ``target_size``."""
    cfg = cfg or PreprocessConfig()
    volumes = list(volumes)
    if not volumes:
        raise PreprocessError("no volumes to preprocess")
    filtered, samples = [], {}
    for v in volumes:
        res = phase1_filter(v, cfg)
        kept = v.select(res.kept)
        filtered.append(Volume(
            v.sample_id,
            resize_bilinear(kept.images, cfg.target_size) if len(kept) else
            np.zeros((0, cfg.target_size, cfg.target_size), np.float32),
            resize_nearest(kept.masks, cfg.target_size) if len(kept) else
            np.zeros((0, cfg.target_size, cfg.target_size), np.uint8),
            dict(v.label_map), kept.slice_ids))
        samples[v.sample_id] = {"n_input": len(v), "kept": [int(i) for i in v.slice_ids[res.kept]],
                                "areas": res.areas, "components": res.components}
    least = None
    if cfg.apply_phase2_3:
        least = phase2_min_count(filtered)
        filtered = [phase3_truncate(v, least, cfg.truncate_mode) for v in filtered]
    for v in filtered:
        samples[v.sample_id]["final"] = [int(i) for i in v.slice_ids]
    manifest = {
        "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "least_num": least,
        "samples": samples,
    }
    return PipelineResult(filtered, manifest)
