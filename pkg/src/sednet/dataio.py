"""On-disk formats and synthetic data.

``.sedvol`` (one sample)::

    b"SEDVOL" | version u8 | header length u32 LE | JSON header | payload

    payload = image plane (float32 LE, slice-major) + mask plane (uint8)

``.sedw`` (model weights)::

    b"SEDW" | version u8 | header length u32 LE | JSON manifest | float32 LE arrays
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, build
from .preprocess import BRATS_LABELS, Volume

VOL_MAGIC = b"SEDVOL"
W_MAGIC = b"SEDW"
VERSION = 1
VOL_SUFFIX = ".sedvol"
W_SUFFIX = ".sedw"


class FormatError(ValueError):
    """A file could not be parsed. Messages carry byte offsets where relevant."""


class VersionError(FormatError):
    pass


class FingerprintError(ValueError):
    pass


def _atomic_write(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<BI", VERSION, len(hb)) + hb + payload


def _unpack(blob: bytes, magic: bytes, what: str) -> tuple[dict, memoryview, int]:
    pre = len(magic) + 5
    if len(blob) < pre:
        raise FormatError(f"{what}: file is {len(blob)} bytes, shorter than the {pre}-byte preamble")
    if blob[:len(magic)] != magic:
        raise FormatError(f"{what}: bad magic at offset 0: {bytes(blob[:len(magic)])!r}")
    version, hlen = struct.unpack_from("<BI", blob, len(magic))
    if version != VERSION:
        raise VersionError(f"{what}: unsupported format version {version} at offset {len(magic)} "
                           f"(expected {VERSION})")
    end = pre + hlen
    if end > len(blob):
        raise FormatError(f"{what}: header of {hlen} bytes at offset {pre} runs past end of file "
                          f"({len(blob)} bytes)")
    try:
        header = json.loads(bytes(blob[pre:end]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what}: header at offset {pre} is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError(f"{what}: header at offset {pre} must be a JSON object")
    return header, memoryview(blob)[end:], end


def _posint(header: dict, key: str, what: str) -> int:
    v = header.get(key)
    if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
        raise FormatError(f"{what}: header field {key!r} must be a positive integer, got {v!r}")
    return v


# -- volumes ---------------------------------------------------------------

def encode_volume(vol: Volume) -> bytes:
    s, h, w = vol.images.shape
    header = {
        "sample_id": vol.sample_id,
        "slices": s, "height": h, "width": w,
        "image_dtype": "float32-le", "mask_dtype": "uint8",
        "label_map": {str(k): v for k, v in vol.label_map.items()},
        "slice_ids": [int(i) for i in vol.slice_ids],
    }
    payload = vol.images.astype("<f4").tobytes() + vol.masks.astype(np.uint8).tobytes()
    return _pack(VOL_MAGIC, header, payload)


def decode_volume(blob: bytes, what: str = "volume") -> Volume:
    header, payload, offset = _unpack(blob, VOL_MAGIC, what)
    if header.get("image_dtype") != "float32-le" or header.get("mask_dtype") != "uint8":
        raise FormatError(f"{what}: unknown dtype tags image={header.get('image_dtype')!r} "
                          f"mask={header.get('mask_dtype')!r}")
    # zero slices is legal: a sample can be emptied by filtering
    s = header.get("slices")
    if not isinstance(s, int) or isinstance(s, bool) or s < 0:
        raise FormatError(f"{what}: header field 'slices' must be a nonnegative integer, got {s!r}")
    h, w = _posint(header, "height", what), _posint(header, "width", what)
    sid = header.get("sample_id")
    if not isinstance(sid, str):
        raise FormatError(f"{what}: header field 'sample_id' must be a string")
    lm = header.get("label_map", {str(k): v for k, v in BRATS_LABELS.items()})
    try:
        label_map = {int(k): str(v) for k, v in lm.items()}
    except (AttributeError, ValueError, TypeError):
        raise FormatError(f"{what}: malformed label_map {lm!r}") from None
    n = s * h * w
    expected = n * 5
    if len(payload) != expected:
        raise FormatError(
            f"{what}: payload at offset {offset} is {len(payload)} bytes, expected {expected} "
            f"({s} slices x {h} x {w} x (4+1)); file truncated or header inconsistent"
        )
    ids = header.get("slice_ids", list(range(s)))
    if not isinstance(ids, list) or len(ids) != s or not all(isinstance(i, int) for i in ids):
        raise FormatError(f"{what}: slice_ids must list {s} integers")
    images = np.frombuffer(payload[:4 * n], dtype="<f4").reshape(s, h, w).astype(np.float32)
    masks = np.frombuffer(payload[4 * n:], dtype=np.uint8).reshape(s, h, w).copy()
    return Volume(sid, images, masks, label_map, np.asarray(ids, dtype=np.int64))


def save_volume(path, vol: Volume) -> Path:
    path = Path(path)
    _atomic_write(path, encode_volume(vol))
    return path


def load_volume(path) -> Volume:
    path = Path(path)
    return decode_volume(path.read_bytes(), what=str(path))


def save_dataset(root, volumes) -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    return [save_volume(root / f"{v.sample_id}{VOL_SUFFIX}", v) for v in volumes]


def load_dataset(root) -> list[Volume]:
    root = Path(root)
    files = sorted(root.glob(f"*{VOL_SUFFIX}"))
    if not files:
        raise FormatError(f"no {VOL_SUFFIX} files under {root}")
    return [load_volume(f) for f in files]


# -- weights ---------------------------------------------------------------

def save_weights(path, model: Model, extra: dict | None = None) -> Path:
    header = {
        "config": model.config.to_dict(),
        "fingerprint": model.config.fingerprint(),
        "params": [{"name": k, "shape": list(p.shape), "trainable": bool(p.trainable)}
                   for k, p in model.params.items()],
    }
    if extra:
        header["extra"] = extra
    payload = b"".join(p.data.astype("<f4").tobytes() for p in model.params.values())
    path = Path(path)
    _atomic_write(path, _pack(W_MAGIC, header, payload))
    return path


def read_weights(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    header, payload, offset = _unpack(path.read_bytes(), W_MAGIC, str(path))
    specs = header.get("params")
    if not isinstance(specs, list) or not isinstance(header.get("fingerprint"), str):
        raise FormatError(f"{path}: manifest lacks 'params' list or 'fingerprint'")
    arrays, pos = {}, 0
    for spec in specs:
        try:
            name, shape = spec["name"], tuple(int(d) for d in spec["shape"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: malformed parameter entry {spec!r}") from None
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(payload):
            raise FormatError(f"{path}: payload for {name!r} at offset {offset + pos} needs "
                              f"{nbytes} bytes, only {len(payload) - pos} remain")
        arrays[name] = np.frombuffer(payload[pos:pos + nbytes], dtype="<f4").reshape(shape).copy()
        pos += nbytes
    if pos != len(payload):
        raise FormatError(f"{path}: {len(payload) - pos} trailing bytes after offset {offset + pos}")
    return header, arrays


def load_weights(path, model: Model) -> Model:
    """Copy archived values and trainable flags into ``model`` (in place)."""
    header, arrays = read_weights(path)
    want = model.config.fingerprint()
    if header["fingerprint"] != want:
        raise FingerprintError(
            f"weights fingerprint {header['fingerprint']} does not match model fingerprint {want}"
        )
    flags = {s["name"]: bool(s.get("trainable", True)) for s in header["params"]}
    if set(arrays) != set(model.params):
        raise FormatError(f"{path}: parameter names differ from the model's")
    for name, p in model.params.items():
        if arrays[name].shape != p.shape:
            raise FormatError(f"{path}: {name} has shape {arrays[name].shape}, model expects {p.shape}")
        p.data[...] = arrays[name]
        p.trainable = flags[name]
    return model


def load_model(path) -> Model:
    header, _ = read_weights(path)
    model = build(ModelConfig.from_dict(header["config"]))
    return load_weights(path, model)


# -- synthetic data --------------------------------------------------------

def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dy * c + dx * s) / ry
    v = (-dy * s + dx * c) / rx
    return u * u + v * v <= 1.0


def synth_slice(rng: np.random.Generator, height: int, width: int, n_tumors: int,
                noise: float = 0.03, min_radius: float = 0.12, max_radius: float = 0.25):
    """One synthetic FLAIR-like slice with nested ED/NTC/ET ellipses.

    Returns ``(image, mask, regions)``; ``regions`` lists, per tumor, the
    ellipse parameters and the scale of each nested level (ED 1.0, then NTC,
    then ET) so the nesting can be checked geometrically.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy0, cx0 = (height - 1) / 2, (width - 1) / 2
    brain = _ellipse(yy, xx, cy0, cx0, 0.45 * height, 0.4 * width, 0.0)
    fy, fx = rng.uniform(0.5, 1.5, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    background = 0.25 + 0.05 * np.sin(fy * np.pi * yy / height + phase) * np.cos(fx * np.pi * xx / width)
    image = np.where(brain, background, 0.02)
    mask = np.zeros((height, width), dtype=np.uint8)
    regions = []
    size = min(height, width)
    for _ in range(n_tumors):
        ry = rng.uniform(min_radius, max_radius) * size
        rx = rng.uniform(min_radius, max_radius) * size
        cy = rng.uniform(0.25, 0.75) * height
        cx = rng.uniform(0.25, 0.75) * width
        theta = rng.uniform(0, np.pi)
        s_ntc = rng.uniform(0.55, 0.75)
        s_et = s_ntc * rng.uniform(0.4, 0.6)
        regions.append({"center": (cy, cx), "radii": (ry, rx), "theta": theta,
                        "scales": {"ED": 1.0, "NTC": s_ntc, "ET": s_et}})
    # paint outer levels of every tumor before inner ones so no ring overwrites a core
    levels = (("ED", 2, 0.55), ("NTC", 1, 0.75), ("ET", 4, 0.95))
    for name, code, intensity in levels:
        for r in regions:
            k = r["scales"][name]
            inside = _ellipse(yy, xx, *r["center"], r["radii"][0] * k, r["radii"][1] * k, r["theta"])
            mask[inside] = code
            image[inside] = intensity
    image = image + noise * rng.standard_normal(image.shape)
    return (image * 1000.0).astype(np.float32), mask, regions


def synth_generate(seed: int, n_samples: int, slices_per_sample: int, height: int = 64,
                   width: int = 64, empty_rate: float = 0.3, max_tumors: int = 3,
                   noise: float = 0.03) -> list[Volume]:
    """Deterministic synthetic dataset; a fraction ``empty_rate`` of slices has no tumor."""
    if n_samples < 1 or slices_per_sample < 1:
        raise ValueError("need at least one sample and one slice per sample")
    rng = np.random.default_rng(seed)
    volumes = []
    for n in range(n_samples):
        imgs, masks = [], []
        for _ in range(slices_per_sample):
            k = 0 if rng.random() < empty_rate else int(rng.integers(1, max_tumors + 1))
            img, m, _ = synth_slice(rng, height, width, k, noise)
            imgs.append(img)
            masks.append(m)
        volumes.append(Volume(f"synth_{seed}_{n:04d}", np.stack(imgs), np.stack(masks)))
    return volumes
