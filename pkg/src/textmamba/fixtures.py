"""Tensor interchange (JSON manifest + raw little-endian binaries) and synthetic fixtures."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .config import RunConfig
from .core import named_arrays
from .decoder import Targets, token_targets
from .epem import pyramid_shapes
from .model import ModelParams, init_model

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1
_DTYPE_NAMES = {"f32": "<f4", "f64": "<f8"}
_NAME_OF = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class ManifestError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def write_tensors(out_dir: str | Path, tensors: dict[str, np.ndarray], seed: int = 0,
                  extra: dict | None = None) -> Path:
    """Write ``tensors`` under ``out_dir/tensors`` and describe them in ``manifest.json``."""
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _NAME_OF:
            arr = arr.astype(np.float64)
        dname = _NAME_OF[arr.dtype]
        rel = f"tensors/{name}.bin"
        (out / rel).write_bytes(np.ascontiguousarray(arr).astype(_DTYPE_NAMES[dname]).tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dname, "file": rel,
                        "byte_order": "little", "layout": "row-major"})
    manifest = {"version": MANIFEST_VERSION, "seed": int(seed), "tensors": entries}
    if extra:
        manifest.update(extra)
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(in_dir: str | Path) -> dict:
    path = Path(in_dir) / MANIFEST
    if not path.is_file():
        raise ManifestError("manifest", f"{path} not found")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError("manifest", f"invalid JSON: {e}") from e
    for key in ("version", "seed", "tensors"):
        if key not in manifest:
            raise ManifestError(key, "missing from manifest")
    if manifest["version"] != MANIFEST_VERSION:
        raise ManifestError("version", f"unsupported manifest version {manifest['version']}")
    return manifest


def load_tensors(in_dir: str | Path) -> dict[str, np.ndarray]:
    """Load and validate every tensor; shape/byte-length mismatches fail before any data is used."""
    base = Path(in_dir)
    manifest = read_manifest(base)
    seen = set()
    plan = []
    for e in manifest["tensors"]:
        name = e.get("name")
        if name in seen:
            raise ManifestError(name, "duplicate tensor name")
        seen.add(name)
        if e.get("dtype") not in _DTYPE_NAMES:
            raise ManifestError(name, f"unsupported dtype {e.get('dtype')!r}")
        if e.get("byte_order", "little") != "little" or e.get("layout", "row-major") != "row-major":
            raise ManifestError(name, "only little-endian row-major tensors are supported")
        f = base / e["file"]
        if not f.is_file():
            raise ManifestError(name, f"missing data file {e['file']}")
        shape = tuple(int(s) for s in e["shape"])
        expected = math.prod(shape) * np.dtype(_DTYPE_NAMES[e["dtype"]]).itemsize
        actual = f.stat().st_size
        if actual != expected:
            raise ManifestError(name, f"{e['file']} has {actual} bytes, shape {list(shape)} "
                                      f"({e['dtype']}) needs {expected}")
        plan.append((name, f, shape, e["dtype"]))
    out = {}
    for name, f, shape, dname in plan:
        arr = np.frombuffer(f.read_bytes(), dtype=_DTYPE_NAMES[dname]).reshape(shape)
        out[name] = arr.astype(np.dtype(_DTYPE_NAMES[dname]).newbyteorder("="))
    return out


# -- synthetic scenes ----------------------------------------------------------------

def rectangle_polygon(box, n: int = 16) -> np.ndarray:
    """``n`` points evenly spaced along the perimeter of (x0, y0, x1, y1), clockwise from (x0, y0)."""
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    per = 2 * (w + h)
    pts = []
    for s in np.arange(n) * per / n:
        if s < w:
            pts.append((x0 + s, y0))
        elif s < w + h:
            pts.append((x1, y0 + s - w))
        elif s < 2 * w + h:
            pts.append((x1 - (s - w - h), y1))
        else:
            pts.append((x0, y1 - (s - 2 * w - h)))
    return np.array(pts)


def rasterize_box(box, h: int, w: int) -> np.ndarray:
    """Binary (h, w) mask of cells whose centres fall inside the normalised box."""
    x0, y0, x1, y1 = box
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    return (((ys >= y0) & (ys <= y1))[:, None] & ((xs >= x0) & (xs <= x1))[None, :]).astype(np.float64)


def synth_scene(rng: np.random.Generator, H: int = 64, W: int = 64, num_boxes: int = 3,
                n: int = 16):
    """A noise image with ``num_boxes`` brighter axis-aligned rectangles and their ground truth."""
    image = rng.uniform(0.0, 0.3, size=(H, W, 3))
    boxes = []
    for _ in range(num_boxes):
        bw = int(rng.integers(W // 6, W // 2))
        bh = int(rng.integers(H // 8, H // 3))
        x = int(rng.integers(0, W - bw))
        y = int(rng.integers(0, H - bh))
        image[y:y + bh, x:x + bw] += rng.uniform(0.5, 0.7, size=3)
        boxes.append((x / W, y / H, (x + bw) / W, (y + bh) / H))
    boxes = np.array(boxes)
    polygons = np.stack([rectangle_polygon(b, n) for b in boxes])
    masks = np.stack([rasterize_box(b, H // 8, W // 8) for b in boxes])
    return image, boxes, polygons, masks


def build_targets(boxes, polygons, masks, H: int, W: int) -> Targets:
    return Targets(boxes, polygons, masks, token_targets(pyramid_shapes(H, W), boxes))


def generate_fixtures(seed: int, cfg: RunConfig | None = None, num_boxes: int = 3) -> dict[str, np.ndarray]:
    """Image, ground truth and a full parameter set (every component enabled)."""
    cfg = RunConfig(seed=seed) if cfg is None else cfg.replace(seed=seed)
    full = cfg.replace(enable_ss2d=True, enable_dsffn=True, enable_epem=True)
    rng = np.random.default_rng(seed)
    image, boxes, polygons, masks = synth_scene(rng, cfg.image_h, cfg.image_w, num_boxes, cfg.num_points)
    tensors = {"image": image, "gt.boxes": boxes, "gt.polygons": polygons, "gt.masks": masks}
    params = init_model(full, np.random.default_rng([seed, 1]))
    for name, arr in named_arrays(params):
        tensors[f"params.{name}"] = arr
    return tensors


def gen_fixtures(seed: int, out_dir: str | Path, cfg: RunConfig | None = None) -> Path:
    cfg = RunConfig(seed=seed) if cfg is None else cfg.replace(seed=seed)
    return write_tensors(out_dir, generate_fixtures(seed, cfg), seed=seed,
                         extra={"config": cfg.to_dict()})


def params_from_tensors(cfg: RunConfig, tensors: dict[str, np.ndarray]) -> ModelParams:
    """Fill a config-shaped parameter template from ``params.*`` fixture tensors."""
    template = init_model(cfg)
    for name, arr in named_arrays(template):
        key = f"params.{name}"
        if key not in tensors:
            raise ManifestError(key, "required by the config but missing from fixtures")
        src = tensors[key]
        if src.shape != arr.shape:
            raise ManifestError(key, f"fixture shape {list(src.shape)} != config shape {list(arr.shape)}")
        arr[...] = src
    return template


def targets_from_tensors(cfg: RunConfig, tensors: dict[str, np.ndarray]) -> Targets:
    for key in ("image", "gt.boxes", "gt.polygons", "gt.masks"):
        if key not in tensors:
            raise ManifestError(key, "missing from fixtures")
    image = tensors["image"]
    if image.shape != (cfg.image_h, cfg.image_w, 3):
        raise ManifestError("image", f"shape {list(image.shape)} != config "
                                     f"[{cfg.image_h}, {cfg.image_w}, 3]")
    if tensors["gt.polygons"].shape[1] != cfg.num_points:
        raise ManifestError("num_points", f"fixture polygons have {tensors['gt.polygons'].shape[1]} "
                                          f"points, config asks for {cfg.num_points}")
    if tensors["gt.polygons"].shape[0] > cfg.num_proposals:
        raise ManifestError("num_proposals", "fewer proposals than ground-truth instances")
    dt = cfg.np_dtype
    return build_targets(tensors["gt.boxes"].astype(dt), tensors["gt.polygons"].astype(dt),
                         tensors["gt.masks"].astype(dt), cfg.image_h, cfg.image_w)
