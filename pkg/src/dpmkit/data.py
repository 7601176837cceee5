"""Synthetic occluded-ReID data, manifests, image-folder ingestion, and augmentation."""

from __future__ import annotations

import colorsys
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ShapeError, ValidationError

MANIFEST_VERSION = 1
SPLITS = ("train", "query", "gallery")
OCCLUDER_KINDS = ("rectangles", "bars", "scene-patches")


@dataclass
class SyntheticSpec:
    num_identities: int = 16
    images_per_identity: int = 8
    num_cameras: int = 2
    occlusion_rate: float = 1.0
    occluder_kinds: list[str] = field(default_factory=lambda: list(OCCLUDER_KINDS))
    seed: int = 0
    num_test_identities: int = 10
    query_per_identity: int = 2
    gallery_per_identity: int = 4
    image_height: int = 64
    image_width: int = 32
    # occlusion in the training split (separate from the query occlusion rate)
    train_occlusion_rate: float = 0.0

    def __post_init__(self):
        for name in ("occlusion_rate", "train_occlusion_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        bad = set(self.occluder_kinds) - set(OCCLUDER_KINDS)
        if bad or not self.occluder_kinds:
            raise ValidationError(f"unknown occluder kinds {sorted(bad)}")
        if self.num_identities < 1 or self.images_per_identity < 1 or self.num_cameras < 1:
            raise ValidationError("counts must be positive")

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class ManifestRecord:
    path: str
    identity_id: int
    camera_id: int
    split: str
    occluded: bool = False

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "format_version": MANIFEST_VERSION}, sort_keys=True)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path = Path(".")

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(r.to_json() + "\n" for r in self.records), encoding="utf-8")
        return path

    def validate(self, check_paths: bool = True):
        seen = set()
        for n, r in enumerate(self.records, 1):
            if r.split not in SPLITS:
                raise ValidationError(f"record {n} ({r.path}): unknown split {r.split!r}")
            if r.path in seen:
                raise ValidationError(f"record {n}: duplicate path {r.path}")
            seen.add(r.path)
            if check_paths and not (self.root / r.path).is_file():
                raise ValidationError(f"record {n}: dangling path {r.path}")
        train_ids = sorted({r.identity_id for r in self.split("train")})
        if train_ids and train_ids != list(range(len(train_ids))):
            raise ValidationError(f"train identity ids are not dense 0..{len(train_ids) - 1}")
        gallery_ids = {r.identity_id for r in self.split("gallery")}
        for n, r in enumerate(self.records, 1):
            if r.split == "query" and r.identity_id not in gallery_ids:
                raise ValidationError(f"record {n} ({r.path}): query identity {r.identity_id} absent from gallery")


def load_manifest(path, root=None, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    records = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            records.append(ManifestRecord(
                path=str(raw["path"]), identity_id=int(raw["identity_id"]),
                camera_id=int(raw["camera_id"]), split=str(raw["split"]),
                occluded=bool(raw.get("occluded", False)),
            ))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"record {n}: malformed ({exc})") from exc
    manifest = DatasetManifest(records, Path(root) if root is not None else path.parent)
    manifest.validate(check_paths)
    return manifest


# ---------------------------------------------------------------- rendering

def _identity_params(seed: int, k: int) -> dict:
    rng = np.random.default_rng([seed, 1, k])
    hues = rng.random(4)
    colors = [np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.5, 1.0), rng.uniform(0.45, 1.0))) for h in hues]
    return {
        "head": colors[0],
        "torso": colors[1],
        "legs": colors[2],
        "stripe": colors[3],
        "stripe_period": int(rng.integers(3, 8)),
        "stripe_phase": int(rng.integers(0, 8)),
        "stripe_vertical": bool(rng.random() < 0.5),
        "width_frac": rng.uniform(0.5, 0.75),
        "torso_frac": rng.uniform(0.35, 0.5),
    }


def _camera_params(seed: int, cam: int) -> dict:
    rng = np.random.default_rng([seed, 2, cam])
    return {
        "background": np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.1, 0.4), rng.uniform(0.3, 0.7))),
        "brightness": rng.uniform(0.8, 1.2),
        "hue_shift": rng.uniform(-0.04, 0.04),
    }


def _shift_hue(img: np.ndarray, shift: float) -> np.ndarray:
    # Rotate in the RGB cube about the grey axis, a cheap hue shift.
    theta = 2 * np.pi * shift
    c, s = np.cos(theta), np.sin(theta)
    k = np.ones(3) / np.sqrt(3)
    rot = c * np.eye(3) + s * np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]]) + (1 - c) * np.outer(k, k)
    return img @ rot.T


def _background(rng, h, w, cam: dict) -> np.ndarray:
    img = np.broadcast_to(cam["background"], (h, w, 3)).copy()
    img += rng.normal(0, 0.04, (h, w, 3))
    for _ in range(int(rng.integers(1, 4))):
        y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
        img[y0:y0 + int(rng.integers(4, h // 2)), x0:x0 + int(rng.integers(3, w // 2))] *= rng.uniform(0.6, 1.3)
    return img


def _figure_box(rng, h, w, ident: dict):
    fw = int(round(w * ident["width_frac"] * rng.uniform(0.92, 1.0)))
    fh = int(round(h * rng.uniform(0.82, 0.95)))
    x0 = (w - fw) // 2 + int(rng.integers(-2, 3))
    y0 = (h - fh) // 2 + int(rng.integers(-2, 3))
    return max(x0, 0), max(y0, 0), min(x0 + fw, w), min(y0 + fh, h)


def _draw_figure(img, box, ident: dict):
    x0, y0, x1, y1 = box
    fh, fw = y1 - y0, x1 - x0
    head_h = max(fh // 6, 2)
    torso_h = int(fh * ident["torso_frac"])
    hx0, hx1 = x0 + fw // 4, x1 - fw // 4
    img[y0:y0 + head_h, hx0:hx1] = ident["head"]
    ty0, ty1 = y0 + head_h, y0 + head_h + torso_h
    torso = np.broadcast_to(ident["torso"], (ty1 - ty0, fw, 3)).copy()
    period, phase = ident["stripe_period"], ident["stripe_phase"]
    if ident["stripe_vertical"]:
        cols = (np.arange(fw) + phase) % period < period // 2
        torso[:, cols] = ident["stripe"]
    else:
        rows = (np.arange(ty1 - ty0) + phase) % period < period // 2
        torso[rows] = ident["stripe"]
    img[ty0:ty1, x0:x1] = torso
    gap = max(fw // 8, 1)
    img[ty1:y1, x0 + gap:x0 + fw // 2 - gap // 2] = ident["legs"]
    img[ty1:y1, x0 + fw // 2 + gap // 2:x1 - gap] = ident["legs"]


def _occlude(rng, img, box, kinds, seed):
    """Cover 20-60% of the figure box with an occluder; returns covered fraction."""
    x0, y0, x1, y1 = box
    fh, fw = y1 - y0, x1 - x0
    target = rng.uniform(0.2, 0.6)
    kind = kinds[int(rng.integers(0, len(kinds)))]
    h, w = img.shape[:2]
    if kind == "bars":
        # vertical pole(s) spanning the figure height
        bw = max(1, int(round(target * fw)))
        bx = x0 + int(rng.integers(0, max(fw - bw, 0) + 1))
        ys, xs = slice(y0, y1), slice(bx, bx + bw)
    else:
        # block rising from the bottom or entering from a side
        if rng.random() < 0.6:
            oh = max(1, int(round(target * fh)))
            ys, xs = slice(y1 - oh, y1), slice(max(x0 - 2, 0), min(x1 + 2, w))
        else:
            ow = max(1, int(round(target * fw)))
            xs = slice(x0, x0 + ow) if rng.random() < 0.5 else slice(x1 - ow, x1)
            ys = slice(y0, y1)
    if kind == "rectangles":
        color = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9)))
        img[ys, xs] = color + rng.normal(0, 0.02, img[ys, xs].shape)
    else:
        # scene patch: texture from an unrelated background
        other = _background(rng, h, w, _camera_params(seed, int(rng.integers(100, 200))))
        img[ys, xs] = other[ys, xs]
    covered = np.zeros((h, w), bool)
    covered[ys, xs] = True
    return covered[y0:y1, x0:x1].mean()


def render_image(spec: SyntheticSpec, identity: int, camera: int, index: int, occluded: bool) -> np.ndarray:
    """Render one ``(H, W, 3)`` uint8 image; deterministic in its arguments."""
    rng = np.random.default_rng([spec.seed, 3, identity, camera, index])
    h, w = spec.image_height, spec.image_width
    ident, cam = _identity_params(spec.seed, identity), _camera_params(spec.seed, camera)
    img = _background(rng, h, w, cam)
    box = _figure_box(rng, h, w, ident)
    _draw_figure(img, box, ident)
    img = _shift_hue(img, cam["hue_shift"]) * cam["brightness"] * rng.uniform(0.92, 1.08)
    img += rng.normal(0, 0.02, img.shape)
    if occluded:
        _occlude(rng, img, box, list(spec.occluder_kinds), spec.seed)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


@dataclass
class ReIDData:
    """In-memory split: images ``(N, 3, H, W)`` float32 in [-1, 1]."""

    images: torch.Tensor
    identities: np.ndarray
    cameras: np.ndarray
    occluded: np.ndarray

    def __len__(self):
        return len(self.identities)

    def subset(self, idx) -> "ReIDData":
        idx = np.asarray(idx)
        return ReIDData(self.images[torch.as_tensor(idx)], self.identities[idx], self.cameras[idx], self.occluded[idx])


def to_tensor(images_uint8: np.ndarray) -> torch.Tensor:
    arr = np.asarray(images_uint8, dtype=np.float32) / 255.0
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (N, H, W, 3) images, got {arr.shape}")
    return torch.from_numpy((arr - 0.5) / 0.5).permute(0, 3, 1, 2).contiguous()


def to_uint8(images: torch.Tensor) -> np.ndarray:
    arr = (images.detach().permute(0, 2, 3, 1).numpy() * 0.5 + 0.5).clip(0, 1)
    return (arr * 255).round().astype(np.uint8)


def _plan(spec: SyntheticSpec):
    """Yield ``(split, identity, camera, index, occluded)`` for every image."""
    train_rng = np.random.default_rng([spec.seed, 5])
    for k in range(spec.num_identities):
        for n in range(spec.images_per_identity):
            yield "train", k, n % spec.num_cameras, n, bool(train_rng.random() < spec.train_occlusion_rate)
    occ_rng = np.random.default_rng([spec.seed, 4])
    for t in range(spec.num_test_identities):
        k = spec.num_identities + t
        for n in range(spec.query_per_identity):
            yield "query", k, (t + n) % spec.num_cameras, n, bool(occ_rng.random() < spec.occlusion_rate)
        for n in range(spec.gallery_per_identity):
            yield "gallery", k, n % spec.num_cameras, spec.query_per_identity + n, False


def render_synthetic(spec: SyntheticSpec) -> dict[str, ReIDData]:
    """Render every split in memory."""
    buckets = {s: ([], [], [], []) for s in SPLITS}
    for split, k, cam, n, occ in _plan(spec):
        b = buckets[split]
        b[0].append(render_image(spec, k, cam, n, occ))
        b[1].append(k)
        b[2].append(cam)
        b[3].append(occ)
    out = {}
    for split, (imgs, ids, cams, occ) in buckets.items():
        if not imgs:
            continue
        out[split] = ReIDData(to_tensor(np.stack(imgs)), np.array(ids), np.array(cams), np.array(occ))
    return out


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    records = []
    for split, k, cam, n, occ in _plan(spec):
        rel = f"images/{split}/{k:04d}_c{cam}_{n:03d}.png"
        (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(render_image(spec, k, cam, n, occ)).save(out_dir / rel, format="PNG")
        records.append(ManifestRecord(rel, k, cam, split, occ))
    manifest = DatasetManifest(records, out_dir)
    manifest.validate()
    manifest.write(out_dir / "manifest.jsonl")
    (out_dir / "spec.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=2), encoding="utf-8")
    return manifest


_NAME = re.compile(r"^(-?\d+)_c(\d+)")


def ingest_folder(root, out_path=None) -> DatasetManifest:
    """Build a manifest from ``root/{train,query,gallery}/<pid>_c<cam>*.{png,jpg}``.

    Train identities are relabeled densely; test identities keep their numbers
    shifted past the train range. Files with a negative pid are skipped.
    """
    root = Path(root)
    raw = []
    for split in SPLITS:
        for p in sorted((root / split).glob("*")):
            m = _NAME.match(p.name)
            if p.suffix.lower() not in (".png", ".jpg", ".jpeg") or not m or int(m.group(1)) < 0:
                continue
            raw.append((split, int(m.group(1)), int(m.group(2)), p.relative_to(root).as_posix()))
    train_map = {pid: i for i, pid in enumerate(sorted({pid for s, pid, _, _ in raw if s == "train"}))}
    test_pids = sorted({pid for s, pid, _, _ in raw if s != "train"})
    test_map = {pid: len(train_map) + i for i, pid in enumerate(test_pids)}
    cams = {c: i for i, c in enumerate(sorted({c for _, _, c, _ in raw}))}
    records = [
        ManifestRecord(rel, (train_map if s == "train" else test_map)[pid], cams[c], s)
        for s, pid, c, rel in raw
    ]
    manifest = DatasetManifest(records, root)
    manifest.validate()
    if out_path is not None:
        manifest.write(out_path)
    return manifest


def load_split(manifest: DatasetManifest, split: str, size=None) -> ReIDData:
    recs = manifest.split(split)
    imgs = []
    for r in recs:
        img = Image.open(manifest.root / r.path).convert("RGB")
        if size is not None and img.size != (size[1], size[0]):
            img = img.resize((size[1], size[0]), Image.BILINEAR)
        imgs.append(np.asarray(img))
    if not imgs:
        raise ValidationError(f"split {split!r} is empty")
    return ReIDData(
        to_tensor(np.stack(imgs)),
        np.array([r.identity_id for r in recs]),
        np.array([r.camera_id for r in recs]),
        np.array([r.occluded for r in recs]),
    )


# ---------------------------------------------------------------- augmentation

def augment(images: torch.Tensor, gen: torch.Generator, flip: bool = True, crop_pad: int = 2,
            erase_prob: float = 0.0) -> torch.Tensor:
    """Random horizontal flip, pad-and-crop, and random erasing on a batch."""
    out = images.clone()
    b, _, h, w = out.shape
    if flip:
        flips = torch.rand(b, generator=gen) < 0.5
        out[flips] = out[flips].flip(-1)
    if crop_pad:
        padded = torch.nn.functional.pad(out, (crop_pad,) * 4, mode="replicate")
        offs = torch.randint(0, 2 * crop_pad + 1, (b, 2), generator=gen)
        out = torch.stack([padded[i, :, y:y + h, x:x + w] for i, (y, x) in enumerate(offs.tolist())])
    if erase_prob > 0:
        out = random_erasing(out, gen, erase_prob)
    return out


def random_erasing(images: torch.Tensor, gen: torch.Generator, prob: float = 0.5,
                   area=(0.02, 0.4), aspect=(0.3, 3.3)) -> torch.Tensor:
    out = images.clone()
    b, c, h, w = out.shape
    for i in range(b):
        if float(torch.rand(1, generator=gen)) >= prob:
            continue
        for _ in range(10):
            a = h * w * float(torch.empty(1).uniform_(*area, generator=gen))
            r = float(torch.exp(torch.empty(1).uniform_(np.log(aspect[0]), np.log(aspect[1]), generator=gen)))
            eh, ew = int(round(np.sqrt(a * r))), int(round(np.sqrt(a / r)))
            if 0 < eh < h and 0 < ew < w:
                y = int(torch.randint(0, h - eh + 1, (1,), generator=gen))
                x = int(torch.randint(0, w - ew + 1, (1,), generator=gen))
                out[i, :, y:y + eh, x:x + ew] = torch.empty(c, eh, ew).uniform_(-1, 1, generator=gen)
                break
    return out


def patch_pixel_mask(binary, grid_shape, image_shape, patch_size: int, stride: int) -> np.ndarray:
    """Pixels covered by any selected patch."""
    h, w = image_shape
    rows, cols = grid_shape
    mask = np.zeros((h, w), bool)
    sel = np.asarray(binary).reshape(rows, cols).astype(bool)
    for r, c in zip(*np.nonzero(sel)):
        mask[r * stride:r * stride + patch_size, c * stride:c * stride + patch_size] = True
    return mask


def composite_images(target: np.ndarray, candidate: np.ndarray, candidate_binary, grid_shape,
                     patch_size: int, stride: int) -> np.ndarray:
    """Image-space view of token recombination: target pixels where the candidate is salient."""
    if target.shape != candidate.shape:
        raise ShapeError("image shapes differ")
    m = patch_pixel_mask(candidate_binary, grid_shape, target.shape[:2], patch_size, stride)
    return np.where(m[..., None], target, candidate)
