"""Keypoint annotations, person crops, augmentation and synthetic stick figures.

Coordinates are continuous: pixel ``(i, j)`` covers ``[j, j+1) x [i, i+1)`` so
its center sits at ``(j + 0.5, i + 0.5)``. A crop-normalized coordinate ``u``
corresponds to pixel position ``u * W`` in a crop of width ``W``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .skeleton import COCO_LIMBS, Skeleton, skeleton_for


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class KeypointInstance:
    """One person: a row per joint class, with COCO visibility flags.

    ``xy`` is in crop-normalized units once the instance has been cropped,
    in source pixels before that. ``area`` follows the same convention
    (pixels squared of the current frame).
    """

    xy: np.ndarray
    visibility: np.ndarray
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    area: float = 1.0
    image_id: int = 0

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=np.int64).reshape(-1)
        if len(self.xy) != len(self.visibility):
            raise DataError("xy and visibility disagree on joint count")

    @property
    def num_joints(self) -> int:
        return len(self.visibility)

    @property
    def joints(self) -> list[tuple[int, float, float, int]]:
        """Labeled joints as ``(class id, x, y, visibility)``."""
        return [(int(k), float(x), float(y), int(v))
                for k, ((x, y), v) in enumerate(zip(self.xy, self.visibility)) if v > 0]

    def labeled(self) -> tuple[np.ndarray, np.ndarray]:
        """Class ids and coordinates of joints with visibility > 0."""
        keep = np.flatnonzero(self.visibility > 0)
        return keep, self.xy[keep]

    def copy(self) -> "KeypointInstance":
        return replace(self, xy=self.xy.copy(), visibility=self.visibility.copy())

    def check(self) -> None:
        """Raise if a labeled joint lies outside the unit square."""
        _, xy = self.labeled()
        if xy.size and (xy.min() < 0.0 or xy.max() > 1.0):
            raise DataError("labeled joint outside [0, 1]")


@dataclass
class AugmentationSpec:
    scale_range: tuple[float, float] = (0.7, 1.3)
    rotation_range: tuple[float, float] = (-40.0, 40.0)
    flip_prob: float = 0.5
    output_size: tuple[int, int] = (192, 256)

    @classmethod
    def identity(cls, output_size=(192, 256)) -> "AugmentationSpec":
        return cls((1.0, 1.0), (0.0, 0.0), 0.0, tuple(output_size))


def flip_instance(instance: KeypointInstance, flip_map) -> KeypointInstance:
    """Mirror horizontally: x -> 1 - x and left/right class ids swapped."""
    flip_map = np.asarray(flip_map)
    out = instance.copy()
    out.xy[flip_map] = np.column_stack([1.0 - instance.xy[:, 0], instance.xy[:, 1]])
    out.visibility[flip_map] = instance.visibility
    return out


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator; identical for serial and parallel loaders."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


# --- image io ---------------------------------------------------------------

def _ppm_tokens(raw: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    tokens = []
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        tokens.append(raw[start:pos])
    return tokens, pos


def read_image(path) -> np.ndarray:
    """Read an 8-bit RGB image as ``(H, W, 3)`` uint8. PPM natively, others via Pillow."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] in (b"P6", b"P3"):
        (magic, w, h, maxval), pos = _ppm_tokens(raw, 4, 0)
        w, h, maxval = int(w), int(h), int(maxval)
        if maxval != 255:
            raise DataError(f"{path}: only 8-bit PPM supported")
        if magic == b"P6":
            data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
        else:
            data = np.array(raw[pos:].split()[: w * h * 3], dtype=np.uint8)
        if data.size != w * h * 3:
            raise DataError(f"{path}: truncated pixel data")
        return data.reshape(h, w, 3).copy()
    try:
        from PIL import Image
    except ImportError:
        raise DataError(f"{path}: not a PPM and Pillow is unavailable") from None
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise DataError("write_ppm expects an (H, W, 3) uint8 array")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def normalize_image(image: np.ndarray, mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    """uint8 RGB to standardized float64 (values scaled to [0, 1] first)."""
    img = np.asarray(image, dtype=np.float64)
    if np.asarray(image).dtype == np.uint8:
        img = img / 255.0
    return (img - mean) / std


# --- COCO annotations ---------------------------------------------------------

@dataclass
class CocoRecord:
    instance: KeypointInstance
    file_name: str
    width: int
    height: int


@dataclass
class CocoDataset:
    records: list[CocoRecord] = field(default_factory=list)
    keypoint_names: tuple[str, ...] = ()
    image_dir: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i) -> CocoRecord:
        return self.records[i]


def load_coco_keypoints(path) -> CocoDataset:
    """Parse a COCO person-keypoints annotation file.

    One record per annotation with at least one labeled joint; coordinates
    stay in source pixels. Joint count comes from the category's keypoint list.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot parse annotations ({exc})") from None
    if not isinstance(doc, dict) or "annotations" not in doc:
        raise DataError(f"{path}: missing 'annotations'")
    categories = {c["id"]: c for c in doc.get("categories", [])}
    images = {im["id"]: im for im in doc.get("images", [])}
    names: tuple[str, ...] = ()
    records = []
    for ann in doc["annotations"]:
        try:
            cat = categories[ann["category_id"]]
        except KeyError:
            raise DataError(f"unknown category id {ann.get('category_id')!r}") from None
        kp_names = tuple(cat.get("keypoints") or ())
        k = len(kp_names) or 17
        names = names or kp_names
        try:
            kps = np.asarray(ann["keypoints"], dtype=np.float64).reshape(-1, 3)
            bbox = tuple(float(v) for v in ann["bbox"])
            image = images[ann["image_id"]]
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed annotation {ann.get('id')!r}: {exc}") from None
        if len(kps) != k or len(bbox) != 4:
            raise DataError(f"annotation {ann.get('id')!r}: expected {k} keypoints and a 4-value bbox")
        vis = kps[:, 2].astype(np.int64)
        if not (vis > 0).any():
            continue
        area = float(ann.get("area") or bbox[2] * bbox[3])
        inst = KeypointInstance(kps[:, :2], vis, bbox, area, int(ann["image_id"]))
        records.append(CocoRecord(inst, image["file_name"], int(image["width"]), int(image["height"])))
    return CocoDataset(records, names, path.parent)


def coco_document(samples, skeleton: Skeleton, file_names, size) -> dict:
    """COCO keypoint annotation document for crops whose bbox is the full image."""
    w, h = size
    images, anns = [], []
    for i, ((_, inst), name) in enumerate(zip(samples, file_names)):
        images.append({"id": i, "file_name": name, "width": w, "height": h})
        kps = []
        for (x, y), v in zip(inst.xy, inst.visibility):
            kps += [round(float(x) * w, 6), round(float(y) * h, 6), int(v)]
        anns.append({
            "id": i, "image_id": i, "category_id": 1, "iscrowd": 0,
            "keypoints": kps, "num_keypoints": int((inst.visibility > 0).sum()),
            "bbox": [0, 0, w, h], "area": round(float(inst.area), 6),
        })
    category = {
        "id": 1, "name": "person", "supercategory": "person",
        "keypoints": list(skeleton.joint_names),
        "skeleton": [[a + 1, b + 1] for a, b in skeleton.limbs],
    }
    return {"images": images, "annotations": anns, "categories": [category]}


# --- cropping -----------------------------------------------------------------

def _bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample at continuous index coordinates (pixel centers are integers), edge clamped."""
    h, w = image.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def crop_box(bbox, image_size, output_size) -> tuple[float, float, float, float]:
    """Clamp ``bbox`` to the image and expand it about its center to the output aspect ratio."""
    x, y, w, h = (float(v) for v in bbox)
    img_w, img_h = image_size
    x0, y0 = max(0.0, x), max(0.0, y)
    x1, y1 = min(float(img_w), x + w), min(float(img_h), y + h)
    w, h = x1 - x0, y1 - y0
    if w <= 1 or h <= 1:
        raise DataError(f"degenerate bbox {bbox}")
    out_w, out_h = output_size
    cx, cy = x0 + w / 2, y0 + h / 2
    if w * out_h > h * out_w:
        h = w * out_h / out_w
    else:
        w = h * out_w / out_h
    return cx - w / 2, cy - h / 2, w, h


def to_crop_coords(xy, box) -> np.ndarray:
    x0, y0, w, h = box
    xy = np.asarray(xy, dtype=np.float64)
    return np.column_stack([(xy[:, 0] - x0) / w, (xy[:, 1] - y0) / h])


def from_crop_coords(uv, box) -> np.ndarray:
    x0, y0, w, h = box
    uv = np.asarray(uv, dtype=np.float64)
    return np.column_stack([x0 + uv[:, 0] * w, y0 + uv[:, 1] * h])


def crop_and_normalize(image: np.ndarray, instance: KeypointInstance, output_size,
                       mean: float = 0.5, std: float = 0.5):
    """Crop the person box to ``output_size`` = (W, H) and map its keypoints to [0, 1].

    Returns a standardized float crop ``(H, W, 3)`` and the cropped instance.
    Joints that leave the crop lose their label (visibility 0).
    """
    out_w, out_h = output_size
    img_h, img_w = image.shape[:2]
    box = crop_box(instance.bbox, (img_w, img_h), output_size)
    x0, y0, bw, bh = box
    cols = x0 + (np.arange(out_w) + 0.5) * bw / out_w - 0.5
    rows = y0 + (np.arange(out_h) + 0.5) * bh / out_h - 0.5
    xs, ys = np.meshgrid(cols, rows)
    src = np.asarray(image, dtype=np.float64)
    if np.asarray(image).dtype == np.uint8:
        src = src / 255.0
    crop = (_bilinear(src, xs, ys) - mean) / std
    uv = to_crop_coords(instance.xy, box)
    vis = instance.visibility.copy()
    vis[(uv < 0).any(axis=1) | (uv > 1).any(axis=1)] = 0
    area = instance.area * (out_w / bw) * (out_h / bh)
    return crop, KeypointInstance(uv, vis, instance.bbox, area, instance.image_id)


# --- augmentation -------------------------------------------------------------

def augment_matrix(scale: float, rotation_deg: float, flip: bool, size) -> np.ndarray:
    """3x3 map from crop pixel coordinates to augmented crop pixel coordinates."""
    w, h = size
    theta = math.radians(rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    to_origin = np.array([[1, 0, -w / 2], [0, 1, -h / 2], [0, 0, 1]], dtype=np.float64)
    rot = np.array([[scale * c, -scale * s, 0], [scale * s, scale * c, 0], [0, 0, 1]])
    back = np.array([[1, 0, w / 2], [0, 1, h / 2], [0, 0, 1]], dtype=np.float64)
    m = back @ rot @ to_origin
    if flip:
        m = np.array([[-1, 0, w], [0, 1, 0], [0, 0, 1]], dtype=np.float64) @ m
    return m


def draw_augmentation(spec: AugmentationSpec, rng: np.random.Generator):
    lo, hi = sorted(spec.scale_range)
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    lo, hi = sorted(spec.rotation_range)
    rotation = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    flip = bool(rng.random() < spec.flip_prob)
    return scale, rotation, flip


def apply_augmentation(crop: np.ndarray, instance: KeypointInstance, scale: float,
                       rotation: float, flip: bool, flip_map=None):
    """Warp image and keypoints by one affine; remap classes when flipped."""
    h, w = crop.shape[:2]
    if scale == 1.0 and rotation == 0.0 and not flip:
        return crop.copy(), instance.copy()
    m = augment_matrix(scale, rotation, flip, (w, h))
    inv = np.linalg.inv(m)
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    sx = inv[0, 0] * jj + inv[0, 1] * ii + inv[0, 2]
    sy = inv[1, 0] * jj + inv[1, 1] * ii + inv[1, 2]
    out = _bilinear(crop, sx - 0.5, sy - 0.5)

    px = instance.xy * np.array([w, h])
    moved = px @ m[:2, :2].T + m[:2, 2]
    uv = moved / np.array([w, h])
    vis = instance.visibility.copy()
    vis[(uv < 0).any(axis=1) | (uv > 1).any(axis=1)] = 0
    result = KeypointInstance(uv, vis, instance.bbox, instance.area * scale * scale,
                              instance.image_id)
    if flip:
        if flip_map is None:
            flip_map = skeleton_for(instance.num_joints).flip_map
        # the x mirror is already in the matrix; only the class ids move
        remapped = result.copy()
        remapped.xy[flip_map] = result.xy
        remapped.visibility[flip_map] = result.visibility
        result = remapped
    return out, result


def augment(crop: np.ndarray, instance: KeypointInstance, spec: AugmentationSpec,
            rng: np.random.Generator, flip_map=None):
    """Random scale, rotation about the crop center and horizontal flip."""
    scale, rotation, flip = draw_augmentation(spec, rng)
    return apply_augmentation(crop, instance, scale, rotation, flip, flip_map)


# --- synthetic stick figures ------------------------------------------------------

_DRAWN_LIMBS = tuple(l for l in COCO_LIMBS if l not in ((3, 5), (4, 6)))


def _rot(v: np.ndarray, deg: float) -> np.ndarray:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _body_pose(rng: np.random.Generator, symmetric: bool) -> np.ndarray:
    """17 COCO joints in body units: x right (person's left), y down, hip center at origin."""
    j = np.zeros((17, 2))
    lean = 0.0 if symmetric else rng.uniform(-12, 12)
    up = _rot(np.array([0.0, -1.0]), lean)
    side = np.array([-up[1], up[0]])  # toward the person's left (image right)
    neck = 0.32 * up
    j[0] = neck + 0.10 * up
    head = j[0]
    for left, right, off in ((1, 2, (0.025, -0.02)), (3, 4, (0.05, 0.0))):
        j[left] = head + off[0] * side - off[1] * up
        j[right] = head - off[0] * side - off[1] * up

    def limb(root, outward, a1, a2, l1, l2):
        down = -up
        d1 = _rot(down, outward * a1)
        mid = root + l1 * d1
        return mid, mid + l2 * _rot(d1, outward * a2)

    arm = [rng.uniform(10, 120), rng.uniform(0, 90)]
    leg = [rng.uniform(0, 30), rng.uniform(-20, 20)]
    sides = ((+1, 5, 7, 9, 11, 13, 15), (-1, 6, 8, 10, 12, 14, 16))
    for sign, sho, elb, wri, hip, kne, ank in sides:
        if not symmetric and sign < 0:
            arm = [rng.uniform(10, 120), rng.uniform(0, 90)]
            leg = [rng.uniform(0, 30), rng.uniform(-20, 20)]
        j[sho] = neck + sign * 0.11 * side + 0.02 * (-up)
        j[hip] = sign * 0.07 * side
        # rotation toward +x is clockwise from "down" in a y-down frame
        j[elb], j[wri] = limb(j[sho], -sign, arm[0], arm[1], 0.17, 0.15)
        j[kne], j[ank] = limb(j[hip], -sign, leg[0], leg[1], 0.24, 0.23)
    if symmetric:
        left = [1, 3, 5, 7, 9, 11, 13, 15]
        j[[l + 1 for l in left]] = j[left] * np.array([-1.0, 1.0])
        j[0, 0] = 0.0
    return j


def _segment_distance(px, py, a, b) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def synth_stick_figure(rng: np.random.Generator, num_joints: int = 17, size=(32, 32),
                       symmetric: bool = False, min_contrast: float = 0.3,
                       margin: float = 0.06):
    """Render a random articulated stick figure.

    Returns a uint8 ``(H, W, 3)`` image and a :class:`KeypointInstance` with
    crop-normalized coordinates for the ``num_joints`` subset of the COCO body.
    Every joint pixel differs from the background by at least ``min_contrast``
    (fraction of the 8-bit range). ``symmetric`` gives an exactly mirror
    symmetric image centered in the crop.
    """
    w, h = size
    skeleton = skeleton_for(num_joints, synthetic=True)
    body = _body_pose(rng, symmetric)

    lo, hi = body.min(axis=0), body.max(axis=0)
    extent = np.maximum(hi - lo, 1e-6)
    height_frac = rng.uniform(0.6, 0.85)
    span = np.array([w, h]) * (1 - 2 * margin)
    s = min(height_frac * h / extent[1], span[0] / extent[0], span[1] / extent[1])
    center = (lo + hi) / 2
    if symmetric:
        center[0] = 0.0
        pad = w / 2 - margin * w - s * np.abs(body[:, 0]).max()
        cx = w / 2
    else:
        pad = (span[0] - s * extent[0]) / 2
        cx = w / 2 + rng.uniform(-1, 1) * max(pad, 0.0)
    pad_y = (span[1] - s * extent[1]) / 2
    cy = h / 2 + rng.uniform(-1, 1) * max(pad_y, 0.0)
    px = (body - center) * s + np.array([cx, cy])

    contrast = rng.uniform(min_contrast + 2 / 255, max(min_contrast + 2 / 255, 0.9))
    bg = rng.uniform(0.0, 1.0 - contrast)
    fg = bg + contrast
    if rng.random() < 0.5:
        bg, fg = 1.0 - bg, 1.0 - fg
    line = rng.uniform(1.0, 2.5) * max(1.0, min(w, h) / 64)

    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    mask = np.zeros((h, w), dtype=bool)
    for a, b in _DRAWN_LIMBS:
        mask |= _segment_distance(jj, ii, px[a], px[b]) <= line / 2
    mask |= _segment_distance(jj, ii, px[0], (px[5] + px[6]) / 2) <= line / 2
    radius = max(line / 2, 0.75)
    for p in px:
        mask |= np.hypot(jj - p[0], ii - p[1]) <= radius
    if symmetric:
        mask = mask | mask[:, ::-1]
    gray = np.where(mask, fg, bg)
    image = np.repeat(np.round(gray * 255).astype(np.uint8)[..., None], 3, axis=2)

    uv = px[list(skeleton.coco_indices)] / np.array([w, h])
    area = float(max(extent[0] * s, 1.0) * max(extent[1] * s, 1.0))
    inst = KeypointInstance(uv, np.full(num_joints, 2), (0.0, 0.0, float(w), float(h)), area)
    return image, inst


def synthetic_dataset(count: int, seed: int, num_joints: int = 17, size=(32, 32),
                      **kwargs) -> list[tuple[np.ndarray, KeypointInstance]]:
    """``count`` stick figures; sample i depends only on (seed, i)."""
    samples = []
    for i in range(count):
        image, inst = synth_stick_figure(sample_rng(seed, 0, i), num_joints, size, **kwargs)
        inst.image_id = i
        samples.append((image, inst))
    return samples


def coco_crops(dataset: CocoDataset, output_size, image_dir=None, mean=0.5, std=0.5):
    """Standardized person crops for every record of a COCO dataset."""
    image_dir = Path(image_dir or dataset.image_dir or ".")
    cache: dict[str, np.ndarray] = {}
    out = []
    for rec in dataset:
        if rec.file_name not in cache:
            cache[rec.file_name] = read_image(image_dir / rec.file_name)
        crop, inst = crop_and_normalize(cache[rec.file_name], rec.instance, output_size, mean, std)
        if (inst.visibility > 0).any():
            out.append((crop, inst))
    return out


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
