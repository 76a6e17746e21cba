"""Synthetic paired scenes: rectilinear renders, labels, fisheye views.

Scenes are drawn directly with numpy: a tinted background, one wavy
horizontal road band, and three object families — red discs plus two
kinds of vertical bars, thin poles and thick pylons.  Poles and pylons
share one paint color on purpose: the only way to tell them apart is
apparent width, so a segmenter has to read local geometry rather than
color, and the non-uniform magnification of a fisheye warp genuinely
disturbs that cue.  Every byte is a pure function of (spec, index), so
a dataset regenerates identically from its config.  The same module
owns manifest files (tab-separated text pairing rectilinear and
fisheye views of each scene), few-shot subset selection, and
train-time augmentation built on the shared warp-field resampler.
"""

import hashlib
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from . import geometry as G
from .model import VOID_ID

CLASS_BACKGROUND = 0
CLASS_ROAD = 1
CLASS_DISC = 2
CLASS_POLE = 3
CLASS_PYLON = 4
N_SEMANTIC_CLASSES = 5

CLASS_NAMES = ("background", "road_band", "disc", "pole", "pylon")

# base colors per class (RGB); individual objects jitter around these.
# Poles and pylons deliberately draw from the same color family.  The
# background sits near black: warped frames read as zero outside the
# source image, and a bright background would make those margins an
# out-of-palette color that skews every batch statistic downstream.
_BG_COLOR = np.array([20.0, 26.0, 34.0])
_ROAD_COLOR = np.array([55.0, 55.0, 60.0])
_DISC_COLOR = np.array([200.0, 60.0, 50.0])
_BAR_COLOR = np.array([230.0, 200.0, 60.0])

VARIANT_RECT = "rect"
VARIANT_FISHEYE = "fisheye"
VARIANTS = (VARIANT_RECT, VARIANT_FISHEYE)

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_TEST = "test"
SPLITS = (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST)

MANIFEST_NAME = "manifest.tsv"
FIELD_SIDECAR_NAME = "field.warp"


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one family of random scenes.

    ``disc_count``/``pole_count``/``pylon_count`` are inclusive
    (lo, hi) ranges; ``noise_amplitude`` is the pixel-noise standard
    deviation in 8-bit units.
    """

    seed: int = 0
    height: int = 128
    width: int = 256
    disc_count: tuple = (2, 5)
    pole_count: tuple = (3, 7)
    pylon_count: tuple = (2, 5)
    noise_amplitude: float = 8.0
    void_id: int = VOID_ID

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"scene size {self.height}x{self.width} too small")
        for name in ("disc_count", "pole_count", "pylon_count"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"{name} range ({lo}, {hi}) invalid")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be >= 0")
        if 0 <= self.void_id < N_SEMANTIC_CLASSES:
            raise ValueError("void_id collides with a semantic class id")


@dataclass
class SegmentationSample:
    """One image/label pair: uint8 [H, W, 3] pixels, uint8 [H, W] ids."""

    image: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.image.dtype != np.uint8 or self.image.ndim != 3 \
                or self.image.shape[2] != 3:
            raise ValueError(f"image must be uint8 [H,W,3], got "
                             f"{self.image.dtype} {self.image.shape}")
        if self.labels.dtype != np.uint8 \
                or self.labels.shape != self.image.shape[:2]:
            raise ValueError(f"labels must be uint8 {self.image.shape[:2]}, "
                             f"got {self.labels.dtype} {self.labels.shape}")

    @property
    def size(self):
        return self.labels.shape


def _paint(image, labels, mask, color, class_id):
    image[mask] = color
    labels[mask] = class_id


def generate_scene(spec, index):
    """Render scene ``index`` of the family described by ``spec``.

    Pure function of (spec, index): the same pair always produces
    bit-identical pixels and labels.  Scenes always contain background
    and the road band; object counts are drawn from the spec ranges.
    """
    rng = np.random.default_rng([spec.seed, index])
    H, W = spec.height, spec.width
    yy = np.arange(H, dtype=np.float64)[:, None]
    xx = np.arange(W, dtype=np.float64)[None, :]

    labels = np.full((H, W), CLASS_BACKGROUND, dtype=np.uint8)
    image = np.empty((H, W, 3), dtype=np.float64)
    tint = rng.uniform(-20.0, 20.0, size=3)
    ramp = 35.0 * (yy / max(H - 1, 1) - 0.5)
    image[:] = _BG_COLOR + tint + ramp[..., None]

    # wavy horizontal road band spanning the full width
    cycles = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    amp = rng.uniform(0.02, 0.10) * H
    center = rng.uniform(0.45, 0.65) * H \
        + amp * np.sin(2.0 * np.pi * cycles * xx / W + phase)
    half = rng.uniform(0.08, 0.16) * H
    road = np.abs(yy - center) <= half
    _paint(image, labels, road, _ROAD_COLOR + rng.uniform(-15, 15, 3),
           CLASS_ROAD)

    for _ in range(rng.integers(spec.disc_count[0], spec.disc_count[1] + 1)):
        cy = rng.uniform(0, H)
        cx = rng.uniform(0, W)
        r = rng.uniform(0.04, 0.10) * min(H, W)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        _paint(image, labels, mask, _DISC_COLOR + rng.uniform(-25, 25, 3),
               CLASS_DISC)

    # pylons first, poles on top, so thin bars survive overlaps
    for _ in range(rng.integers(spec.pylon_count[0], spec.pylon_count[1] + 1)):
        x0 = rng.uniform(0, W)
        half_w = rng.uniform(2.5, 4.0)
        top = rng.uniform(0.0, 0.55) * H
        length = rng.uniform(0.35, 0.75) * H
        mask = (np.abs(xx - x0) <= half_w) & (yy >= top) & (yy <= top + length)
        _paint(image, labels, mask, _BAR_COLOR + rng.uniform(-25, 25, 3),
               CLASS_PYLON)

    for _ in range(rng.integers(spec.pole_count[0], spec.pole_count[1] + 1)):
        x0 = rng.uniform(0, W)
        half_w = rng.uniform(1.0, 1.5)
        top = rng.uniform(0.0, 0.55) * H
        length = rng.uniform(0.35, 0.75) * H
        mask = (np.abs(xx - x0) <= half_w) & (yy >= top) & (yy <= top + length)
        _paint(image, labels, mask, _BAR_COLOR + rng.uniform(-25, 25, 3),
               CLASS_POLE)

    if spec.noise_amplitude > 0:
        image += rng.normal(0.0, spec.noise_amplitude, size=(H, W, 3))
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return SegmentationSample(image=image, labels=labels)


def derive_fisheye(sample, params, field=None, void_id=VOID_ID):
    """Warp one rectilinear sample into its fisheye counterpart.

    Pixels are resampled bilinearly, labels by nearest neighbor; output
    pixels without an in-frame source turn black / ``void_id``.  Pass a
    precomputed ``field`` (same geometry for every same-sized scene) to
    skip rebuilding it per sample.
    """
    H, W = sample.size
    if field is None:
        field = G.build_warp_field((H, W), (H, W), params)
    planes = sample.image.astype(np.float64).transpose(2, 0, 1)
    warped = G.remap_image(planes, field).transpose(1, 2, 0)
    image = np.clip(np.rint(warped), 0, 255).astype(np.uint8)
    labels = G.remap_labels(sample.labels, field, void_id)
    return SegmentationSample(image=image, labels=labels)


def to_model_input(image):
    """uint8 [H, W, 3] image -> float64 [3, H, W] in [0, 1]."""
    return image.astype(np.float64).transpose(2, 0, 1) / 255.0


def label_histogram(labels, n_classes, void_id=VOID_ID):
    """Pixel counts per class id, ignoring void; int64 [n_classes]."""
    flat = np.asarray(labels).reshape(-1)
    kept = flat[flat != void_id]
    if kept.size and kept.max() >= n_classes:
        raise ValueError(f"label {int(kept.max())} outside 0..{n_classes - 1}")
    return np.bincount(kept, minlength=n_classes).astype(np.int64)


# ---------------------------------------------------------------------------
# PNG round trip
# ---------------------------------------------------------------------------


def save_image_png(path, image):
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def save_labels_png(path, labels):
    Image.fromarray(labels, mode="L").save(path, format="PNG")


def load_image_png(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return arr


def load_labels_png(path):
    arr = np.asarray(Image.open(path), dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"label PNG {path} is not single-channel")
    return arr


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


NO_PARAMS = "-"


def distortion_tag(params):
    """Short stable identifier for a distortion parameter set."""
    parts = [params.f, params.k1, params.k2, params.k3, params.k4,
             *params.center, params.working_radius]
    text = ",".join(f"{p:.17g}" for p in parts)
    return hashlib.sha1(text.encode("ascii")).hexdigest()[:10]


@dataclass(frozen=True)
class ManifestEntry:
    scene_id: int
    split: str
    variant: str
    image: str
    label: str
    params: str = NO_PARAMS


@dataclass
class Manifest:
    """Ordered views of a dataset root; paths are relative to ``root``."""

    entries: list
    root: str = "."

    def validate(self):
        seen = set()
        pairs = {VARIANT_RECT: set(), VARIANT_FISHEYE: set()}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split {e.split!r}")
            if e.variant not in VARIANTS:
                raise ValueError(f"unknown variant {e.variant!r}")
            key = (e.scene_id, e.variant)
            if key in seen:
                raise ValueError(f"duplicate entry for scene {e.scene_id} "
                                 f"variant {e.variant}")
            seen.add(key)
            pairs[e.variant].add((e.scene_id, e.split))
        if pairs[VARIANT_FISHEYE] and \
                pairs[VARIANT_FISHEYE] != pairs[VARIANT_RECT]:
            raise ValueError("rect and fisheye entries do not pair one-to-one "
                             "by scene id and split")
        return self

    def select(self, split=None, variant=None):
        return [e for e in self.entries
                if (split is None or e.split == split)
                and (variant is None or e.variant == variant)]

    def scene_ids(self, split=None):
        return [e.scene_id for e in self.select(split, VARIANT_RECT)]

    def load_sample(self, entry):
        image = load_image_png(os.path.join(self.root, entry.image))
        labels = load_labels_png(os.path.join(self.root, entry.label))
        return SegmentationSample(image=image, labels=labels)


def write_manifest(manifest, path=None):
    if path is None:
        path = os.path.join(manifest.root, MANIFEST_NAME)
    lines = ["# warpadapt dataset manifest",
             "# scene_id\tsplit\tvariant\timage\tlabel\tparams"]
    for e in manifest.entries:
        lines.append(f"{e.scene_id}\t{e.split}\t{e.variant}\t{e.image}"
                     f"\t{e.label}\t{e.params}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def load_manifest(path):
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 6:
                raise ValueError(f"{path}:{ln}: expected 6 tab-separated "
                                 f"fields, got {len(fields)}")
            scene_id, split, variant, image, label, params = fields
            entries.append(ManifestEntry(scene_id=int(scene_id), split=split,
                                         variant=variant, image=image,
                                         label=label, params=params))
    manifest = Manifest(entries=entries, root=os.path.dirname(path) or ".")
    return manifest.validate()


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """Scene family plus split sizes; splits are disjoint index ranges."""

    seed: int = 0
    n_train: int = 600
    n_val: int = 100
    n_test: int = 200
    height: int = 128
    width: int = 256
    disc_count: tuple = (2, 5)
    pole_count: tuple = (3, 7)
    pylon_count: tuple = (2, 5)
    noise_amplitude: float = 8.0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one scene")
        self.scene_spec()  # validates the geometry/range fields

    @property
    def total(self):
        return self.n_train + self.n_val + self.n_test

    def scene_spec(self):
        return SceneSpec(seed=self.seed, height=self.height, width=self.width,
                         disc_count=self.disc_count,
                         pole_count=self.pole_count,
                         pylon_count=self.pylon_count,
                         noise_amplitude=self.noise_amplitude)

    def split_of(self, index):
        if index < self.n_train:
            return SPLIT_TRAIN
        if index < self.n_train + self.n_val:
            return SPLIT_VAL
        if index < self.total:
            return SPLIT_TEST
        raise ValueError(f"scene index {index} outside dataset of "
                         f"{self.total}")


def generate_dataset(spec, out_dir):
    """Render every scene of ``spec`` under ``out_dir`` and manifest it."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    scene_spec = spec.scene_spec()
    entries = []
    for i in range(spec.total):
        sample = generate_scene(scene_spec, i)
        image_rel = os.path.join("images", f"rect_{i:05d}.png")
        label_rel = os.path.join("labels", f"rect_{i:05d}.png")
        save_image_png(os.path.join(out_dir, image_rel), sample.image)
        save_labels_png(os.path.join(out_dir, label_rel), sample.labels)
        entries.append(ManifestEntry(scene_id=i, split=spec.split_of(i),
                                     variant=VARIANT_RECT, image=image_rel,
                                     label=label_rel))
    manifest = Manifest(entries=entries, root=out_dir).validate()
    write_manifest(manifest)
    return manifest


def derive_fisheye_dataset(manifest, params, out_dir, void_id=VOID_ID):
    """Warp every rectilinear entry of ``manifest`` into ``out_dir``.

    The output manifest pairs each original rectilinear view (referenced
    in place, via a relative path) with its fisheye counterpart; the
    shared warp field is stored alongside as a binary sidecar.
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    tag = distortion_tag(params)
    fields = {}
    entries = []
    for e in manifest.select(variant=VARIANT_RECT):
        sample = manifest.load_sample(e)
        size = sample.size
        if size not in fields:
            fields[size] = G.build_warp_field(size, size, params)
        warped = derive_fisheye(sample, params, field=fields[size],
                                void_id=void_id)
        image_rel = os.path.join("images", f"fisheye_{e.scene_id:05d}.png")
        label_rel = os.path.join("labels", f"fisheye_{e.scene_id:05d}.png")
        save_image_png(os.path.join(out_dir, image_rel), warped.image)
        save_labels_png(os.path.join(out_dir, label_rel), warped.labels)
        src_image = os.path.relpath(os.path.join(manifest.root, e.image),
                                    out_dir)
        src_label = os.path.relpath(os.path.join(manifest.root, e.label),
                                    out_dir)
        entries.append(replace(e, image=src_image, label=src_label))
        entries.append(ManifestEntry(scene_id=e.scene_id, split=e.split,
                                     variant=VARIANT_FISHEYE, image=image_rel,
                                     label=label_rel, params=tag))
    for size, field in fields.items():
        name = FIELD_SIDECAR_NAME if len(fields) == 1 \
            else f"field_{size[0]}x{size[1]}.warp"
        G.save_warp_field(field, os.path.join(out_dir, name))
    out = Manifest(entries=entries, root=out_dir).validate()
    write_manifest(out)
    return out


def sample_fewshot_subset(manifest, n, seed):
    """Keep a deterministic n-scene subset of the train split.

    Subsets drawn with the same seed are nested: the n=50 selection is a
    prefix of the n=100 one.  Validation and test entries pass through
    untouched, and both variants of a kept scene stay paired.
    """
    train_ids = list(dict.fromkeys(
        e.scene_id for e in manifest.entries if e.split == SPLIT_TRAIN))
    if n <= 0:
        raise ValueError(f"subset size {n} must be positive")
    if n > len(train_ids):
        raise ValueError(f"subset size {n} exceeds train split of "
                         f"{len(train_ids)}")
    order = np.random.default_rng(seed).permutation(len(train_ids))
    keep = {train_ids[j] for j in order[:n]}
    entries = [e for e in manifest.entries
               if e.split != SPLIT_TRAIN or e.scene_id in keep]
    return Manifest(entries=entries, root=manifest.root).validate()


# ---------------------------------------------------------------------------
# train-time augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    """Defaults flip only: scale/rotation jitter would blanket exactly
    the magnification and tilt a fisheye warp introduces, hiding the
    domain gap the adaptation study measures."""

    hflip_prob: float = 0.5
    scale_range: tuple = (1.0, 1.0)
    max_rotation_deg: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"scale_range ({lo}, {hi}) invalid")
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")


def affine_warp_field(height, width, flip, scale, angle_deg):
    """Inverse-map field for flip / scale / rotate about the image center.

    ``scale`` > 1 magnifies (sources shrink toward the center); rotation
    is counter-clockwise in image coordinates.  Output pixels whose
    source falls outside the frame are invalid and resample to
    black/void downstream.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    cy = (height - 1) / 2.0
    cx = (width - 1) / 2.0
    yy = np.arange(height, dtype=np.float64)[:, None] - cy
    xx = np.arange(width, dtype=np.float64)[None, :] - cx
    if flip:
        xx = -xx
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    u = cx + (c * xx + s * yy) / scale
    v = cy + (-s * xx + c * yy) / scale
    valid = (u >= 0.0) & (u <= width - 1.0) & (v >= 0.0) & (v <= height - 1.0)
    return G.WarpField.from_arrays(np.broadcast_to(u, (height, width)),
                                   np.broadcast_to(v, (height, width)), valid)


def augment_sample(planes, labels, rng, config, void_id=VOID_ID):
    """Randomly flip/scale/rotate one training sample.

    ``planes`` is a float [C, H, W] image (already normalized); labels
    resample nearest with void fill.  Draws exactly three variates from
    ``rng`` in a fixed order, so batch streams stay reproducible.
    """
    flip = rng.random() < config.hflip_prob
    scale = rng.uniform(*config.scale_range)
    angle = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)
    H, W = labels.shape
    field = affine_warp_field(H, W, flip, scale, angle)
    return G.remap_image(planes, field), G.remap_labels(labels, field, void_id)
