"""Dataset indexing, image decoding, augmentation, protocol splits, and a
procedural identity-dataset generator for desk-scale experiments.

Directory convention: one image per file named ``<identity>_<camera>_<index>.<ext>``
with camera tokens like ``c1``; background/distractor images use the identity
token ``bg``. A tab-delimited manifest file (path, identity, camera,
is_distractor) is accepted for datasets that cannot be renamed.

Every decoded image leaving this module is 128x48x3 float32 in [0, 1].
"""

from __future__ import annotations

import colorsys
import io
import math
import os
import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError

IMAGE_H = 128
IMAGE_W = 48
DISTRACTOR_ID = -1

_FNAME_RE = re.compile(r"^(bg|\d+)_c(\d+)_(\d+)\.(png|ppm)$", re.IGNORECASE)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    identity: int
    camera: int
    is_distractor: bool = False


class DatasetManifest:
    """Immutable identity/camera index over a set of images.

    ``images`` optionally carries an in-memory (N, 128, 48, 3) array aligned
    with ``entries`` so callers can run without a backing directory.
    """

    def __init__(self, entries, name="dataset", images=None):
        self.entries = tuple(entries)
        self.name = name
        self.images = images
        if images is not None and len(images) != len(self.entries):
            raise DataError(
                f"images array ({len(images)}) does not match entries "
                f"({len(self.entries)})"
            )
        self._by_identity = {}
        for i, e in enumerate(self.entries):
            self._by_identity.setdefault(e.identity, []).append(i)

    def __len__(self):
        return len(self.entries)

    def identities(self):
        """Sorted non-distractor identity ids."""
        return sorted(i for i in self._by_identity if i != DISTRACTOR_ID)

    def distractor_indices(self):
        return list(self._by_identity.get(DISTRACTOR_ID, []))

    def indices_of(self, identity, camera=None):
        idx = self._by_identity.get(identity, [])
        if camera is None:
            return list(idx)
        return [i for i in idx if self.entries[i].camera == camera]

    def cameras_of(self, identity):
        return sorted({self.entries[i].camera for i in self.indices_of(identity)})

    def cross_camera_identities(self):
        """Identities observed by at least two cameras (can form positives)."""
        return [i for i in self.identities() if len(self.cameras_of(i)) >= 2]


def parse_image_name(fname):
    """Parse ``<identity>_<camera>_<index>.<ext>`` into (identity, camera)."""
    m = _FNAME_RE.match(fname)
    if not m:
        raise DataError(
            f"cannot parse image name {fname!r}; expected "
            f"<identity>_c<camera>_<index>.png/.ppm with 'bg' for distractors"
        )
    ident = DISTRACTOR_ID if m.group(1).lower() == "bg" else int(m.group(1))
    return ident, int(m.group(2))


def load_manifest(root, name=None):
    """Index a dataset directory by the filename convention."""
    if not os.path.isdir(root):
        raise DataError(f"dataset directory does not exist: {root}")
    entries = []
    for fname in sorted(os.listdir(root)):
        if fname.startswith(".") or fname.endswith((".tsv", ".txt", ".json")):
            continue
        ident, camera = parse_image_name(fname)
        entries.append(ManifestEntry(
            os.path.join(root, fname), ident, camera, ident == DISTRACTOR_ID
        ))
    if not entries:
        raise DataError(f"no images found under {root}")
    return DatasetManifest(entries, name=name or os.path.basename(os.path.normpath(root)))


def load_manifest_file(path, name=None):
    """Read a tab-delimited manifest: path, identity, camera, is_distractor."""
    entries = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
            p, ident, camera, dis = parts
            if not os.path.isabs(p):
                p = os.path.join(base, p)
            entries.append(ManifestEntry(p, int(ident), int(camera),
                                         dis.strip().lower() in ("1", "true")))
    if not entries:
        raise DataError(f"manifest file {path} is empty")
    return DatasetManifest(entries, name=name or os.path.basename(path))


def write_manifest_file(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(f"{e.path}\t{e.identity}\t{e.camera}\t"
                     f"{'1' if e.is_distractor else '0'}\n")


# ---- decoding and geometry ---------------------------------------------------


def bilinear_resize(img, out_h, out_w):
    """Bilinear resize with half-pixel-center sampling and edge clamping.

    Source coordinate of output pixel i is (i + 0.5) * (in/out) - 0.5; a
    same-size resize is therefore an exact pass-through.
    """
    img = np.asarray(img, dtype=np.float32)
    in_h, in_w = img.shape[:2]
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0, in_h - 1)
    xs = np.clip(xs, 0, in_w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0).astype(np.float32)[:, None, None]
    fx = (xs - x0).astype(np.float32)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def decode_resize(data: bytes):
    """Decode raster bytes (PNG/PPM at minimum) to a 128x48x3 [0,1] record."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise DataError(f"cannot decode image bytes: {exc}") from exc
    if arr.shape[:2] != (IMAGE_H, IMAGE_W):
        arr = bilinear_resize(arr, IMAGE_H, IMAGE_W)
    return np.ascontiguousarray(arr, dtype=np.float32)


def load_image(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image file {path}: {exc}") from exc
    return decode_resize(data)


def load_images(manifest):
    """Materialize every manifest entry as one (N, 128, 48, 3) float32 array."""
    if manifest.images is not None:
        return manifest.images
    out = np.empty((len(manifest), IMAGE_H, IMAGE_W, 3), dtype=np.float32)
    for i, e in enumerate(manifest.entries):
        out[i] = load_image(e.path)
    return out


def mirror(record):
    """Horizontal mirror (width-axis flip); applying it twice is the identity."""
    return np.ascontiguousarray(record[:, ::-1, :])


def rotate(record, degrees):
    """Rotate about the image center with bilinear resampling.

    Out-of-bounds samples replicate the nearest edge pixel; output keeps the
    input's shape.
    """
    h, w = record.shape[:2]
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    src_y = np.clip(cy + cos_t * dy - sin_t * dx, 0, h - 1)
    src_x = np.clip(cx + sin_t * dy + cos_t * dx, 0, w - 1)
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (src_y - y0).astype(np.float32)[:, :, None]
    fx = (src_x - x0).astype(np.float32)[:, :, None]
    img = np.asarray(record, dtype=np.float32)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


AUGMENT_POLICIES = ("none", "mirror", "mirror+rotate")


def augment(record, policy, rng):
    """Apply an augmentation policy to one record.

    ``mirror`` is the deterministic width flip; ``mirror+rotate`` additionally
    rotates by an angle drawn uniformly from [-3, +3] degrees.
    """
    if policy == "none":
        return record
    if policy == "mirror":
        return mirror(record)
    if policy == "mirror+rotate":
        return rotate(mirror(record), rng.uniform(-3.0, 3.0))
    raise ValueError(f"unknown augmentation policy {policy!r}")


def random_augment(record, policy, rng):
    """Training-time draw: uniformly original or mirrored (the doubled index),
    plus a random small rotation when the policy includes one."""
    if policy == "none":
        return record
    out = mirror(record) if rng.integers(2) else record
    if policy == "mirror+rotate":
        out = rotate(out, rng.uniform(-3.0, 3.0))
    return out


# ---- protocol splits ---------------------------------------------------------


@dataclass(frozen=True)
class ProtocolSplit:
    trial: int
    train_ids: tuple
    test_ids: tuple
    seed: int
    protocol: str


PROTOCOLS = ("grid", "viper", "cuhk03", "custom")


def make_split(manifest, protocol, master_seed, train_n=None, test_n=None,
               trials=None):
    """Generate identity-disjoint train/test splits for an evaluation protocol.

    grid: half/half identity partition, distractors join the gallery, 10 trials.
    viper: half/half identity partition, 10 trials.
    cuhk03: 1160 train / 100 test identities, 20 trials.
    custom: explicit train_n / test_n / trials.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}, expected {PROTOCOLS}")
    ids = manifest.identities()
    n = len(ids)
    if protocol in ("grid", "viper"):
        train_n = n // 2
        test_n = n - train_n
        trials = 10 if trials is None else trials
    elif protocol == "cuhk03":
        train_n, test_n = 1160, 100
        trials = 20 if trials is None else trials
    else:
        if train_n is None or test_n is None or trials is None:
            raise ValueError("custom protocol requires train_n, test_n, trials")
    if train_n + test_n > n or train_n < 1 or test_n < 1:
        raise DataError(
            f"protocol {protocol} needs {train_n}+{test_n} identities, "
            f"manifest has {n}"
        )
    splits = []
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([master_seed, t]))
        perm = rng.permutation(n)
        train = tuple(sorted(ids[i] for i in perm[:train_n]))
        test = tuple(sorted(ids[i] for i in perm[train_n : train_n + test_n]))
        trial_seed = int(rng.integers(2**31 - 1))
        splits.append(ProtocolSplit(t, train, test, trial_seed, protocol))
    return splits


def restrict(manifest, identities, include_distractors=False):
    """Sub-manifest containing only the given identities (plus distractors)."""
    wanted = set(identities)
    keep = [i for i, e in enumerate(manifest.entries)
            if e.identity in wanted
            or (include_distractors and e.is_distractor)]
    images = manifest.images[keep] if manifest.images is not None else None
    return DatasetManifest([manifest.entries[i] for i in keep],
                           name=manifest.name, images=images)


# ---- synthetic identity data ---------------------------------------------------


def _identity_palette(n_identities, rng, strength):
    """Deterministic, well-separated appearance per identity.

    Torso hues are evenly spaced so mean colors of distinct identities stay
    apart by construction; ``strength`` interpolates every identity toward a
    common neutral appearance (0 erases identity information entirely).
    """
    neutral = np.array([0.5, 0.5, 0.5])

    def toward(color):
        return neutral + strength * (np.asarray(color) - neutral)

    palette = []
    for i in range(n_identities):
        hue = (i / max(n_identities, 1)) % 1.0
        sat = 0.55 + 0.40 * rng.random()
        val = 0.45 + 0.50 * rng.random()
        torso = colorsys.hsv_to_rgb(hue, sat, val)
        leg_hue = (hue + 0.37 + 0.25 * rng.random()) % 1.0
        legs = colorsys.hsv_to_rgb(leg_hue, 0.35 + 0.5 * rng.random(),
                                   0.30 + 0.55 * rng.random())
        palette.append({
            "torso": toward(torso),
            "legs": toward(legs),
            "head": toward((0.85, 0.72, 0.62)),
            "stripe_period": int(rng.integers(4, 13)),
            "stripe_phase": float(rng.uniform(0, 2 * math.pi)),
            "stripe_amp": 0.12 * strength,
        })
    return palette


def _render_person(appearance, shift_x, shift_y):
    img = np.full((IMAGE_H, IMAGE_W, 3), 0.55, dtype=np.float64)
    cx = IMAGE_W // 2 + shift_x

    def block(r0, r1, half_w, color):
        r0 = int(np.clip(r0 + shift_y, 0, IMAGE_H))
        r1 = int(np.clip(r1 + shift_y, 0, IMAGE_H))
        c0 = int(np.clip(cx - half_w, 0, IMAGE_W))
        c1 = int(np.clip(cx + half_w, 0, IMAGE_W))
        img[r0:r1, c0:c1] = color

    block(10, 26, 8, appearance["head"])
    block(26, 74, 14, appearance["torso"])
    block(74, 116, 10, appearance["legs"])
    rows = np.arange(IMAGE_H)
    stripes = appearance["stripe_amp"] * np.sin(
        2 * math.pi * rows / appearance["stripe_period"] + appearance["stripe_phase"]
    )
    t0, t1 = int(np.clip(26 + shift_y, 0, IMAGE_H)), int(np.clip(74 + shift_y, 0, IMAGE_H))
    c0, c1 = int(np.clip(cx - 14, 0, IMAGE_W)), int(np.clip(cx + 14, 0, IMAGE_W))
    img[t0:t1, c0:c1] += stripes[t0:t1, None, None]
    return img


def generate_synthetic(out_dir, n_identities, images_per_identity, cameras,
                       difficulty=0.5, seed=0, identity_strength=1.0,
                       camera_knob=1.0, translate_knob=1.0, noise_knob=1.0,
                       distractors=0, write_manifest=True):
    """Materialize a procedural identity dataset and return its manifest.

    Each identity is a distinct color-block person; each camera applies a
    global tint/brightness shift and every image gets a small translation and
    pixel noise, all scaled by ``difficulty`` (0 makes every image of an
    identity pixel-identical). Deterministic per seed.
    """
    if n_identities < 2:
        raise DataError("need at least 2 identities to form negative pairs")
    os.makedirs(out_dir, exist_ok=True)
    root_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    palette = _identity_palette(n_identities, root_rng, identity_strength)
    cam_tint = {
        c: root_rng.uniform(-1, 1, size=3) for c in range(1, cameras + 1)
    }
    cam_gain = {c: root_rng.uniform(-1, 1) for c in range(1, cameras + 1)}

    entries = []

    def finish(img, rng_img, camera):
        img = img * (1 + 0.10 * difficulty * camera_knob * cam_tint[camera])
        img = img + 0.08 * difficulty * camera_knob * cam_gain[camera]
        img = img + rng_img.normal(0, 0.05 * difficulty * noise_knob,
                                   size=img.shape)
        return np.clip(img, 0, 1)

    for ident in range(n_identities):
        for camera in range(1, cameras + 1):
            for idx in range(1, images_per_identity + 1):
                rng_img = np.random.default_rng(
                    np.random.SeedSequence([seed, ident, camera, idx])
                )
                max_t = 3.0 * difficulty * translate_knob
                sx = int(round(rng_img.uniform(-max_t, max_t)))
                sy = int(round(rng_img.uniform(-max_t, max_t)))
                img = _render_person(palette[ident], sx, sy)
                img = finish(img, rng_img, camera)
                fname = f"{ident:04d}_c{camera}_{idx:02d}.png"
                _save_png(img, os.path.join(out_dir, fname))
                entries.append(ManifestEntry(
                    os.path.join(out_dir, fname), ident, camera, False
                ))

    for j in range(distractors):
        camera = 1 + (j % cameras)
        rng_img = np.random.default_rng(
            np.random.SeedSequence([seed, 0xB6, camera, j])
        )
        img = np.full((IMAGE_H, IMAGE_W, 3), 0.55)
        # random rectangles of clutter instead of a person silhouette
        for _ in range(6):
            r0, c0 = rng_img.integers(0, IMAGE_H - 8), rng_img.integers(0, IMAGE_W - 6)
            img[r0 : r0 + rng_img.integers(6, 30),
                c0 : c0 + rng_img.integers(4, 16)] = rng_img.random(3)
        img = finish(img, rng_img, camera)
        fname = f"bg_c{camera}_{j:04d}.png"
        _save_png(img, os.path.join(out_dir, fname))
        entries.append(ManifestEntry(
            os.path.join(out_dir, fname), DISTRACTOR_ID, camera, True
        ))

    entries.sort(key=lambda e: e.path)
    manifest = DatasetManifest(entries, name=os.path.basename(os.path.normpath(out_dir)))
    if write_manifest:
        write_manifest_file(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest


def _save_png(img, path):
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
