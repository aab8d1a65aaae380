"""Frame-pair supply: synthetic moving-object scenes, PPM files, manifests."""

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PPMError(ValueError):
    """Malformed or unsupported PPM data; ``offset`` is the failing byte position."""

    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class FramePair:
    A1: np.ndarray
    A2: np.ndarray
    gap: int
    id: str

    def __post_init__(self):
        if self.A1.shape != self.A2.shape:
            raise ValueError(f"pair {self.id}: frame shapes {self.A1.shape} != {self.A2.shape}")
        if self.gap < 0:
            raise ValueError(f"pair {self.id}: negative gap")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    H: int = 64
    W: int = 64
    n_objects: int = 4
    speed_range: tuple = (0.1, 0.6)
    size_range: tuple = (6, 18)
    background: str = "gradient"

    def __post_init__(self):
        if self.background not in ("gradient", "noise-texture"):
            raise ValueError(f"unknown background style {self.background!r}")


@dataclass
class _Object:
    shape: str
    cx: float
    cy: float
    vx: float
    vy: float
    w: float
    h: float
    color: np.ndarray = field(repr=False)


def _background(spec, rng):
    H, W = spec.H, spec.W
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    if spec.background == "gradient":
        c0, c1 = rng.uniform(20, 235, size=(2, 3))
        theta = rng.uniform(0, 2 * np.pi)
        proj = (xx / W - 0.5) * np.cos(theta) + (yy / H - 0.5) * np.sin(theta)
        s = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
        return c0 + (c1 - c0) * s[..., None]
    # low-frequency texture: coarse uniform noise, bilinearly upsampled
    coarse = rng.uniform(30, 225, size=(H // 8 + 2, W // 8 + 2, 3))
    gy = yy / 8.0
    gx = xx / 8.0
    y0, x0 = np.floor(gy).astype(int), np.floor(gx).astype(int)
    fy, fx = (gy - y0)[..., None], (gx - x0)[..., None]
    return ((1 - fy) * (1 - fx) * coarse[y0, x0] + (1 - fy) * fx * coarse[y0, x0 + 1]
            + fy * (1 - fx) * coarse[y0 + 1, x0] + fy * fx * coarse[y0 + 1, x0 + 1])


def _objects(spec, length, rng):
    objs = []
    span = max(length - 1, 1)
    for _ in range(spec.n_objects):
        speed = rng.uniform(*spec.speed_range)
        ang = rng.uniform(0, 2 * np.pi)
        vx, vy = speed * np.cos(ang), speed * np.sin(ang)
        # keep the centre inside the frame for the whole sequence
        vx = np.clip(vx, -(spec.W - 1) / span, (spec.W - 1) / span)
        vy = np.clip(vy, -(spec.H - 1) / span, (spec.H - 1) / span)
        lo_x, hi_x = max(0.0, -vx * span), min(spec.W, spec.W - vx * span)
        lo_y, hi_y = max(0.0, -vy * span), min(spec.H, spec.H - vy * span)
        objs.append(_Object(
            shape=("rect", "ellipse")[rng.integers(2)],
            cx=rng.uniform(lo_x, hi_x),
            cy=rng.uniform(lo_y, hi_y),
            vx=vx, vy=vy,
            w=rng.uniform(*spec.size_range),
            h=rng.uniform(*spec.size_range),
            color=rng.uniform(0, 255, size=3),
        ))
    return objs


def _object_mask(obj, t, H, W):
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    cx, cy = obj.cx + obj.vx * t, obj.cy + obj.vy * t
    if obj.shape == "rect":
        return (np.abs(xx - cx) <= obj.w / 2) & (np.abs(yy - cy) <= obj.h / 2)
    return ((xx - cx) / (obj.w / 2)) ** 2 + ((yy - cy) / (obj.h / 2)) ** 2 <= 1.0


def generate_scene(spec, length):
    """Deterministic uint8 sequence (length, H, W, 3) of objects in constant motion."""
    if length < 2:
        raise ValueError("a scene needs at least 2 frames")
    rng = np.random.default_rng(spec.seed)
    bg = _background(spec, rng)
    objs = _objects(spec, length, rng)
    frames = np.empty((length, spec.H, spec.W, 3), dtype=np.uint8)
    for t in range(length):
        f = bg.copy()
        for o in objs:
            f[_object_mask(o, t, spec.H, spec.W)] = o.color
        frames[t] = np.clip(np.rint(f), 0, 255).astype(np.uint8)
    return frames


def scene_objects(spec, length):
    """Object tracks as generated for ``spec`` (for inspection and tests)."""
    rng = np.random.default_rng(spec.seed)
    _background(spec, rng)
    return _objects(spec, length, rng)


def sample_pairs(sequence, gap, count, rng, prefix="pair", mask_later=True):
    """``count`` pairs (frame t, frame t + gap) with t uniform over admissible starts.

    With ``mask_later`` false the earlier frame becomes the masked target.
    """
    n = len(sequence)
    if gap < 0 or gap >= n:
        raise ValueError(f"frame gap {gap} out of range for a {n}-frame sequence")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    starts = rng.integers(0, n - gap, size=count)
    pairs = []
    for i, t in enumerate(starts):
        a, b = sequence[t], sequence[t + gap]
        if not mask_later:
            a, b = b, a
        pairs.append(FramePair(a.copy(), b.copy(), int(gap), f"{prefix}{i:03d}_t{int(t)}"))
    return pairs


def synthetic_dataset(n_pairs, gap, seed, n_scenes=None, length=96, H=64, W=64,
                      background="gradient", mask_later=True, **scene_kw):
    """Pairs drawn evenly from ``n_scenes`` scenes seeded from ``seed``."""
    if n_scenes is None:
        n_scenes = max(1, n_pairs // 16)
    ss = np.random.SeedSequence(seed)
    scene_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n_scenes)]
    rng = np.random.default_rng(ss.spawn(1)[0])
    per = [n_pairs // n_scenes + (i < n_pairs % n_scenes) for i in range(n_scenes)]
    pairs = []
    for i, (sd, k) in enumerate(zip(scene_seeds, per)):
        seq = generate_scene(SceneSpec(seed=sd, H=H, W=W, background=background, **scene_kw),
                             length)
        pairs += sample_pairs(seq, gap, k, rng, prefix=f"s{i:03d}_", mask_later=mask_later)
    return pairs


# ---------------------------------------------------------------- PPM

def _header_tokens(buf):
    """Yield (token, offset) for the 4 header fields; returns payload start."""
    toks = []
    i = 0
    n = len(buf)
    while len(toks) < 4:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise PPMError("truncated header", i)
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        toks.append((buf[start:i], start))
    if i >= n or not buf[i:i + 1].isspace():
        raise PPMError("missing whitespace after maxval", i)
    return toks, i + 1


def decode_ppm(buf):
    toks, payload = _header_tokens(buf)
    (magic, off0), (w, offw), (h, offh), (mx, offm) = toks
    if magic != b"P6":
        raise PPMError(f"unsupported magic {magic!r}, expected b'P6'", off0)
    vals = []
    for tok, off in ((w, offw), (h, offh), (mx, offm)):
        if not tok.isdigit():
            raise PPMError(f"non-numeric header field {tok!r}", off)
        vals.append(int(tok))
    width, height, maxval = vals
    if width < 1 or height < 1:
        raise PPMError("image extents must be positive", offw)
    if maxval != 255:
        raise PPMError(f"only maxval 255 is supported, got {maxval}", offm)
    need = width * height * 3
    have = len(buf) - payload
    if have < need:
        raise PPMError(f"truncated payload: {have} of {need} bytes", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=payload).reshape(height, width, 3).copy()


def encode_ppm(image):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM P6 needs an H x W x 3 image, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def read_image(path):
    return decode_ppm(Path(path).read_bytes())


def write_image(path, image):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_ppm(image))


# ---------------------------------------------------------------- manifests

MANIFEST = "manifest.tsv"


def write_dataset(root, pairs):
    """Store pairs as ``a/NNN.ppm``, ``b/NNN.ppm`` plus a TSV manifest."""
    root = Path(root)
    lines = []
    for i, p in enumerate(pairs):
        pa, pb = f"a/{i:03d}.ppm", f"b/{i:03d}.ppm"
        write_image(root / pa, p.A1)
        write_image(root / pb, p.A2)
        lines.append(f"{p.id}\t{pa}\t{pb}\t{p.gap}\n")
    (root / MANIFEST).write_text("".join(lines))
    return root / MANIFEST


def read_manifest(path):
    path = Path(path)
    base = path.parent
    pairs = []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{ln}: expected 4 tab-separated fields")
        pid, pa, pb, gap = parts
        pairs.append(FramePair(read_image(base / pa), read_image(base / pb), int(gap), pid))
    return pairs


def load_dataset(path, gap=1):
    """From a manifest file, a directory holding one, or bare ``a/`` + ``b/`` dirs."""
    path = Path(path)
    if path.is_file():
        return read_manifest(path)
    if (path / MANIFEST).exists():
        return read_manifest(path / MANIFEST)
    a_dir, b_dir = path / "a", path / "b"
    if not (a_dir.is_dir() and b_dir.is_dir()):
        raise FileNotFoundError(f"{path}: no {MANIFEST} and no a/, b/ directories")
    names = sorted(n for n in os.listdir(a_dir) if n.endswith(".ppm"))
    return [FramePair(read_image(a_dir / n), read_image(b_dir / n), gap, Path(n).stem)
            for n in names]
