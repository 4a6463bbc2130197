"""Synthetic multi-domain live/spoof images, few-shot splits and balanced batches.

A live image is a smooth radial blob on a flat background. Its spoof twin is
the same blob plus a domain-specific artifact (a moire-like grating, a
bright border frame or a colour cast). Each domain then applies its own
sensor model -- blur, brightness, colour shift and noise -- to both classes,
and pixels are clamped to [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FormatError, UsageError
from .rng import stream
from .serialization import DTYPE_TAGS, dtype_tag

LIVE, SPOOF = 1, 0
ARTIFACTS = ("moire", "frame", "cast")

DATA_MAGIC = b"AVITDATA"
DATA_VERSION = 1


@dataclass
class DomainSpec:
    domain_id: str
    color_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_std: float = 0.0
    blur_radius: float = 0.0
    brightness: float = 1.0
    artifact: str = "moire"
    artifact_strength: float = 0.2
    moire_period: float = 4.0
    moire_angle: float = 30.0
    strength_jitter: float = 0.0

    def __post_init__(self):
        self.color_shift = tuple(float(c) for c in self.color_shift)
        if len(self.color_shift) != 3:
            raise ConfigError(f"{self.domain_id}: color_shift needs 3 values")
        if self.artifact not in ARTIFACTS:
            raise ConfigError(f"{self.domain_id}: artifact must be one of {ARTIFACTS}, got {self.artifact!r}")
        if self.noise_std < 0 or self.blur_radius < 0:
            raise ConfigError(f"{self.domain_id}: noise_std and blur_radius must be non-negative")
        if not 0.25 <= self.brightness <= 2.0:
            raise ConfigError(f"{self.domain_id}: brightness {self.brightness} outside [0.25, 2]")
        if any(abs(c) > 0.5 for c in self.color_shift):
            raise ConfigError(f"{self.domain_id}: |color_shift| must be <= 0.5")
        if not 0 < self.artifact_strength <= 0.4:
            raise ConfigError(f"{self.domain_id}: artifact_strength must lie in (0, 0.4]")
        if not 0 <= self.strength_jitter <= 1:
            raise ConfigError(f"{self.domain_id}: strength_jitter must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def default_domains() -> list[DomainSpec]:
    """Four domains differing in sensor model and spoof artifact."""
    return [
        DomainSpec("alpha", color_shift=(0.06, 0.02, -0.04), noise_std=0.02, blur_radius=0.0,
                   brightness=1.0, artifact="moire", artifact_strength=0.2, moire_period=4.0, strength_jitter=0.8),
        DomainSpec("beta", color_shift=(-0.04, 0.0, 0.06), noise_std=0.03, blur_radius=0.6,
                   brightness=0.85, artifact="frame", artifact_strength=0.2, strength_jitter=0.8),
        DomainSpec("gamma", color_shift=(0.0, 0.05, 0.0), noise_std=0.04, blur_radius=0.3,
                   brightness=1.15, artifact="cast", artifact_strength=0.25, strength_jitter=0.7),
        DomainSpec("delta", color_shift=(0.03, -0.03, 0.03), noise_std=0.03, blur_radius=0.4,
                   brightness=0.7, artifact="moire", artifact_strength=0.25, moire_period=6.0,
                   moire_angle=-20.0, strength_jitter=0.8),
    ]


@dataclass
class DomainDataset:
    domain_id: str
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise UsageError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if not np.isin(self.labels, (LIVE, SPOOF)).all():
            raise UsageError("labels must be binary")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])

    @property
    def class_counts(self) -> tuple[int, int]:
        return int((self.labels == LIVE).sum()), int((self.labels == SPOOF).sum())

    def subset(self, indices) -> DomainDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return DomainDataset(self.domain_id, self.images[idx], self.labels[idx])

    def equals(self, other: DomainDataset) -> bool:
        return (self.domain_id == other.domain_id and self.images.dtype == other.images.dtype
                and np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels))


# -- generation ----------------------------------------------------------------

def artifact_pattern(spec: DomainSpec, image_size: int, channels: int = 3) -> np.ndarray:
    """The additive spoof artifact for ``spec`` as a ``(C, H, W)`` array."""
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    s = spec.artifact_strength
    out = np.zeros((channels, image_size, image_size))
    if spec.artifact == "moire":
        theta = np.deg2rad(spec.moire_angle)
        phase = 2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / spec.moire_period
        out[:] = s * 0.5 * (1.0 + np.sin(phase))
    elif spec.artifact == "frame":
        border = np.zeros((image_size, image_size), dtype=bool)
        w = max(1, image_size // 16)
        border[:w] = border[-w:] = True
        border[:, :w] = border[:, -w:] = True
        out[:, border] = s
    else:
        out[channels - 1] = s
    return out


def _live_blob(rng: np.random.Generator, image_size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    c = (image_size - 1) / 2
    cy, cx = c + rng.normal(0, image_size / 16, size=2)
    radius = rng.uniform(0.22, 0.36) * image_size
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
    fg = rng.uniform(0.35, 0.55, size=channels)
    bg = rng.uniform(0.05, 0.2, size=channels)
    return bg[:, None, None] + (fg - bg)[:, None, None] * blob


def apply_domain(spec: DomainSpec, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sensor model: blur, brightness, colour shift, additive noise, clamp."""
    out = image
    if spec.blur_radius > 0:
        out = gaussian_filter(out, sigma=(0, spec.blur_radius, spec.blur_radius), mode="nearest")
    out = out * spec.brightness + np.asarray(spec.color_shift)[: out.shape[0], None, None]
    if spec.noise_std > 0:
        out = out + rng.normal(0.0, spec.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_domain(spec: DomainSpec, count_per_class: int, seed: int, image_size: int = 32,
                    channels: int = 3, dtype=np.float32) -> DomainDataset:
    """Generate ``count_per_class`` live and spoof images (live block first).

    Spoof ``i`` is live ``i`` plus the artifact, before the sensor model.
    With ``strength_jitter = j`` the artifact of each spoof is scaled by a
    factor drawn from U(1 - j, 1 + j).
    """
    if count_per_class < 1:
        raise UsageError("count_per_class must be >= 1")
    rng = stream(seed, "data", spec.domain_id)
    art = artifact_pattern(spec, image_size, channels)
    live, spoof = [], []
    for _ in range(count_per_class):
        base = _live_blob(rng, image_size, channels)
        live.append(apply_domain(spec, base, rng))
        if spec.strength_jitter:
            factor = rng.uniform(1.0 - spec.strength_jitter, 1.0 + spec.strength_jitter)
            spoof.append(apply_domain(spec, base + factor * art, rng))
        else:
            spoof.append(apply_domain(spec, base + art, rng))
    images = np.stack(live + spoof).astype(dtype)
    labels = np.r_[np.full(count_per_class, LIVE), np.full(count_per_class, SPOOF)]
    return DomainDataset(spec.domain_id, images, labels)


# -- on-disk format ------------------------------------------------------------

def save_dataset(path, ds: DomainDataset) -> None:
    """Write ``ds`` as ``AVITDATA`` | u32 version | u32 len + domain id |
    u8 dtype | u32 count | u32 C, H, W | per sample: u8 label + pixels (LE)."""
    tag = dtype_tag(ds.images.dtype)
    name = ds.domain_id.encode("utf-8")
    n, c, h, w = ds.images.shape
    pixels = np.ascontiguousarray(ds.images, dtype=DTYPE_TAGS[tag]).reshape(n, -1)
    rows = np.empty((n, 1 + pixels.shape[1] * pixels.itemsize), dtype=np.uint8)
    rows[:, 0] = ds.labels
    rows[:, 1:] = pixels.view(np.uint8).reshape(n, -1)
    header = (DATA_MAGIC + struct.pack("<II", DATA_VERSION, len(name)) + name
              + struct.pack("<BIIII", tag, n, c, h, w))
    Path(path).write_bytes(header + rows.tobytes())


def load_dataset(path, dtype=None) -> DomainDataset:
    """Read a dataset file; ``dtype`` (if given) converts pixels after loading."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    pos = len(DATA_MAGIC)
    if buf[:pos] != DATA_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {DATA_MAGIC!r}")
    try:
        version, name_len = struct.unpack_from("<II", buf, pos)
        if version != DATA_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        pos += 8
        domain_id = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        tag, n, c, h, w = struct.unpack_from("<BIIII", buf, pos)
        pos += struct.calcsize("<BIIII")
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt header ({exc})") from exc
    if tag not in DTYPE_TAGS or DTYPE_TAGS[tag].kind != "f":
        raise FormatError(f"{path}: unsupported pixel dtype tag {tag}")
    dt = DTYPE_TAGS[tag]
    row = 1 + c * h * w * dt.itemsize
    if len(buf) - pos != n * row:
        raise FormatError(f"{path}: expected {n * row} payload bytes, found {len(buf) - pos}")
    rows = np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(n, row)
    labels = rows[:, 0].copy()
    images = rows[:, 1:].copy().view(dt).reshape(n, c, h, w).astype(dtype or dt.newbyteorder("="))
    try:
        return DomainDataset(domain_id, images, labels)
    except UsageError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- few-shot split and balanced batches ----------------------------------------

@dataclass
class FewShotSplit:
    shots: DomainDataset
    remainder: DomainDataset
    shot_indices: np.ndarray
    remainder_indices: np.ndarray

    @property
    def k(self) -> int:
        return len(self.shot_indices) // 2


def few_shot_split(target: DomainDataset, k: int, seed: int) -> FewShotSplit:
    """Hold out ``k`` live + ``k`` spoof samples, uniformly without replacement."""
    if k < 0:
        raise UsageError("k must be non-negative")
    live_idx = np.flatnonzero(target.labels == LIVE)
    spoof_idx = np.flatnonzero(target.labels == SPOOF)
    if len(live_idx) < k or len(spoof_idx) < k:
        raise UsageError(f"{target.domain_id}: need {k} per class for a {k}-shot split, "
                         f"have live={len(live_idx)} spoof={len(spoof_idx)}")
    rng = stream(seed, "split", target.domain_id)
    shots = np.r_[rng.choice(live_idx, k, replace=False), rng.choice(spoof_idx, k, replace=False)]
    shots = shots.astype(np.int64)
    remainder = np.setdiff1d(np.arange(len(target)), shots)
    return FewShotSplit(target.subset(shots), target.subset(remainder), shots, remainder)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray
    blocks: list[str] = field(default_factory=list)


def _draw_block(ds: DomainDataset, half: int, rng: np.random.Generator, allow_repeat: bool):
    picks = []
    for label in (LIVE, SPOOF):
        pool = np.flatnonzero(ds.labels == label)
        replace = allow_repeat and len(pool) < half
        if not replace and len(pool) < half:
            raise UsageError(f"{ds.domain_id}: {len(pool)} samples of class {label}, need {half}")
        picks.append(rng.choice(pool, half, replace=replace))
    return np.concatenate(picks)


def sample_batch(sources: list[DomainDataset], shots: FewShotSplit | DomainDataset | None, B: int,
                 rng: np.random.Generator, flip: bool = True) -> Batch:
    """One balanced batch: ``B/2`` live then ``B/2`` spoof from each source, then
    the target few-shot block (omitted when there are no shots).

    Within a block samples are drawn without replacement, except that the
    target block repeats shots when fewer than ``B/2`` per class exist.
    With ``flip``, each image is mirrored horizontally with probability 0.5.
    """
    if B <= 0 or B % 2:
        raise ConfigError(f"batch size per domain must be a positive even number, got {B}")
    half = B // 2
    blocks = [(ds, False) for ds in sources]
    shot_ds = shots.shots if isinstance(shots, FewShotSplit) else shots
    if shot_ds is not None and len(shot_ds):
        blocks.append((shot_ds, True))
    images, labels, domains, names = [], [], [], []
    for i, (ds, is_target) in enumerate(blocks):
        idx = _draw_block(ds, half, rng, allow_repeat=is_target)
        images.append(ds.images[idx])
        labels.append(ds.labels[idx])
        name = f"target:{ds.domain_id}" if is_target else ds.domain_id
        domains.append(np.full(len(idx), name, dtype=object))
        names.append(name)
    images = np.concatenate(images)
    mask = rng.random(len(images)) < 0.5
    if flip:
        images = images.copy()
        images[mask] = images[mask][..., ::-1]
    return Batch(images, np.concatenate(labels).astype(np.int64), np.concatenate(domains), names)
