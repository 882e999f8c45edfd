"""Scans, labels, on-disk formats, preprocessing and the phantom generator.

A scan is held as a :class:`Volume` whose ``pixels`` array has shape
``(n_slices, height, width)``; a single slice is just a 2-D array.

Volume file layout (little-endian)::

    offset  size  field
    0       4     magic b"VOLR"
    4       4     format_version (u32)
    8       4     n_slices (u32)
    12      4     height (u32)
    16      4     width (u32)
    20      12    reserved (zero)
    32      ...   n_slices * height * width u16 pixels, row-major, slice by slice

Metadata (subject, scan id, CDR, split) lives in the JSON manifest, not in
the volume file.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BoundsError, ConfigError, DataError, DimensionError, FormatError

CDR_VALUES = (0.0, 0.5, 1.0, 2.0)
SPLITS = ("train", "validation", "test")

VOLUME_MAGIC = b"VOLR"
VOLUME_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII12x")
assert _HEADER.size == 32

# fraction of the slice stack kept when a manifest entry gives no explicit range
DEFAULT_SLICE_FRACTION = 0.4


def _check_cdr(cdr) -> float:
    cdr = float(cdr)
    if cdr not in CDR_VALUES:
        raise DataError(f"cdr must be one of {CDR_VALUES}, got {cdr}")
    return cdr


@dataclass(eq=False)
class Volume:
    """One scan: ordered slices plus identifiers and its CDR label."""

    subject_id: str
    scan_id: str
    pixels: np.ndarray
    cdr: float = 0.0
    split: str = "train"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3:
            raise DimensionError(
                f"volume pixels must be (n_slices, height, width), got shape {self.pixels.shape}"
            )
        if self.pixels.shape[1] <= 0 or self.pixels.shape[2] <= 0:
            raise DimensionError(f"slice dimensions must be positive, got {self.pixels.shape[1:]}")
        self.cdr = _check_cdr(self.cdr)
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def n_slices(self) -> int:
        return self.pixels.shape[0]

    @property
    def slice_shape(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    @property
    def slices(self) -> list[np.ndarray]:
        return list(self.pixels)

    def with_pixels(self, pixels) -> "Volume":
        return replace(self, pixels=pixels)

    def same_as(self, other: "Volume") -> bool:
        """Bit-level equality of pixels (dtype included) and metadata."""
        return (
            self.subject_id == other.subject_id
            and self.scan_id == other.scan_id
            and self.cdr == other.cdr
            and self.split == other.split
            and self.pixels.dtype == other.pixels.dtype
            and self.pixels.shape == other.pixels.shape
            and self.pixels.tobytes() == other.pixels.tobytes()
        )


# ---------------------------------------------------------------- preprocessing


def zero_pad_slice(s: np.ndarray, target_width: int) -> np.ndarray:
    """Center ``s`` horizontally inside ``target_width`` columns of zeros.

    An odd remainder puts the extra column on the right.
    """
    s = np.asarray(s)
    if s.ndim != 2:
        raise DimensionError(f"slice must be 2-D, got shape {s.shape}")
    width = s.shape[1]
    if width > target_width:
        raise DimensionError(f"slice width {width} exceeds target width {target_width}")
    extra = target_width - width
    left = extra // 2
    return np.pad(s, ((0, 0), (left, extra - left)), mode="constant", constant_values=0)


def pad_volume(v: Volume, target_width: int) -> Volume:
    if v.slice_shape[1] == target_width:
        return v
    padded = np.stack([zero_pad_slice(s, target_width) for s in v.pixels]) if v.n_slices else (
        np.zeros((0, v.slice_shape[0], target_width), dtype=v.pixels.dtype)
    )
    return v.with_pixels(padded)


def normalize_volume(v: Volume) -> Volume:
    """Per-scan min-max map to [0, 1] as float32; a constant scan maps to zeros."""
    px = v.pixels.astype(np.float64)
    if px.size == 0:
        raise DataError(f"scan {v.scan_id} has no pixels")
    if not np.all(np.isfinite(px)):
        raise DataError(f"scan {v.scan_id} contains non-finite intensities")
    lo, hi = px.min(), px.max()
    if hi == lo:
        out = np.zeros_like(px, dtype=np.float32)
    else:
        out = ((px - lo) / (hi - lo)).astype(np.float32)
        # guard against rounding pushing an endpoint outside [0, 1]
        np.clip(out, 0.0, 1.0, out=out)
    return v.with_pixels(out)


def select_slices(v: Volume, index_range: tuple[int, int]) -> Volume:
    """Keep the contiguous slices ``lo..hi`` (both inclusive)."""
    lo, hi = (int(i) for i in index_range)
    if not (0 <= lo <= hi < v.n_slices):
        raise BoundsError(f"slice range ({lo}, {hi}) invalid for a {v.n_slices}-slice scan")
    return v.with_pixels(v.pixels[lo : hi + 1])


def default_slice_range(n_slices: int, fraction: float = DEFAULT_SLICE_FRACTION) -> tuple[int, int]:
    """Centered contiguous range covering ``fraction`` of the slices (at least one)."""
    if n_slices <= 0:
        raise BoundsError("cannot select slices from an empty scan")
    if not 0 < fraction <= 1:
        raise ConfigError(f"slice fraction must be in (0, 1], got {fraction}")
    keep = max(1, min(n_slices, int(round(n_slices * fraction))))
    lo = (n_slices - keep) // 2
    return lo, lo + keep - 1


def drop_slices(v: Volume, excluded: Iterable[int]) -> Volume:
    excluded = sorted(set(int(i) for i in excluded))
    if not excluded:
        return v
    bad = [i for i in excluded if not 0 <= i < v.n_slices]
    if bad:
        raise BoundsError(f"excluded slice indices {bad} out of range for {v.n_slices} slices")
    keep = np.setdiff1d(np.arange(v.n_slices), excluded)
    return v.with_pixels(v.pixels[keep])


def preprocess(
    v: Volume,
    target_width: int | None = None,
    slice_range: tuple[int, int] | None = None,
    slice_fraction: float = DEFAULT_SLICE_FRACTION,
    exclude: Sequence[int] = (),
) -> Volume:
    """Pad, normalize, then slice-select (and drop excluded slices).

    ``exclude`` indexes the original slice stack. When ``slice_range`` is None
    the centered ``slice_fraction`` of the stack is kept.
    """
    if target_width is not None:
        v = pad_volume(v, target_width)
    v = normalize_volume(v)
    lo, hi = slice_range if slice_range is not None else default_slice_range(v.n_slices, slice_fraction)
    if exclude:
        local = [i - lo for i in exclude if lo <= i <= hi]
        v = select_slices(v, (lo, hi))
        return drop_slices(v, local)
    return select_slices(v, (lo, hi))


# ---------------------------------------------------------------- volume files


def save_volume(v: Volume, path) -> None:
    px = v.pixels
    if px.dtype != np.uint16:
        if not np.all(np.isfinite(px)) or px.min(initial=0) < 0 or px.max(initial=0) > 65535:
            raise FormatError("pixels must lie in the u16 range to be stored")
        if not np.array_equal(px, np.round(px)):
            raise FormatError("pixels must be integral to be stored losslessly")
        px = px.astype(np.uint16)
    n, h, w = px.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VOLUME_MAGIC, VOLUME_FORMAT_VERSION, n, h, w))
        fh.write(px.astype("<u2", copy=False).tobytes(order="C"))


def read_volume_pixels(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"volume file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n, h, w = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if h == 0 or w == 0:
        raise FormatError(f"{path}: zero slice dimension {h}x{w}")
    expected = _HEADER.size + 2 * n * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    px = np.frombuffer(raw, dtype="<u2", offset=_HEADER.size).reshape(n, h, w)
    return px.astype(np.uint16)


def load_volume(path, entry: "ManifestEntry | None" = None) -> Volume:
    """Read a volume file; metadata and slice-count checks come from ``entry``."""
    px = read_volume_pixels(path)
    if entry is None:
        stem = Path(path).stem
        return Volume(subject_id=stem, scan_id=stem, pixels=px)
    if entry.n_slices is not None and px.shape[0] != entry.n_slices:
        raise FormatError(
            f"{path}: manifest lists {entry.n_slices} slices for {entry.scan_id}, file has {px.shape[0]}"
        )
    return Volume(
        subject_id=entry.subject_id, scan_id=entry.scan_id, pixels=px, cdr=entry.cdr, split=entry.split
    )


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject_id: str
    scan_id: str
    cdr: float
    split: str
    n_slices: int | None = None
    slice_range: tuple[int, int] | None = None
    exclude_slices: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "subject_id": self.subject_id,
            "scan_id": self.scan_id,
            "cdr": self.cdr,
            "split": self.split,
            "n_slices": self.n_slices,
            "slice_range": list(self.slice_range) if self.slice_range is not None else None,
            "exclude_slices": list(self.exclude_slices),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise FormatError(f"unknown manifest entry keys: {sorted(unknown)}")
        try:
            sr = d.get("slice_range")
            return cls(
                path=str(d["path"]),
                subject_id=str(d["subject_id"]),
                scan_id=str(d["scan_id"]),
                cdr=_check_cdr(d["cdr"]),
                split=str(d["split"]),
                n_slices=None if d.get("n_slices") is None else int(d["n_slices"]),
                slice_range=None if sr is None else (int(sr[0]), int(sr[1])),
                exclude_slices=tuple(int(i) for i in d.get("exclude_slices", ())),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise FormatError(f"malformed manifest entry {d!r}: {exc}") from exc


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    format_version: int = MANIFEST_FORMAT_VERSION
    root: Path | None = None  # directory that relative entry paths resolve against

    def validate(self) -> None:
        seen: set[str] = set()
        subject_split: dict[str, str] = {}
        for e in self.entries:
            if e.scan_id in seen:
                raise DataError(f"duplicate scan_id {e.scan_id!r} in manifest")
            seen.add(e.scan_id)
            if e.split not in SPLITS:
                raise DataError(f"scan {e.scan_id}: unknown split {e.split!r}")
            prev = subject_split.setdefault(e.subject_id, e.split)
            if prev != e.split:
                raise DataError(
                    f"subject {e.subject_id!r} has scans in both {prev!r} and {e.split!r} splits"
                )

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load(self, entry: ManifestEntry) -> Volume:
        return load_volume(self.resolve(entry), entry)

    def to_json(self) -> str:
        doc = {"format_version": self.format_version, "entries": [e.to_dict() for e in self.entries]}
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path) -> None:
        self.validate()
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or "entries" not in doc:
            raise FormatError(f"{path}: manifest must be an object with an 'entries' list")
        version = doc.get("format_version")
        if version != MANIFEST_FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported manifest format_version {version!r}")
        m = cls(
            entries=[ManifestEntry.from_dict(d) for d in doc["entries"]],
            format_version=version,
            root=path.parent,
        )
        m.validate()
        return m


# ---------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class PhantomSpec:
    """Seeded recipe for a synthetic dataset of nested-ellipse "brains".

    Healthy scans are split ``n_train`` to training and the rest between
    validation and test by ``validation_fraction``; anomalous scans are split
    between validation and test the same way.
    """

    seed: int = 0
    n_healthy: int = 70
    n_anomalous: int = 30
    slices_per_volume: int = 12
    slice_size: tuple[int, int] = (64, 64)
    severity: float = 1.0
    noise_sigma: float = 0.01
    n_train: int = 40
    validation_fraction: float = 1 / 3
    structure_factor: float = 0.5
    cavity_factor: float = 0.8

    def validate(self) -> None:
        if self.slices_per_volume < 6:
            raise ConfigError(
                f"slices_per_volume must be >= 6 to form a window pair, got {self.slices_per_volume}"
            )
        h, w = self.slice_size
        if h <= 0 or w <= 0:
            raise ConfigError(f"slice_size must be positive, got {self.slice_size}")
        if self.n_healthy < 0 or self.n_anomalous < 0:
            raise ConfigError("phantom counts must be non-negative")
        if not 0 <= self.n_train <= self.n_healthy:
            raise ConfigError(f"n_train must be in [0, n_healthy], got {self.n_train}")
        if not 0 <= self.severity <= 1:
            raise ConfigError(f"severity must be in [0, 1], got {self.severity}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 <= self.validation_fraction <= 1:
            raise ConfigError("validation_fraction must be in [0, 1]")
        for name in ("structure_factor", "cavity_factor"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1)")


# severity multipliers per CDR tier
SEVERITY_TIERS = {0.5: 1 / 3, 1.0: 2 / 3, 2.0: 1.0}


def _soft_ellipse(xx, yy, cx, cy, ax, ay, edge):
    """Anti-aliased ellipse occupancy in [0, 1]; zero for non-positive axes."""
    if ax <= 0 or ay <= 0:
        return np.zeros_like(xx)
    rho = np.sqrt(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2)
    dist = (rho - 1.0) * min(ax, ay)
    return 0.5 * (1.0 - np.tanh(dist / edge))


def _cross_section(z, zc, zr):
    """Radius fraction of an ellipsoid (center zc, half-extent zr) cut at height z."""
    if zr <= 0:
        return 0.0
    q = 1.0 - ((z - zc) / zr) ** 2
    return math.sqrt(q) if q > 0 else 0.0


def render_phantom(
    rng: np.random.Generator,
    n_slices: int,
    size: tuple[int, int],
    severity: float = 0.0,
    noise_sigma: float = 0.0,
    structure_factor: float = 0.5,
    cavity_factor: float = 0.8,
) -> np.ndarray:
    """Render one scan as float64 intensities in [0, 1], shape (n, H, W).

    ``severity`` shrinks the bright inner structures (the cortical ribbon and a
    pair of deep nuclei) by ``1 - severity*structure_factor`` and enlarges the
    dark cavities by ``1 + severity*cavity_factor``. Healthy scans use
    severity 0 through the same code path.
    """
    h, w = size
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    edge = 1.0 / max(h, w)

    # subject-level anatomy
    cx, cy = rng.normal(0.0, 0.02, size=2)
    ax, ay = 0.74 + rng.normal(0, 0.015), 0.86 + rng.normal(0, 0.015)
    tissue = 0.55 + rng.normal(0, 0.02)
    ribbon_val = 0.75 + rng.normal(0, 0.02)
    nucleus_val = 0.95
    cavity_val = 0.08
    z_shift = rng.normal(0, 0.03)
    vent_scale = 1.0 + rng.normal(0, 0.04)
    nuc_scale = 1.0 + rng.normal(0, 0.04)

    shrink = 1.0 - severity * structure_factor
    grow = 1.0 + severity * cavity_factor

    out = np.empty((n_slices, h, w))
    for k in range(n_slices):
        t = -1.0 + 2.0 * k / (n_slices - 1) if n_slices > 1 else 0.0
        z = 0.5 * t + z_shift
        r = _cross_section(z, 0.0, 1.15)
        brain = _soft_ellipse(xx, yy, cx, cy, ax * r, ay * r, edge)
        thick = 0.12 * shrink
        inner = _soft_ellipse(xx, yy, cx, cy, ax * r - thick, ay * r - thick, edge)
        img = brain * (inner * tissue + (1 - inner) * ribbon_val)

        for side in (-1.0, 1.0):
            fr = _cross_section(z, -0.2, 0.35 * nuc_scale * shrink)
            nuc = _soft_ellipse(
                xx, yy, cx + side * 0.36, cy + 0.28,
                0.09 * nuc_scale * shrink * fr, 0.15 * nuc_scale * shrink * fr, edge,
            )
            img = img * (1 - nuc) + nuc * nucleus_val

            fr = _cross_section(z, 0.1, 0.5 * vent_scale * grow)
            vent = _soft_ellipse(
                xx, yy, cx + side * 0.14, cy - 0.08,
                0.07 * vent_scale * grow * fr, 0.2 * vent_scale * grow * fr, edge,
            )
            img = img * (1 - vent * brain) + vent * brain * cavity_val
        out[k] = img

    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 65535).astype(np.uint16)


def _split_counts(n: int, fraction: float) -> tuple[int, int]:
    n_val = int(round(n * fraction))
    return n_val, n - n_val


def plan_phantoms(spec: PhantomSpec) -> list[dict]:
    """Per-scan plan (ids, split, cdr, severity) in generation order."""
    spec.validate()
    plan = []
    healthy_val, _ = _split_counts(spec.n_healthy - spec.n_train, spec.validation_fraction)
    for i in range(spec.n_healthy):
        if i < spec.n_train:
            split = "train"
        elif i < spec.n_train + healthy_val:
            split = "validation"
        else:
            split = "test"
        plan.append({"split": split, "cdr": 0.0, "severity": 0.0})
    anom_val, _ = _split_counts(spec.n_anomalous, spec.validation_fraction)
    tiers = sorted(SEVERITY_TIERS)
    for j in range(spec.n_anomalous):
        if j < anom_val:
            split, k = "validation", j
        else:
            split, k = "test", j - anom_val
        cdr = tiers[k % len(tiers)]
        plan.append({"split": split, "cdr": cdr, "severity": spec.severity * SEVERITY_TIERS[cdr]})
    for idx, p in enumerate(plan):
        p["subject_id"] = f"sub-{idx:04d}"
        p["scan_id"] = f"sub-{idx:04d}_ses-01"
    return plan


def generate_phantoms(spec: PhantomSpec, out_dir) -> DatasetManifest:
    """Write one volume file per planned scan plus ``manifest.json`` under ``out_dir``."""
    plan = plan_phantoms(spec)
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(spec.seed).spawn(len(plan))
    entries = []
    for p, ss in zip(plan, children):
        rng = np.random.default_rng(ss)
        img = render_phantom(
            rng,
            spec.slices_per_volume,
            tuple(spec.slice_size),
            severity=p["severity"],
            noise_sigma=spec.noise_sigma,
            structure_factor=spec.structure_factor,
            cavity_factor=spec.cavity_factor,
        )
        v = Volume(p["subject_id"], p["scan_id"], quantize(img), cdr=p["cdr"], split=p["split"])
        rel = f"volumes/{p['scan_id']}.vol"
        save_volume(v, out_dir / rel)
        entries.append(
            ManifestEntry(
                path=rel,
                subject_id=p["subject_id"],
                scan_id=p["scan_id"],
                cdr=p["cdr"],
                split=p["split"],
                n_slices=spec.slices_per_volume,
                # phantoms contain only the region of interest
                slice_range=(0, spec.slices_per_volume - 1),
            )
        )
    manifest = DatasetManifest(entries=entries, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_preprocessed(
    manifest: DatasetManifest,
    entry: ManifestEntry,
    target_width: int | None = None,
    slice_fraction: float = DEFAULT_SLICE_FRACTION,
) -> Volume:
    v = manifest.load(entry)
    return preprocess(
        v,
        target_width=target_width,
        slice_range=entry.slice_range,
        slice_fraction=slice_fraction,
        exclude=entry.exclude_slices,
    )
