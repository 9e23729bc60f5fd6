"""Dataset ingestion, individual-disjoint splitting, augmentation, synthesis.

A manifest is a CSV with header ``sample,individual_id``; the ``sample``
column is either a relative image path (binary PPM/PGM, maxval 255) or
``inline:`` followed by semicolon-separated reals.  Splits never place
one individual in two of train/validation/test; the five-fold plan
rotates test groups so that, at test ratio 1/folds, the fold test sets
partition every individual in the dataset.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .numeric import as_vector
from .rng import RngStream

MANIFEST_HEADER = ["sample", "individual_id"]
PLAN_HEADER = ["fold", "individual_id", "role"]
ROLES = ("train", "val", "test")


class DataError(ValueError):
    """Malformed dataset input or an infeasible data request."""


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class Sample:
    ref: str
    individual_id: str
    features: np.ndarray | None = None  # parsed eagerly for inline refs

    @property
    def is_inline(self) -> bool:
        return self.features is not None


@dataclass
class Manifest:
    samples: list[Sample]
    species_tag: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def individual_ids(self) -> list[str]:
        return sorted({s.individual_id for s in self.samples})

    def by_individual(self) -> dict[str, list[int]]:
        """individual_id -> sample indices, ids in sorted order."""
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(self.samples):
            groups.setdefault(s.individual_id, []).append(i)
        return {k: groups[k] for k in sorted(groups)}

    def image_counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.by_individual().items()}

    def subset(self, individual_ids) -> "Manifest":
        keep = set(individual_ids)
        return Manifest(
            [s for s in self.samples if s.individual_id in keep], self.species_tag
        )


def _parse_inline(ref: str, line_no: int) -> np.ndarray:
    body = ref[len("inline:"):]
    try:
        values = [float(tok) for tok in body.split(";") if tok != ""]
    except ValueError as exc:
        raise DataError(f"line {line_no}: bad inline feature value ({exc})") from None
    if not values:
        raise DataError(f"line {line_no}: inline sample has no values")
    return as_vector(values, name=f"line {line_no} features")


def manifest_from_csv(text: str, species_tag: str = "") -> Manifest:
    """Parse manifest CSV text; errors carry 1-based line numbers."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty manifest: missing header") from None
    if [h.strip() for h in header] != MANIFEST_HEADER:
        raise DataError(
            f"line 1: expected header {','.join(MANIFEST_HEADER)!r}, got {','.join(header)!r}"
        )
    samples: list[Sample] = []
    seen_paths: set[str] = set()
    for line_no, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and row[0].strip() == ""):
            continue
        if len(row) != 2:
            raise DataError(f"line {line_no}: expected 2 columns, got {len(row)}")
        ref, individual_id = row[0].strip(), row[1].strip()
        if not ref:
            raise DataError(f"line {line_no}: empty sample ref")
        if not individual_id:
            raise DataError(f"line {line_no}: empty individual_id")
        if ref.startswith("inline:"):
            samples.append(Sample(ref, individual_id, _parse_inline(ref, line_no)))
        else:
            # Duplicate paths are a data bug; identical inline features are
            # legitimate (e.g. zero-spread synthetic data), so only paths
            # are checked.
            if ref in seen_paths:
                raise DataError(f"line {line_no}: duplicate sample ref {ref!r}")
            seen_paths.add(ref)
            samples.append(Sample(ref, individual_id))
    return Manifest(samples, species_tag)


def manifest_to_csv(manifest: Manifest) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for s in manifest.samples:
        writer.writerow([s.ref, s.individual_id])
    return out.getvalue()


def load_manifest(path, species_tag: str = "") -> Manifest:
    with open(path, "r", encoding="utf-8") as fh:
        return manifest_from_csv(fh.read(), species_tag)


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(manifest_to_csv(manifest))


def sample_features(sample: Sample, image_root=None) -> np.ndarray:
    """Model-ready feature vector for a sample (no augmentation)."""
    if sample.is_inline:
        return sample.features
    path = sample.ref if image_root is None else f"{image_root}/{sample.ref}"
    return raster_to_features(read_pnm(path))


# ---------------------------------------------------------------------------
# Individual-disjoint splitting


@dataclass(frozen=True)
class SplitConfig:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError(f"need three positive ratios, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {self.ratios}")
        if self.folds < 1:
            raise ValueError(f"folds must be >= 1, got {self.folds}")


@dataclass
class SplitPlan:
    """Per-fold mapping individual_id -> train/val/test."""

    folds: int
    assignments: list[dict[str, str]]
    notes: list[str] = field(default_factory=list)

    def role_sets(self, fold: int) -> dict[str, set[str]]:
        roles: dict[str, set[str]] = {r: set() for r in ROLES}
        for ind, role in self.assignments[fold].items():
            roles[role].add(ind)
        return roles

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(PLAN_HEADER)
        for fold, mapping in enumerate(self.assignments):
            for ind in sorted(mapping):
                writer.writerow([fold, ind, mapping[ind]])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SplitPlan":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != PLAN_HEADER:
            raise DataError(f"expected header {','.join(PLAN_HEADER)!r}")
        assignments: list[dict[str, str]] = []
        for row in reader:
            if not row:
                continue
            fold, ind, role = int(row[0]), row[1], row[2]
            if role not in ROLES:
                raise DataError(f"unknown role {role!r}")
            while len(assignments) <= fold:
                assignments.append({})
            assignments[fold][ind] = role
        return cls(len(assignments), assignments)


def _greedy_fill(
    items: list[tuple[str, int]], targets: list[float]
) -> list[list[str]]:
    """Assign (id, count) items to bins, largest first into the emptiest bin.

    'Emptiest' means largest remaining image deficit against the bin's
    target; ties go to the lowest bin index, so equal-count inputs land
    deterministically.
    """
    bins: list[list[str]] = [[] for _ in targets]
    deficits = list(targets)
    for ind, count in sorted(items, key=lambda it: -it[1]):
        best = max(range(len(bins)), key=lambda b: (deficits[b], -b))
        bins[best].append(ind)
        deficits[best] -= count
    return bins


def five_fold_plan(manifest: Manifest, cfg: SplitConfig) -> SplitPlan:
    """Build the rotating fold plan.

    Individuals are first partitioned into ``folds`` groups balanced by
    image count.  When the test ratio equals 1/folds, fold i's test set is
    exactly group i, so the fold test sets partition all individuals.
    Otherwise (e.g. a 0.5 test ratio with 5 folds) fold i starts from
    group i and draws extra test individuals from the remainder, which
    makes fold test sets overlap; the overlap is recorded in the plan
    notes.
    """
    counts = manifest.image_counts()
    n_individuals = len(counts)
    if n_individuals < cfg.folds:
        raise DataError(
            f"need at least {cfg.folds} individuals for {cfg.folds} folds, got {n_individuals}"
        )
    total = sum(counts.values())
    train_r, val_r, test_r = cfg.ratios

    rng = RngStream(cfg.seed).derive(0)
    order = sorted(counts)
    rng.shuffle(order)
    items = [(ind, counts[ind]) for ind in order]

    groups = _greedy_fill(items, [total / cfg.folds] * cfg.folds)
    rotating = abs(test_r - 1.0 / cfg.folds) <= 1e-9

    assignments: list[dict[str, str]] = []
    notes: list[str] = []
    test_seen: set[str] = set()
    overlap = 0
    for fold in range(cfg.folds):
        test_ids = list(groups[fold])
        remainder = [it for it in items if it[0] not in set(test_ids)]
        if not rotating:
            # Top the test set up to its image target; extras drawn
            # largest-first from the remainder.
            deficit = total * test_r - sum(counts[i] for i in test_ids)
            for ind, count in sorted(remainder, key=lambda it: -it[1]):
                if deficit <= 0:
                    break
                test_ids.append(ind)
                deficit -= count
            remainder = [it for it in items if it[0] not in set(test_ids)]
        overlap += len(test_seen.intersection(test_ids))
        test_seen.update(test_ids)

        train_ids, val_ids = _greedy_fill(
            remainder, [total * train_r, total * val_r]
        )
        mapping: dict[str, str] = {}
        for ind in train_ids:
            mapping[ind] = "train"
        for ind in val_ids:
            mapping[ind] = "val"
        for ind in test_ids:
            mapping[ind] = "test"
        assignments.append(mapping)
    if not rotating:
        notes.append(
            f"test ratio {test_r} != 1/{cfg.folds}: fold test sets overlap on "
            f"{overlap} individual assignments"
        )
    return SplitPlan(cfg.folds, assignments, notes)


def split_by_individual(
    manifest: Manifest, cfg: SplitConfig, fold: int
) -> tuple[Manifest, Manifest, Manifest]:
    """Materialize one fold of the plan as train/val/test manifests."""
    if not 0 <= fold < cfg.folds:
        raise ValueError(f"fold must be in [0, {cfg.folds}), got {fold}")
    plan = five_fold_plan(manifest, cfg)
    roles = plan.role_sets(fold)
    return (
        manifest.subset(roles["train"]),
        manifest.subset(roles["val"]),
        manifest.subset(roles["test"]),
    )


# ---------------------------------------------------------------------------
# Rasters (binary PPM/PGM) and augmentation


@dataclass
class Raster:
    """uint8 image, shape (height, width, channels) with channels 1 or 3."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise DataError(f"raster must be (h, w, 1|3), got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def raster_to_features(raster: Raster) -> np.ndarray:
    """Row-major flatten, channels interleaved per pixel, scaled to [0, 1]."""
    return raster.pixels.reshape(-1).astype(np.float64) / 255.0


def _read_pnm_tokens(data: bytes, n: int) -> tuple[list[bytes], int]:
    """First n whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < n:
        if i >= len(data):
            raise DataError("truncated PNM header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i : i + 1].isspace():
                i += 1
            tokens.append(data[start:i])
    return tokens, i + 1  # single whitespace byte separates header from pixels


def read_pnm(source) -> Raster:
    """Read a binary PGM (P5) or PPM (P6) with maxval 255."""
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    tokens, offset = _read_pnm_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported PNM magic {magic!r} (need binary P5/P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise DataError("non-numeric PNM header fields") from None
    if maxval != 255:
        raise DataError(f"only maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    body = data[offset : offset + need]
    if len(body) != need:
        raise DataError(f"PNM pixel data truncated: need {need}, got {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return Raster(pixels.copy())


def write_pnm(raster: Raster, path=None) -> bytes | None:
    magic = b"P5" if raster.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, raster.width, raster.height)
    blob = header + raster.pixels.tobytes()
    if path is None:
        return blob
    with open(path, "wb") as fh:
        fh.write(blob)
    return None


@dataclass(frozen=True)
class AugmentConfig:
    """Per-strategy enable flags, application probabilities, magnitudes."""

    mirror: bool = True
    mirror_prob: float = 0.5
    shift: bool = True
    shift_prob: float = 0.5
    shift_max_pixels: int = 2
    rotate: bool = True
    rotate_prob: float = 0.5
    rotate_max_degrees: float = 15.0
    channel_noise: bool = True
    channel_noise_prob: float = 0.5
    channel_noise_std: float = 10.0
    pixel_noise: bool = True
    pixel_noise_prob: float = 0.5
    pixel_noise_std: float = 5.0
    blur: bool = True
    blur_prob: float = 0.5
    dropout: bool = True
    dropout_prob: float = 0.5
    dropout_rate: float = 0.05
    dropout_fill: int = 0

    def __post_init__(self):
        for name in (
            "mirror_prob",
            "shift_prob",
            "rotate_prob",
            "channel_noise_prob",
            "pixel_noise_prob",
            "blur_prob",
            "dropout_prob",
            "dropout_rate",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in (
            "shift_max_pixels",
            "rotate_max_degrees",
            "channel_noise_std",
            "pixel_noise_std",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _shift(px: np.ndarray, dx: int, dy: int) -> np.ndarray:
    h, w = px.shape[:2]
    padded = np.pad(px, ((abs(dy), abs(dy)), (abs(dx), abs(dx)), (0, 0)), mode="edge")
    y0 = abs(dy) - dy
    x0 = abs(dx) - dx
    return padded[y0 : y0 + h, x0 : x0 + w]


def _rotate_nearest(px: np.ndarray, degrees: float) -> np.ndarray:
    h, w = px.shape[:2]
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    yr = ys - cy
    xr = xs - cx
    # Inverse rotation: where each output pixel samples from.
    src_x = cos_t * xr + sin_t * yr + cx
    src_y = -sin_t * xr + cos_t * yr + cy
    src_x = np.clip(np.rint(src_x).astype(int), 0, w - 1)
    src_y = np.clip(np.rint(src_y).astype(int), 0, h - 1)
    return px[src_y, src_x]


def _box_blur(px: np.ndarray) -> np.ndarray:
    padded = np.pad(px, ((1, 1), (1, 1), (0, 0)), mode="edge").astype(np.float64)
    h, w = px.shape[:2]
    acc = np.zeros_like(px, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy : dy + h, dx : dx + w]
    return np.clip(np.rint(acc / 9.0), 0, 255).astype(np.uint8)


def augment(raster: Raster, cfg: AugmentConfig, rng: RngStream) -> Raster:
    """Apply each enabled strategy independently with its probability.

    Output has the raster's dimensions and stays in [0, 255].  Strategy
    order is fixed (mirror, shift, rotate, channel noise, pixel noise,
    blur, dropout) so a given stream reproduces a given augmentation.
    """
    px = raster.pixels
    h, w, c = px.shape
    if cfg.mirror and rng.uniform() < cfg.mirror_prob:
        px = px[:, ::-1, :]
    if cfg.shift and rng.uniform() < cfg.shift_prob:
        span = 2 * cfg.shift_max_pixels + 1
        dx = rng.randint(span) - cfg.shift_max_pixels
        dy = rng.randint(span) - cfg.shift_max_pixels
        px = _shift(px, dx, dy)
    if cfg.rotate and rng.uniform() < cfg.rotate_prob:
        degrees = rng.uniform(-cfg.rotate_max_degrees, cfg.rotate_max_degrees)
        px = _rotate_nearest(px, degrees)
    if cfg.channel_noise and rng.uniform() < cfg.channel_noise_prob:
        offsets = np.array(rng.normals(c, std=cfg.channel_noise_std))
        px = np.clip(np.rint(px.astype(np.float64) + offsets), 0, 255).astype(np.uint8)
    if cfg.pixel_noise and rng.uniform() < cfg.pixel_noise_prob:
        noise = np.array(rng.normals(h * w * c, std=cfg.pixel_noise_std)).reshape(
            h, w, c
        )
        px = np.clip(np.rint(px.astype(np.float64) + noise), 0, 255).astype(np.uint8)
    if cfg.blur and rng.uniform() < cfg.blur_prob:
        px = _box_blur(px)
    if cfg.dropout and rng.uniform() < cfg.dropout_prob:
        mask = np.array(rng.uniforms(h * w)).reshape(h, w) < cfg.dropout_rate
        px = px.copy()
        px[mask] = cfg.dropout_fill
    return Raster(np.ascontiguousarray(px))


# ---------------------------------------------------------------------------
# Synthetic datasets


def synth_dataset(
    num_individuals: int,
    images_per_individual: int,
    feature_dim: int,
    cluster_spread: float,
    inter_cluster_distance: float,
    rng: RngStream,
    species_tag: str = "synthetic",
    box_side: float | None = None,
    max_attempts: int = 2000,
) -> Manifest:
    """Gaussian identity clusters serialized as an inline-feature manifest.

    Cluster centers are rejection-sampled inside a box until pairwise
    separation reaches ``inter_cluster_distance``; ``box_side`` defaults
    to a size that makes placement feasible, and an explicit (too small)
    value makes the requested separation infeasible, which raises.
    """
    if min(num_individuals, images_per_individual, feature_dim) <= 0:
        raise ValueError("counts and feature_dim must be positive")
    if cluster_spread < 0 or inter_cluster_distance < 0:
        raise ValueError("spread and separation must be nonnegative")
    if box_side is None:
        box_side = inter_cluster_distance * max(
            (3.0 * num_individuals) ** (1.0 / feature_dim), 2.0
        )
        box_side = max(box_side, 1.0)

    center_rng = rng.derive(0)
    centers: list[np.ndarray] = []
    for _ in range(num_individuals):
        for attempt in range(max_attempts):
            cand = np.array(
                [center_rng.uniform(0.0, box_side) for _ in range(feature_dim)]
            )
            if all(
                np.linalg.norm(cand - c) >= inter_cluster_distance for c in centers
            ):
                centers.append(cand)
                break
        else:
            raise DataError(
                f"cannot place {num_individuals} centers {inter_cluster_distance} "
                f"apart in a {box_side:.3g}-sided box of dim {feature_dim}"
            )

    width = len(str(num_individuals - 1))
    samples: list[Sample] = []
    for k, center in enumerate(centers):
        ind_id = f"ind{k:0{width}d}"
        ind_rng = rng.derive(1 + k)
        for _ in range(images_per_individual):
            feats = center + np.array(
                ind_rng.normals(feature_dim, std=cluster_spread)
            )
            ref = "inline:" + ";".join(repr(float(v)) for v in feats)
            samples.append(Sample(ref, ind_id, feats))
    return Manifest(samples, species_tag)
