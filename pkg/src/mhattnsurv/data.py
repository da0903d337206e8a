"""Datasets on disk and in memory.

A dataset is a JSON manifest plus one binary bag file per patient (the
``.mhbg`` format below: a small header and float32 patch embeddings) and a
labels CSV with follow-up time and event status. Everything is
little-endian and byte-deterministic so reruns diff clean.

This module also holds the tissue filter used when cutting slides into
patches (count purple-ish pixels, drop patches with too few) together with
hand-rolled P6/P5 raster I/O, and the planted-signal synthetic generator
used for end-to-end benchmarks where the true risk ordering is known.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .model import EmbeddingBag
from .numerics import RngStream

BAG_MAGIC = b"MHBG"
BAG_VERSION = 1
_BAG_HEADER = struct.Struct("<III")  # version, n, d
MANIFEST_FORMAT = "mhattnsurv-dataset"


@dataclass
class PatientRecord:
    """Survival label for one patient: follow-up time and event indicator
    (1 = death observed, 0 = censored), plus the bag file it pairs with."""

    patient_id: str
    time: float
    event: int
    bag: str | None = None  # path relative to the manifest, if on disk
    n_patches: int | None = None

    def __post_init__(self):
        if not self.patient_id:
            raise DomainError("patient id must be non-empty")
        self.time = float(self.time)
        self.event = int(self.event)
        if not np.isfinite(self.time) or self.time <= 0.0:
            raise DomainError(
                f"patient {self.patient_id!r}: follow-up time must be positive, got {self.time}"
            )
        if self.event not in (0, 1):
            raise DomainError(
                f"patient {self.patient_id!r}: event must be 0 or 1, got {self.event}"
            )


def times_events(records) -> tuple[np.ndarray, np.ndarray]:
    """Label columns as arrays, in record order."""
    t = np.array([r.time for r in records], dtype=np.float64)
    e = np.array([r.event for r in records], dtype=np.int64)
    return t, e


# ---------------------------------------------------------------------------
# Bag files
# ---------------------------------------------------------------------------


def write_bag(path, X: np.ndarray) -> None:
    """Write an (n, d) embedding matrix as magic, version/n/d header, then
    float32 rows."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise DomainError(f"bag must be a non-empty 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DomainError("bag contains non-finite entries")
    n, d = X.shape
    with open(path, "wb") as fh:
        fh.write(BAG_MAGIC)
        fh.write(_BAG_HEADER.pack(BAG_VERSION, n, d))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


class BagReader:
    """Random access into a bag file without loading the whole matrix.

    Rows live at fixed offsets after the 16-byte header, so single-patch
    reads are one seek each.
    """

    HEADER_SIZE = 4 + _BAG_HEADER.size

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(path, "rb")
        head = self._fh.read(self.HEADER_SIZE)
        if len(head) < 4 or head[:4] != BAG_MAGIC:
            self.close()
            raise FormatError(f"bad bag magic in {self.path.name}", offset=0)
        if len(head) < self.HEADER_SIZE:
            got = len(head)
            self.close()
            raise FormatError(f"truncated bag header in {self.path.name}", offset=got)
        version, self.n, self.d = _BAG_HEADER.unpack(head[4:])
        if version != BAG_VERSION:
            self.close()
            raise FormatError(f"unsupported bag version {version}", offset=4)
        if self.n < 1 or self.d < 1:
            self.close()
            raise FormatError(f"bag declares empty matrix {self.n}x{self.d}", offset=8)
        expected = self.HEADER_SIZE + 4 * self.n * self.d
        actual = self.path.stat().st_size
        if actual < expected:
            self.close()
            raise FormatError(
                f"truncated bag data in {self.path.name}: {actual} bytes, need {expected}",
                offset=actual,
            )
        if actual > expected:
            self.close()
            raise FormatError(
                f"trailing bytes after bag data in {self.path.name}", offset=expected
            )

    def row(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n:
            raise DomainError(f"row {i} out of range 0..{self.n - 1}")
        self._fh.seek(self.HEADER_SIZE + 4 * self.d * i)
        raw = self._fh.read(4 * self.d)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def rows(self, indices) -> np.ndarray:
        return np.stack([self.row(int(i)) for i in indices])

    def read_all(self) -> np.ndarray:
        self._fh.seek(self.HEADER_SIZE)
        raw = self._fh.read(4 * self.n * self.d)
        return np.frombuffer(raw, dtype="<f4").reshape(self.n, self.d).copy()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_bag(path, patient_id: str | None = None) -> EmbeddingBag:
    with BagReader(path) as reader:
        X = reader.read_all()
    return EmbeddingBag(patient_id or Path(path).stem, X)


# ---------------------------------------------------------------------------
# Manifest + labels
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Patient records plus their bags, keyed by patient id."""

    records: list[PatientRecord]
    bags: "BagSource"
    d: int

    def __len__(self):
        return len(self.records)


class BagSource:
    """Mapping from patient id to EmbeddingBag."""

    def get(self, patient_id: str) -> EmbeddingBag:
        raise NotImplementedError


class InMemoryBagSource(BagSource):
    def __init__(self, bags: dict[str, EmbeddingBag]):
        self._bags = bags

    def get(self, patient_id: str) -> EmbeddingBag:
        return self._bags[patient_id]


class ManifestBagSource(BagSource):
    """Loads bags from disk on first use and keeps them cached; datasets at
    this scale fit comfortably in memory."""

    def __init__(self, root: Path, records):
        self._paths = {r.patient_id: Path(root) / r.bag for r in records}
        self._cache: dict[str, EmbeddingBag] = {}

    def get(self, patient_id: str) -> EmbeddingBag:
        if patient_id not in self._cache:
            self._cache[patient_id] = load_bag(self._paths[patient_id], patient_id)
        return self._cache[patient_id]

    def path(self, patient_id: str) -> Path:
        return self._paths[patient_id]


def _require(cond: bool, message: str):
    if not cond:
        raise FormatError(message)


def load_manifest(path) -> Dataset:
    """Parse and validate a dataset manifest; labels are embedded per patient.

    ``path`` may be the manifest file itself or a dataset directory holding
    a ``manifest.json``.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}")
    _require(isinstance(doc, dict), "manifest must be a JSON object")
    _require(doc.get("format") == MANIFEST_FORMAT, f"manifest format must be {MANIFEST_FORMAT!r}")
    _require(doc.get("version") == 1, "unsupported manifest version")
    d = doc.get("d")
    _require(isinstance(d, int) and d >= 1, "manifest d must be a positive integer")
    patients = doc.get("patients")
    _require(isinstance(patients, list) and len(patients) >= 1, "manifest needs a non-empty patients list")
    records = []
    seen = set()
    for entry in patients:
        _require(isinstance(entry, dict), "each patient entry must be an object")
        missing = {"id", "time", "event", "bag"} - set(entry)
        _require(not missing, f"patient entry missing keys: {sorted(missing)}")
        rec = PatientRecord(
            patient_id=str(entry["id"]),
            time=entry["time"],
            event=entry["event"],
            bag=str(entry["bag"]),
            n_patches=entry.get("n_patches"),
        )
        _require(rec.patient_id not in seen, f"duplicate patient id {rec.patient_id!r}")
        seen.add(rec.patient_id)
        records.append(rec)
    return Dataset(records=records, bags=ManifestBagSource(path.parent, records), d=d)


def validate_dataset(dataset: Dataset, root: Path | None = None) -> None:
    """Open every bag header and cross-check it against the manifest."""
    src = dataset.bags
    for rec in dataset.records:
        if isinstance(src, ManifestBagSource):
            bag_path = src.path(rec.patient_id)
            if not bag_path.exists():
                raise FormatError(f"missing bag file {bag_path}")
            with BagReader(bag_path) as reader:
                n, d = reader.n, reader.d
        else:
            bag = src.get(rec.patient_id)
            n, d = bag.n, bag.d
        if d != dataset.d:
            raise FormatError(
                f"bag for {rec.patient_id!r} has d={d}, manifest says {dataset.d}"
            )
        if rec.n_patches is not None and n != rec.n_patches:
            raise FormatError(
                f"bag for {rec.patient_id!r} has {n} patches, manifest says {rec.n_patches}"
            )


def write_manifest(path, d: int, records) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "d": int(d),
        "patients": [
            {
                "id": r.patient_id,
                "time": r.time,
                "event": r.event,
                "bag": r.bag,
                "n_patches": r.n_patches,
            }
            for r in records
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def fmt_float(x) -> str:
    """Shortest decimal string that round-trips the float64 value."""
    return repr(float(x))


def write_labels_csv(path, records) -> None:
    lines = ["id,time,event"]
    lines += [f"{r.patient_id},{fmt_float(r.time)},{r.event}" for r in records]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_labels_csv(path) -> list[PatientRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "id,time,event":
        raise FormatError(f"{path}: labels CSV must start with header 'id,time,event'")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            rec = PatientRecord(parts[0], float(parts[1]), int(parts[2]))
        except (ValueError, DomainError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}")
        records.append(rec)
    if not records:
        raise FormatError(f"{path}: no patient rows")
    return records


# ---------------------------------------------------------------------------
# Rasters: P6 input, P5 output, purple-pixel tissue filter
# ---------------------------------------------------------------------------


def read_ppm(path) -> np.ndarray:
    """Parse a binary P6 image into an (H, W, 3) uint8 array.

    Header tokens may be separated by whitespace and '#' comments; only
    maxval 255 is supported.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P6":
        raise FormatError("not a P6 raster", offset=0)
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("unexpected end of header", offset=start)
        tok = buf[start:pos]
        if not tok.isdigit():
            raise FormatError(f"bad header token {tok!r}", offset=start)
        tokens.append(int(tok))
    if pos >= len(buf):
        raise FormatError("missing pixel data", offset=pos)
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise FormatError(f"bad raster size {width}x{height}", offset=2)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", offset=2)
    need = width * height * 3
    if len(buf) - pos < need:
        raise FormatError(
            f"truncated pixel data: {len(buf) - pos} bytes, need {need}", offset=len(buf)
        )
    img = np.frombuffer(buf[pos : pos + need], dtype=np.uint8)
    return img.reshape(height, width, 3).copy()


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (H, W) uint8 array as a binary P5 raster."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise DomainError(f"grayscale image must be 2-D uint8, got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


PURPLE_MARGIN = 16
MIN_PURPLE_PIXELS = 100


def purple_pixel_count(img: np.ndarray, margin: int = PURPLE_MARGIN) -> int:
    """Count pixels where both red and blue exceed green by ``margin``.

    Comparison happens in signed integers so a green value near 255 cannot
    wrap around.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DomainError(f"expected (H, W, 3) pixels, got shape {img.shape}")
    rgb = img.astype(np.int32)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    return int(np.count_nonzero((r >= g + margin) & (b >= g + margin)))


def is_tissue_patch(img: np.ndarray, min_purple: int = MIN_PURPLE_PIXELS) -> bool:
    """Keep a patch only if it has at least ``min_purple`` purple pixels;
    patches with fewer are treated as background and dropped."""
    return purple_pixel_count(img) >= min_purple


PATCH_SIZE = 224


def filter_background_patch(
    pixels: np.ndarray,
    margin: int = PURPLE_MARGIN,
    min_purple: int = MIN_PURPLE_PIXELS,
) -> tuple[bool, int]:
    """Tissue filter for one standard patch raster.

    Returns (keep, purple_count). Patches must be 224x224 RGB; the purple
    rule (both red and blue at least ``margin`` above green) approximates
    hematoxylin/eosin staining and the pixel-count threshold separates
    tissue from slide background.
    """
    pixels = np.asarray(pixels)
    if pixels.shape != (PATCH_SIZE, PATCH_SIZE, 3):
        raise DomainError(
            f"patch raster must be {PATCH_SIZE}x{PATCH_SIZE}x3, got shape {pixels.shape}"
        )
    count = purple_pixel_count(pixels, margin=margin)
    return count >= min_purple, count


# ---------------------------------------------------------------------------
# Synthetic planted-signal datasets
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Mixture-of-Gaussians bags with an exponential survival model.

    Each patient has a signal prevalence pi drawn uniformly from
    [prevalence_low, prevalence_high]; every patch comes from the signal
    component with probability pi, otherwise from a uniformly chosen
    background component. The latent risk is z = pi: event times are
    exponential with rate baseline_rate * exp(hazard_scale * z), censoring
    times exponential with rate censor_rate (0 disables censoring).

    Component means repeat one pattern over every dimension triple
    (3r, 3r+1, 3r+2): the signal sits on the diagonal of the first two
    coordinates, background means straddle that diagonal in a four-pattern
    cycle (diagonal offset x marker sign on the third coordinate) whose
    mixture average nearly matches the signal mean. Mean pooling therefore
    keeps only a faint linear trace of the prevalence while per-patch
    separation stays easy, and the replication keeps the signal readable
    under aggressive feature dropout.
    """

    n_patients: int = 400
    d: int = 32
    patches_min: int = 64
    patches_max: int = 64
    n_background: int = 4
    prevalence_low: float = 0.0
    prevalence_high: float = 0.3
    hazard_scale: float = 3.0
    baseline_rate: float = 0.2
    censor_rate: float = 0.15
    mean_scale: float = 3.0
    noise_sigma: float = 0.5

    def __post_init__(self):
        if self.n_patients < 2:
            raise ConfigError(f"need at least 2 patients, got {self.n_patients}")
        if self.d < 3:
            raise ConfigError(f"need d >= 3, got {self.d}")
        if not 1 <= self.patches_min <= self.patches_max:
            raise ConfigError(
                f"bad patch count range [{self.patches_min}, {self.patches_max}]"
            )
        if self.n_background < 1:
            raise ConfigError("need at least one background component")
        if not 0.0 <= self.prevalence_low <= self.prevalence_high <= 1.0:
            raise ConfigError(
                f"bad prevalence range [{self.prevalence_low}, {self.prevalence_high}]"
            )
        if self.baseline_rate <= 0.0:
            raise ConfigError(f"baseline_rate must be positive, got {self.baseline_rate}")
        if self.censor_rate < 0.0:
            raise ConfigError(f"censor_rate must be >= 0, got {self.censor_rate}")
        if self.mean_scale == 0.0 or self.noise_sigma == 0.0:
            warnings.warn(
                "degenerate synthetic config: components are indistinguishable "
                "or noiseless", stacklevel=2,
            )


# Background geometry relative to mean_scale: diagonal offsets +-_DIAG_SPREAD
# around 1 - _DIAG_SHIFT, marker coordinate +-_MARKER on dim 2.  The shared
# _DIAG_SHIFT keeps a weak linear pooled readout alive; the +-_DIAG_SPREAD
# straddle dominates it with composition noise along the same direction.
_DIAG_SPREAD = 0.25
_DIAG_SHIFT = 0.05
_MARKER = 1.0


def component_means(config: SyntheticConfig) -> np.ndarray:
    """(n_background + 1, d) mean matrix; row 0 is the signal component."""
    s = config.mean_scale
    means = np.zeros((config.n_background + 1, config.d))
    for r in range(config.d // 3):
        a, b, m = 3 * r, 3 * r + 1, 3 * r + 2
        means[0, a] = means[0, b] = s
        for comp in range(1, config.n_background + 1):
            idx = comp - 1
            qsign = 1.0 if idx % 2 == 0 else -1.0
            wsign = 1.0 if (idx // 2) % 2 == 0 else -1.0
            means[comp, a] = means[comp, b] = s * (1.0 + qsign * _DIAG_SPREAD - _DIAG_SHIFT)
            means[comp, m] = s * wsign * _MARKER
    return means


@dataclass
class SyntheticDataset:
    records: list[PatientRecord]
    bags: InMemoryBagSource
    z: np.ndarray  # latent risk per patient, record order
    config: SyntheticConfig
    d: int = field(init=False)

    def __post_init__(self):
        self.d = self.config.d

    def oracle_cindex(self) -> float:
        """Concordance achieved by ranking patients on the true latent risk;
        no model can beat this in expectation."""
        from .evaluate import c_index

        t, e = times_events(self.records)
        return c_index(self.z, t, e)

    def as_dataset(self) -> Dataset:
        return Dataset(records=self.records, bags=self.bags, d=self.config.d)


def generate_synthetic(config: SyntheticConfig, stream: RngStream) -> SyntheticDataset:
    """Draw a full synthetic dataset from one deterministic stream.

    All randomness comes from ``stream`` in a fixed per-patient order, so a
    given (config, seed, label) triple always yields identical bags and
    labels, bit for bit.
    """
    rng = stream.generator()
    means = component_means(config)
    records: list[PatientRecord] = []
    bags: dict[str, EmbeddingBag] = {}
    z = np.empty(config.n_patients)
    for i in range(config.n_patients):
        pid = f"synth{i:04d}"
        pi = rng.uniform(config.prevalence_low, config.prevalence_high)
        n_i = int(rng.integers(config.patches_min, config.patches_max + 1))
        is_signal = rng.random(n_i) < pi
        background = rng.integers(1, config.n_background + 1, size=n_i)
        comp = np.where(is_signal, 0, background)
        noise = rng.standard_normal((n_i, config.d)) * config.noise_sigma
        X = (means[comp] + noise).astype(np.float32)
        event_time = rng.exponential(
            1.0 / (config.baseline_rate * np.exp(config.hazard_scale * pi))
        )
        if config.censor_rate > 0.0:
            censor_time = rng.exponential(1.0 / config.censor_rate)
        else:
            censor_time = np.inf
        time = min(event_time, censor_time)
        event = 1 if event_time <= censor_time else 0
        records.append(PatientRecord(pid, time, event, bag=None, n_patches=n_i))
        bags[pid] = EmbeddingBag(pid, X)
        z[i] = pi
    return SyntheticDataset(
        records=records, bags=InMemoryBagSource(bags), z=z, config=config
    )


def write_synthetic_dataset(ds: SyntheticDataset, out_dir) -> None:
    """Materialize a synthetic dataset as manifest + bags + labels + truth."""
    out_dir = Path(out_dir)
    bag_dir = out_dir / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)
    disk_records = []
    from dataclasses import replace

    for rec in ds.records:
        rel = f"bags/{rec.patient_id}.mhbg"
        write_bag(out_dir / rel, ds.bags.get(rec.patient_id).X)
        disk_records.append(replace(rec, bag=rel))
    write_manifest(out_dir / "manifest.json", ds.config.d, disk_records)
    write_labels_csv(out_dir / "labels.csv", disk_records)
    truth = {
        "oracle_cindex": ds.oracle_cindex(),
        "z": {r.patient_id: float(zi) for r, zi in zip(ds.records, ds.z)},
    }
    with open(out_dir / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
