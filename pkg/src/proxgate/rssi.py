"""RSSI samples, dataset ingestion, the log-distance generator and featurization."""

from __future__ import annotations

import csv
import enum
import hashlib
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    FormatError,
    IncompleteSession,
    InvalidConfig,
    InvalidDistance,
    InvalidSample,
    MissingSetting,
    SchemaError,
)
from .registry import DeviceSignature

log = logging.getLogger(__name__)

RSSI_MIN_DBM = -110.0
RSSI_MAX_DBM = 0.0
DISTANCE_MAX_M = 100.0
MALFORMED_BUDGET = 0.01
DEFAULT_GRID = tuple(0.5 * i for i in range(1, 11))  # 0.5 .. 5.0 m
DEFAULT_THRESHOLD_M = 2.0
CANONICAL_COLUMNS = ("setting", "distance_m", "rssi_a_dbm", "rssi_b_dbm", "timestamp_unix")
SYNTH_EPOCH = 1_650_000_000.0

# Stand-in identities for the two watches of a recorded dataset.
DATASET_DEVICE_A = DeviceSignature(hashlib.sha256(b"proxgate/dataset/device-a").digest())
DATASET_DEVICE_B = DeviceSignature(hashlib.sha256(b"proxgate/dataset/device-b").digest())


class Category(enum.Enum):
    CROSSWISE = "Crosswise"
    DIRECT = "Direct"
    MIXED = "Mixed"


class WearSetting(enum.Enum):
    LL = "LL"
    RR = "RR"
    RL = "RL"
    LR = "LR"

    @property
    def category(self) -> Category:
        # same hand on both wearers -> crosswise view
        return Category.CROSSWISE if self in (WearSetting.LL, WearSetting.RR) else Category.DIRECT


class Provenance(enum.Enum):
    FILE = "File"
    SYNTHETIC = "Synthetic"


@dataclass(frozen=True)
class RssiSample:
    measurer: DeviceSignature
    target: DeviceSignature
    rssi_dbm: float
    timestamp: float
    distance_m: float | None = None
    setting: WearSetting | None = None
    source_row: int | None = None

    def __post_init__(self):
        # plain floats only, so numpy scalars never leak into JSON or sqlite
        try:
            object.__setattr__(self, "rssi_dbm", float(self.rssi_dbm))
            object.__setattr__(self, "timestamp", float(self.timestamp))
            if self.distance_m is not None:
                object.__setattr__(self, "distance_m", float(self.distance_m))
        except (TypeError, ValueError) as exc:
            raise InvalidSample(f"non-numeric sample field: {exc}") from exc
        if not (math.isfinite(self.rssi_dbm) and RSSI_MIN_DBM <= self.rssi_dbm <= RSSI_MAX_DBM):
            raise InvalidSample(f"rssi {self.rssi_dbm} outside [{RSSI_MIN_DBM}, {RSSI_MAX_DBM}]")
        if self.distance_m is not None and not (0 < self.distance_m <= DISTANCE_MAX_M):
            raise InvalidSample(f"distance {self.distance_m} outside (0, {DISTANCE_MAX_M}]")
        if not math.isfinite(self.timestamp):
            raise InvalidSample("timestamp must be finite")
        if self.measurer == self.target:
            raise InvalidSample("measurer and target must differ")

    def to_dict(self) -> dict:
        return {
            "measurer": self.measurer.hex,
            "target": self.target.hex,
            "rssi_dbm": self.rssi_dbm,
            "timestamp": self.timestamp,
            "distance_m": self.distance_m,
            "setting": self.setting.value if self.setting else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RssiSample":
        try:
            setting = data.get("setting")
            distance = data.get("distance_m")
            return cls(
                measurer=DeviceSignature.from_hex(data["measurer"]),
                target=DeviceSignature.from_hex(data["target"]),
                rssi_dbm=float(data["rssi_dbm"]),
                timestamp=float(data["timestamp"]),
                distance_m=None if distance is None else float(distance),
                setting=WearSetting(setting) if setting else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSample(f"bad sample payload: {exc}") from exc


@dataclass(frozen=True)
class PathLossParams:
    rssi_at_1m_dbm: float = -59.0
    path_loss_exponent_n: float = 2.0
    shadowing_sigma_db: float = 3.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.path_loss_exponent_n > 0:
            raise InvalidConfig("path loss exponent must be positive")
        if not self.shadowing_sigma_db >= 0:
            raise InvalidConfig("shadowing sigma must be non-negative")


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    proximity_threshold_m: float
    category: Category = Category.MIXED
    provenance: Provenance = Provenance.SYNTHETIC
    distances: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        self.labels = np.asarray(self.labels, dtype=bool)
        n = self.features.shape[0]
        if n < 1:
            raise InvalidConfig("dataset must contain at least one row")
        if self.labels.shape != (n,):
            raise InvalidConfig("labels length must equal number of feature rows")
        if not np.all(np.isfinite(self.features)):
            raise InvalidConfig("feature rows must be finite")
        if self.distances is not None:
            self.distances = np.asarray(self.distances, dtype=float)
            if self.distances.shape != (n,):
                raise InvalidConfig("distances length must equal number of rows")
            if not np.array_equal(self.labels, self.distances <= self.proximity_threshold_m):
                raise InvalidConfig("labels disagree with the distance threshold")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            proximity_threshold_m=self.proximity_threshold_m,
            category=self.category,
            provenance=self.provenance,
            distances=None if self.distances is None else self.distances[idx],
        )

    def relabel(self, threshold_m: float) -> "LabeledDataset":
        if self.distances is None:
            raise InvalidConfig("relabeling needs ground-truth distances")
        return LabeledDataset(
            features=self.features,
            labels=self.distances <= threshold_m,
            proximity_threshold_m=threshold_m,
            category=self.category,
            provenance=self.provenance,
            distances=self.distances,
        )


# ---------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class ColumnMapping:
    """Maps canonical fields to the header names of a foreign CSV.

    ``rssi_b`` and ``timestamp`` may be None. ``setting_values`` translates
    foreign setting labels (e.g. ``"right-left"``) to LL/RR/RL/LR.
    """

    setting: str = "setting"
    distance: str = "distance_m"
    rssi_a: str = "rssi_a_dbm"
    rssi_b: str | None = "rssi_b_dbm"
    timestamp: str | None = "timestamp_unix"
    setting_values: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "ColumnMapping":
        known = {"setting", "distance", "rssi_a", "rssi_b", "timestamp", "setting_values"}
        unknown = set(data) - known
        if unknown:
            raise SchemaError(f"unknown mapping keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class IngestResult:
    samples: list[RssiSample]
    rows: int
    rejected: list[tuple[int, str]]

    def row_counts_by_setting(self) -> dict[str, int]:
        seen: dict[str, set[int]] = defaultdict(set)
        for s in self.samples:
            seen[s.setting.value if s.setting else ""].add(s.source_row)
        return {k: len(v) for k, v in sorted(seen.items())}


def _parse_setting(raw: str, mapping: ColumnMapping) -> WearSetting | None:
    raw = raw.strip()
    if not raw:
        return None
    raw = mapping.setting_values.get(raw, raw)
    try:
        return WearSetting(raw.upper())
    except ValueError:
        raise ValueError(f"unknown setting {raw!r}") from None


def read_dataset(path: str | Path, mapping: ColumnMapping | None = None) -> IngestResult:
    mapping = mapping or ColumnMapping()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise FormatError(f"{path}: empty file or missing header row")
        required = [mapping.setting, mapping.distance, mapping.rssi_a]
        if mapping.rssi_b:
            required.append(mapping.rssi_b)
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        has_ts = mapping.timestamp is not None and mapping.timestamp in header

        samples: list[RssiSample] = []
        rejected: list[tuple[int, str]] = []
        rows = 0
        for rows, rec in enumerate(reader, start=1):
            line = rows + 1  # header is line 1
            try:
                setting = _parse_setting(rec[mapping.setting] or "", mapping)
                distance = float(rec[mapping.distance])
                ts = float(rec[mapping.timestamp]) if has_ts and rec[mapping.timestamp] else 0.0
                rssi_a = float(rec[mapping.rssi_a])
                pair = [
                    RssiSample(DATASET_DEVICE_A, DATASET_DEVICE_B, rssi_a, ts, distance, setting, rows)
                ]
                if mapping.rssi_b:
                    rssi_b = float(rec[mapping.rssi_b])
                    pair.append(
                        RssiSample(DATASET_DEVICE_B, DATASET_DEVICE_A, rssi_b, ts, distance, setting, rows)
                    )
            except (TypeError, ValueError, InvalidSample) as exc:
                rejected.append((line, str(exc)))
                continue
            samples.extend(pair)

    if rows == 0:
        raise FormatError(f"{path}: no data rows")
    if len(rejected) > MALFORMED_BUDGET * rows:
        head = ", ".join(f"line {ln}: {why}" for ln, why in rejected[:5])
        raise FormatError(f"{path}: {len(rejected)}/{rows} malformed rows ({head})")
    for ln, why in rejected:
        log.warning("%s line %d rejected: %s", path, ln, why)
    return IngestResult(samples=samples, rows=rows, rejected=rejected)


def load_dataset(path: str | Path, schema: ColumnMapping | None = None) -> list[RssiSample]:
    return read_dataset(path, schema).samples


def combine_settings(samples: Iterable[RssiSample]) -> tuple[list[RssiSample], list[RssiSample]]:
    crosswise: list[RssiSample] = []
    direct: list[RssiSample] = []
    for s in samples:
        if s.setting is None:
            raise MissingSetting(f"sample from row {s.source_row} has no wear setting")
        (crosswise if s.setting.category is Category.CROSSWISE else direct).append(s)
    return crosswise, direct


def dataset_from_samples(
    samples: Sequence[RssiSample],
    threshold_m: float = DEFAULT_THRESHOLD_M,
    category: Category = Category.MIXED,
) -> LabeledDataset:
    """One feature row per source row: [A measures B, B measures A]."""
    by_row: dict[int, list[RssiSample]] = defaultdict(list)
    for s in samples:
        if s.source_row is None or s.distance_m is None:
            raise InvalidConfig("samples need source rows and distances to build a dataset")
        by_row[s.source_row].append(s)
    if not by_row:
        raise InvalidConfig("no samples")
    rows, dists = [], []
    width = None
    for key in sorted(by_row):
        group = sorted(by_row[key], key=lambda s: s.measurer != DATASET_DEVICE_A)
        if width is None:
            width = len(group)
        elif len(group) != width:
            raise InvalidConfig(f"row {key} has {len(group)} readings, expected {width}")
        rows.append([s.rssi_dbm for s in group])
        dists.append(group[0].distance_m)
    dists_arr = np.asarray(dists)
    return LabeledDataset(
        features=np.asarray(rows),
        labels=dists_arr <= threshold_m,
        proximity_threshold_m=threshold_m,
        category=category,
        provenance=Provenance.FILE,
        distances=dists_arr,
    )


# ---------------------------------------------------------------------------
# synthetic generator


def mean_rssi(distance_m, params: PathLossParams):
    return params.rssi_at_1m_dbm - 10.0 * params.path_loss_exponent_n * np.log10(distance_m)


def synth_rssi(distance_m: float, params: PathLossParams, rng: np.random.Generator) -> float:
    if not distance_m > 0:
        raise InvalidDistance(f"distance must be positive, got {distance_m}")
    value = float(mean_rssi(distance_m, params))
    if params.shadowing_sigma_db > 0:
        value += rng.normal(0.0, params.shadowing_sigma_db)
    return min(max(value, RSSI_MIN_DBM), RSSI_MAX_DBM)


def synth_dataset(
    n: int,
    distances: Sequence[float] = DEFAULT_GRID,
    threshold_m: float = DEFAULT_THRESHOLD_M,
    params: PathLossParams | None = None,
    category: Category = Category.MIXED,
) -> LabeledDataset:
    params = params or PathLossParams()
    if n < 1:
        raise InvalidConfig("n must be >= 1")
    grid = np.asarray(sorted(set(float(d) for d in distances)))
    if grid.size == 0:
        raise InvalidConfig("distance grid is empty")
    if np.any(grid <= 0):
        raise InvalidDistance("grid distances must be positive")
    rng = np.random.default_rng(params.rng_seed)
    dist = grid[rng.integers(0, grid.size, size=n)]
    feats = np.repeat(mean_rssi(dist, params)[:, None], 2, axis=1)
    if params.shadowing_sigma_db > 0:
        feats = feats + rng.normal(0.0, params.shadowing_sigma_db, size=(n, 2))
    feats = np.clip(feats, RSSI_MIN_DBM, RSSI_MAX_DBM)
    return LabeledDataset(
        features=feats,
        labels=dist <= threshold_m,
        proximity_threshold_m=threshold_m,
        category=category,
        provenance=Provenance.SYNTHETIC,
        distances=dist,
    )


def write_csv(path: str | Path, data: LabeledDataset, settings: Sequence[WearSetting | None] | None = None):
    """Export in the canonical column layout (D must be 1 or 2)."""
    if data.distances is None:
        raise InvalidConfig("export needs ground-truth distances")
    if data.dim not in (1, 2):
        raise InvalidConfig("export supports one or two RSSI columns")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANONICAL_COLUMNS)
        for i in range(len(data)):
            setting = settings[i] if settings is not None else None
            row = data.features[i]
            w.writerow(
                [
                    setting.value if setting else "",
                    repr(float(data.distances[i])),
                    repr(float(row[0])),
                    repr(float(row[1])) if data.dim == 2 else "",
                    repr(SYNTH_EPOCH + i),
                ]
            )


# ---------------------------------------------------------------------------
# session featurization


def featurize(session_samples: Sequence[RssiSample], first: DeviceSignature | None = None) -> np.ndarray:
    """[median RSSI first-measures-second, median RSSI second-measures-first]."""
    if not session_samples:
        raise IncompleteSession("no readings")
    first = first or session_samples[0].measurer
    devices = {s.measurer for s in session_samples} | {s.target for s in session_samples}
    if first not in devices:
        raise InvalidSample("reference device is not part of the session")
    if len(devices) > 2:
        raise InvalidSample("readings involve more than two devices")
    forward = [s.rssi_dbm for s in session_samples if s.measurer == first]
    backward = [s.rssi_dbm for s in session_samples if s.target == first]
    if not forward or not backward:
        raise IncompleteSession("readings missing in one direction")
    return np.array([np.median(forward), np.median(backward)], dtype=float)
