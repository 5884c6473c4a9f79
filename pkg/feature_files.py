"""
On-disk feature formats: DGMF v1 binary and the interop CSV schema.

DGMF v1 layout (little-endian):
    b"DGMF", u8 version=1, u32 n_instances, u32 dim, u32 n_bags,
    n_bags x (u32 bag_id, u8 bag_label),
    n_instances x (u32 bag_id, u8 instance_label [255 = unknown], dim x f32).

Features are stored as float32 and widened to float64 on read.
"""

import io
import logging
import struct
from pathlib import Path
from typing import Tuple

import numpy as np
import pandas as pd

from errors import DatasetValidationError, FeatureCorruptionError, FeatureFormatError
from mil_dataset import UNKNOWN_LABEL, BagTable, InstanceSet, require_valid, validate_dataset
from reporting import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"DGMF"
VERSION = 1
UNKNOWN_ON_DISK = 255

_HEADER = struct.Struct("<4sBIII")
_BAG_RECORD = np.dtype([("bag_id", "<u4"), ("bag_label", "u1")])


def _instance_dtype(dim: int) -> np.dtype:
    return np.dtype([("bag_id", "<u4"), ("instance_label", "u1"), ("features", "<f4", (dim,))])


def encode_dgmf(instances: InstanceSet, bags: BagTable) -> bytes:
    """Serialize a valid dataset to DGMF v1 bytes."""
    require_valid(instances, bags, "dataset to write")

    bag_ids = bags.bag_ids
    if np.any(bag_ids < 0) or np.any(bag_ids > np.iinfo(np.uint32).max):
        raise DatasetValidationError("bag ids must fit in u32")

    bag_table = np.empty(len(bags), dtype=_BAG_RECORD)
    bag_table["bag_id"] = bag_ids
    bag_table["bag_label"] = bags.labels

    records = np.empty(instances.n, dtype=_instance_dtype(instances.d))
    records["bag_id"] = bag_ids[instances.bag_of]
    labels = instances.instance_label.astype(np.int64)
    records["instance_label"] = np.where(labels == UNKNOWN_LABEL, UNKNOWN_ON_DISK, labels)
    records["features"] = instances.features.astype("<f4")

    header = _HEADER.pack(MAGIC, VERSION, instances.n, instances.d, len(bags))
    return header + bag_table.tobytes() + records.tobytes()


def decode_dgmf(data: bytes) -> Tuple[InstanceSet, BagTable]:
    """Parse DGMF v1 bytes; raises on bad magic, version, or size."""
    if len(data) < 5 or data[:4] != MAGIC:
        raise FeatureFormatError("missing DGMF magic")
    if data[4] != VERSION:
        raise FeatureFormatError(f"unsupported DGMF version {data[4]}")
    if len(data) < _HEADER.size:
        raise FeatureCorruptionError("truncated header", len(data))

    _, _, n, dim, n_bags = _HEADER.unpack_from(data, 0)
    if n < 1 or dim < 1:
        raise FeatureFormatError(f"header declares n={n}, dim={dim}")

    bag_start = _HEADER.size
    inst_start = bag_start + n_bags * _BAG_RECORD.itemsize
    record_dtype = _instance_dtype(dim)
    expected = inst_start + n * record_dtype.itemsize
    if len(data) < expected:
        raise FeatureCorruptionError(f"payload truncated, expected {expected} bytes", len(data))
    if len(data) > expected:
        raise FeatureCorruptionError(f"{len(data) - expected} trailing bytes after payload", expected)

    bag_table = np.frombuffer(data, dtype=_BAG_RECORD, count=n_bags, offset=bag_start)
    records = np.frombuffer(data, dtype=record_dtype, count=n, offset=inst_start)

    bag_ids = bag_table["bag_id"].astype(np.int64)
    index_of = {int(bag_id): b for b, bag_id in enumerate(bag_ids)}
    if len(index_of) != n_bags:
        raise DatasetValidationError("bag table contains duplicate bag ids")
    try:
        bag_of = np.array([index_of[int(b)] for b in records["bag_id"]], dtype=np.int64)
    except KeyError as exc:
        raise DatasetValidationError(f"instance refers to bag_id {exc.args[0]} absent from the bag table")

    raw_labels = records["instance_label"].astype(np.int64)
    labels = np.where(raw_labels == UNKNOWN_ON_DISK, UNKNOWN_LABEL, raw_labels)
    features = records["features"].astype(np.float64)

    instances = InstanceSet(features, bag_of, labels)
    bags = BagTable.from_membership(bag_ids, bag_table["bag_label"].astype(np.int64), bag_of)
    return instances, bags


def write_feature_file(instances: InstanceSet, bags: BagTable, path: PathLike) -> None:
    """Write a DGMF v1 file atomically."""
    payload = encode_dgmf(instances, bags)
    atomic_write_bytes(path, payload)
    logger.debug("wrote %s (%d instances, %d bags, %d bytes)", path, instances.n, len(bags), len(payload))


def write_feature_csv(instances: InstanceSet, bags: BagTable, path: PathLike) -> None:
    """Write the CSV interop schema; unknown instance labels become empty cells."""
    require_valid(instances, bags, "dataset to write")
    frame = pd.DataFrame(instances.features, columns=[f"f{j}" for j in range(instances.d)])
    labels = pd.array(instances.instance_label.astype(np.int64), dtype="Int64")
    labels[instances.instance_label == UNKNOWN_LABEL] = pd.NA
    frame.insert(0, "instance_label", labels)
    frame.insert(0, "bag_label", bags.labels[instances.bag_of])
    frame.insert(0, "bag_id", bags.bag_ids[instances.bag_of])
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False)
    atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))


def _read_csv(path: Path) -> Tuple[InstanceSet, BagTable]:
    try:
        frame = pd.read_csv(path, float_precision="round_trip",
                            dtype={"bag_id": "int64", "bag_label": "int64", "instance_label": "Int64"})
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise FeatureFormatError(f"{path}: malformed CSV ({exc})") from exc

    leading = ["bag_id", "bag_label", "instance_label"]
    feature_cols = [f"f{j}" for j in range(len(frame.columns) - 3)]
    if list(frame.columns) != leading + feature_cols or not feature_cols:
        raise FeatureFormatError(
            f"{path}: header must be bag_id,bag_label,instance_label,f0,...,f{{d-1}}; got {list(frame.columns)}")
    if frame.empty:
        raise FeatureFormatError(f"{path}: no instance rows")

    bag_ids, first_rows, bag_of = np.unique(frame["bag_id"].to_numpy(), return_index=True, return_inverse=True)
    # keep bags in order of first appearance
    appearance = np.argsort(first_rows, kind="stable")
    rank = np.empty_like(appearance)
    rank[appearance] = np.arange(len(appearance))
    bag_of = rank[bag_of.reshape(-1)]
    bag_ids = bag_ids[appearance]

    row_bag_labels = frame["bag_label"].to_numpy()
    bag_labels = row_bag_labels[first_rows[appearance]]
    inconsistent = row_bag_labels != bag_labels[bag_of]
    if np.any(inconsistent):
        row = int(np.argmax(inconsistent))
        raise DatasetValidationError(f"{path}: row {row} disagrees with the bag_label of bag {bag_ids[bag_of[row]]}")

    labels = frame["instance_label"].fillna(UNKNOWN_LABEL).to_numpy(dtype=np.int64)
    features = frame[feature_cols].to_numpy(dtype=np.float64)
    instances = InstanceSet(features, bag_of, labels)
    return instances, BagTable.from_membership(bag_ids, bag_labels, bag_of)


def read_feature_file(path: PathLike) -> Tuple[InstanceSet, BagTable]:
    """Read a DGMF v1 or CSV feature file and validate it."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FeatureFormatError(f"cannot read {path}: {exc.strerror}") from exc

    if not data:
        raise FeatureFormatError(f"{path}: empty file")
    if data[:4] == MAGIC:
        instances, bags = decode_dgmf(data)
    elif data.startswith(b"bag_id,"):
        instances, bags = _read_csv(path)
    else:
        raise FeatureFormatError(f"{path}: neither DGMF magic nor a CSV feature header")

    violations = validate_dataset(instances, bags)
    if violations:
        first = violations[0]
        raise DatasetValidationError(f"{path}: {first.message}", violations)
    return instances, bags
