"""Annotation documents

The canonical format is one TOML document with a schema version and a list of
records, one per image::

    schema_version = 1

    [[records]]
    image = "images/00000.png"
    head_size = 41.5
    keypoints = [[120.0, 201.5], [118.2, 170.0], ...]
    visibility = [2, 2, ...]

``keypoints`` holds ``[x, y]`` pixel pairs and ``visibility`` the matching
0 (absent), 1 (occluded) or 2 (visible) flags, both in annotation order.
:func:`load_annotations_csv` converts flat rows from other tools into the
same records.
"""

from __future__ import annotations

import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Union

import attrs
import cattrs
import numpy as np
import rtoml

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from gccpm._keypoints import NUM_KEYPOINTS
from gccpm.augment import Sample
from gccpm.codec import KeypointSet
from gccpm.data.images import read_image, write_image

MODULE_LOGGER = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ANNOTATIONS_FILE = "annotations.toml"
IMAGES_DIR = "images"


class AnnotationError(ValueError):
    """A record that breaks the annotation schema

    :param message: What is wrong
    :param record: Zero based record number, or the line number for CSV input
    """

    def __init__(self, message: str, record: Optional[int] = None):
        self.record = record
        prefix = f"record {record}: " if record is not None else ""
        super().__init__(f"{prefix}{message}")


@attrs.define
class AnnotationRecord:
    """One annotated image

    :param image: Image path, relative to the annotation document
    :param keypoints: ``[x, y]`` per keypoint
    :param visibility: 0, 1 or 2 per keypoint
    :param head_size: PCKh reference length in pixels
    """

    image: str
    keypoints: List[List[float]]
    visibility: List[int]
    head_size: float

    def validate(self, num_keypoints: int = NUM_KEYPOINTS) -> list[str]:
        problems = []
        if len(self.keypoints) != num_keypoints:
            problems.append(f"expected {num_keypoints} keypoints, got {len(self.keypoints)}")
        pairs = all(len(p) == 2 for p in self.keypoints)
        if not pairs:
            problems.append("every keypoint must be an [x, y] pair")
        if len(self.visibility) != len(self.keypoints):
            problems.append(
                f"{len(self.visibility)} visibility flags for {len(self.keypoints)} keypoints"
            )
        if any(v not in (0, 1, 2) for v in self.visibility):
            problems.append(f"visibility must be 0, 1 or 2, got {sorted(set(self.visibility))}")
        if not self.head_size > 0:
            problems.append(f"head_size must be > 0, got {self.head_size}")
        if pairs and not np.isfinite(np.asarray(self.keypoints, dtype=np.float64)).all():
            problems.append("keypoint coordinates must be finite")
        return problems

    def to_keypoints(self) -> KeypointSet:
        return KeypointSet(self.keypoints, self.visibility, head_size=self.head_size)

    @classmethod
    def from_sample(cls, image: str, kps: KeypointSet) -> AnnotationRecord:
        if kps.head_size is None:
            raise AnnotationError(f"{image} has no head_size")
        return cls(
            image=image,
            keypoints=[[float(x), float(y)] for x, y in kps.points],
            visibility=[int(v) for v in kps.visibility],
            head_size=float(kps.head_size),
        )


def _structure_records(raw: list, source: str, num_keypoints: int) -> List[AnnotationRecord]:
    converter = cattrs.GenConverter(forbid_extra_keys=True)
    records, errors = [], []
    for index, item in enumerate(raw):
        try:
            record = converter.structure(item, AnnotationRecord)
        except Exception as exc:  # cattrs raises its own exception groups
            errors.append(AnnotationError(f"does not match the schema ({exc})", index))
            continue
        problems = record.validate(num_keypoints)
        if problems:
            errors.extend(AnnotationError(p, index) for p in problems)
        else:
            records.append(record)
    if errors:
        raise BaseExceptionGroup(f"Invalid annotations in {source}", errors)
    return records


def load_annotations(
    path: Union[str, Path], num_keypoints: int = NUM_KEYPOINTS
) -> List[AnnotationRecord]:
    """Read and validate an annotation document

    :raises FileNotFoundError: If ``path`` does not exist
    :raises AnnotationError: If the document is not valid TOML or has the wrong schema version
    :raises BaseExceptionGroup: Of :class:`AnnotationError`, one per problem, naming the record
    """
    path = Path(path)
    try:
        document = rtoml.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"Annotation file {path} does not exist") from None
    except rtoml.TomlParsingError as exc:
        raise AnnotationError(f"{path} is not valid TOML: {exc}") from None
    version = document.get("schema_version")
    if version != SCHEMA_VERSION:
        raise AnnotationError(
            f"{path} has schema_version {version!r}, expected {SCHEMA_VERSION}"
        )
    extra = sorted(set(document) - {"schema_version", "records"})
    if extra:
        raise AnnotationError(f"{path} has unknown top level keys: {', '.join(extra)}")
    records = _structure_records(document.get("records", []), str(path), num_keypoints)
    MODULE_LOGGER.debug("Loaded %d annotation records from %s", len(records), path)
    return records


def save_annotations(records: Sequence[AnnotationRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "schema_version": SCHEMA_VERSION,
        "records": [cattrs.unstructure(r) for r in records],
    }
    with open(path, "w") as fh:
        rtoml.dump(document, fh, pretty=True)
    return path


def load_annotations_csv(
    path: Union[str, Path], num_keypoints: int = NUM_KEYPOINTS
) -> List[AnnotationRecord]:
    """Convert flat rows ``image, head_size, x0, y0, v0, ..., xK, yK, vK``

    A first row starting with ``image`` is taken as a header. Errors name the
    line number.
    """
    path = Path(path)
    width = 2 + 3 * num_keypoints
    records, errors = [], []
    with open(path, newline="") as fh:
        for line_number, row in enumerate(csv.reader(fh), start=1):
            if not row or (line_number == 1 and row[0].strip().lower() == "image"):
                continue
            if len(row) != width:
                errors.append(
                    AnnotationError(f"expected {width} columns, got {len(row)}", line_number)
                )
                continue
            try:
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                errors.append(AnnotationError(str(exc), line_number))
                continue
            triples = np.asarray(values[1:]).reshape(num_keypoints, 3)
            record = AnnotationRecord(
                image=row[0].strip(),
                keypoints=triples[:, :2].tolist(),
                visibility=[int(v) for v in triples[:, 2]],
                head_size=values[0],
            )
            problems = record.validate(num_keypoints)
            if problems:
                errors.extend(AnnotationError(p, line_number) for p in problems)
            else:
                records.append(record)
    if errors:
        raise BaseExceptionGroup(f"Invalid annotations in {path}", errors)
    return records


def write_dataset(out_dir: Union[str, Path], samples: Sequence[Sample]) -> Path:
    """Write ``images/NNNNN.png`` and ``annotations.toml`` under ``out_dir``

    :return: The annotation document path
    """
    out_dir = Path(out_dir)
    records = []
    for index, sample in enumerate(samples):
        relative = f"{IMAGES_DIR}/{index:05d}.png"
        write_image(out_dir / relative, sample.image)
        records.append(AnnotationRecord.from_sample(relative, sample.keypoints))
    path = save_annotations(records, out_dir / ANNOTATIONS_FILE)
    MODULE_LOGGER.info("Wrote %d samples to %s", len(records), out_dir)
    return path


def read_dataset(
    data_dir: Union[str, Path], num_keypoints: int = NUM_KEYPOINTS
) -> List[Sample]:
    """Load ``annotations.toml`` from ``data_dir`` (or the given document) and its images."""
    data_dir = Path(data_dir)
    document = data_dir if data_dir.is_file() else data_dir / ANNOTATIONS_FILE
    records = load_annotations(document, num_keypoints)
    return [
        Sample(read_image(document.parent / r.image), r.to_keypoints()) for r in records
    ]
