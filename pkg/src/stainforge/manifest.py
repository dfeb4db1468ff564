"""BreakHis-style dataset ingestion and stratified splitting.

Expected layout (as distributed):

    <root>/.../{benign,malignant}/SOB/<subtype>/<patient>/<mag>X/<image>

Labels and magnifications are parsed from the path, never guessed;
files that do not fit the layout are collected in the scan report's
skipped list rather than silently dropped.

Shuffling uses a SplitMix64-driven Fisher-Yates permutation so splits
are reproducible bit-for-bit across platforms and Python versions.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

from .errors import EmptyDatasetError, SingleClassError

LABELS = ("benign", "malignant")
MAGNIFICATIONS = (40, 100, 200, 400)

TEST_FRACTION = 0.30
VALIDATION_FRACTION = 0.10
IMAGE_EXTENSIONS = {".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: str
    magnification: int
    patient_id: str
    subtype: str


@dataclass
class ScanResult:
    records: list[SampleRecord] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


@dataclass
class SplitManifest:
    train: list[SampleRecord]
    validation: list[SampleRecord]
    test: list[SampleRecord]
    seed: int

    def write_csv(self, path) -> None:
        """Write the manifest as CSV with a split column (UTF-8, LF)."""
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["path", "label", "magnification", "patient_id",
                             "subtype", "split"])
            for split_name, records in (("train", self.train),
                                        ("validation", self.validation),
                                        ("test", self.test)):
                for r in records:
                    writer.writerow([r.path, r.label, r.magnification,
                                     r.patient_id, r.subtype, split_name])


def _parse_magnification(dirname: str) -> int | None:
    name = dirname.strip().upper()
    if name.endswith("X"):
        name = name[:-1]
    try:
        mag = int(name)
    except ValueError:
        return None
    return mag if mag in MAGNIFICATIONS else None


def _parse_record(path: str) -> SampleRecord | None:
    parts = os.path.normpath(path).split(os.sep)
    if len(parts) < 4:
        return None
    mag = _parse_magnification(parts[-2])
    if mag is None:
        return None
    patient = parts[-3]
    subtype = parts[-4]
    label = next((p for p in reversed(parts[:-2]) if p.lower() in LABELS), None)
    if label is None:
        return None
    return SampleRecord(path=path, label=label.lower(), magnification=mag,
                        patient_id=patient, subtype=subtype)


def scan(root, magnification: int | None = None) -> ScanResult:
    """Walk a dataset tree and build labeled records.

    magnification, when given, keeps only that factor. Raises
    EmptyDatasetError when nothing matches.
    """
    result = ScanResult()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if os.path.splitext(name)[1].lower() not in IMAGE_EXTENSIONS:
                continue
            path = os.path.join(dirpath, name)
            record = _parse_record(path)
            if record is None:
                result.skipped.append(path)
            elif magnification is None or record.magnification == magnification:
                result.records.append(record)
    if not result.records:
        raise EmptyDatasetError(
            f"no images matched under {root}"
            + (f" at magnification {magnification}x" if magnification else "")
        )
    return result


_MASK64 = (1 << 64) - 1


def _splitmix64(state: int):
    """Infinite stream of SplitMix64 outputs from a 64-bit seed."""
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def seeded_shuffle(items: list, seed: int) -> list:
    """Fisher-Yates permutation driven by SplitMix64; portable and
    deterministic for a fixed seed."""
    out = list(items)
    stream = _splitmix64(seed & _MASK64)
    # Rejection sampling keeps the index distribution exactly uniform.
    for i in range(len(out) - 1, 0, -1):
        bound = i + 1
        limit = _MASK64 - (_MASK64 + 1) % bound
        j = next(v for v in stream if v <= limit) % bound
        out[i], out[j] = out[j], out[i]
    return out


def _round_half_up(x: float) -> int:
    return int(x + 0.5)


def split(records: list[SampleRecord], seed: int,
          by_patient: bool = False) -> SplitManifest:
    """Stratified train/validation/test split.

    Per class: 30% to test (rounded half-up), then 10% of the remaining
    pool (floored on the total, allocated per class by largest
    remainder) to validation. With by_patient=True whole patients are
    assigned to one split, which prevents appearance leakage at the cost
    of looser ratios.
    """
    if len(records) < 10:
        raise ValueError("need at least 10 records to split")
    labels_present = {r.label for r in records}
    if len(labels_present) < 2:
        raise SingleClassError(
            f"both classes required, found only {sorted(labels_present)}"
        )
    if by_patient:
        return _split_by_patient(records, seed)

    train: list[SampleRecord] = []
    validation: list[SampleRecord] = []
    test: list[SampleRecord] = []
    pools: dict[str, list[SampleRecord]] = {}
    for label in sorted(labels_present):
        group = sorted((r for r in records if r.label == label), key=lambda r: r.path)
        shuffled = seeded_shuffle(group, seed)
        n_test = _round_half_up(TEST_FRACTION * len(shuffled))
        test.extend(shuffled[:n_test])
        pools[label] = shuffled[n_test:]

    remainder_total = sum(len(p) for p in pools.values())
    n_val_total = int(VALIDATION_FRACTION * remainder_total)
    # Largest-remainder allocation of the validation quota across classes.
    quotas = {label: VALIDATION_FRACTION * len(pool) for label, pool in pools.items()}
    n_val = {label: int(q) for label, q in quotas.items()}
    leftover = n_val_total - sum(n_val.values())
    for label in sorted(quotas, key=lambda lb: (quotas[lb] - int(quotas[lb]), lb),
                        reverse=True)[:leftover]:
        n_val[label] += 1
    for label, pool in pools.items():
        validation.extend(pool[:n_val[label]])
        train.extend(pool[n_val[label]:])
    return SplitManifest(train=train, validation=validation, test=test, seed=seed)


def _split_by_patient(records: list[SampleRecord], seed: int) -> SplitManifest:
    patients: dict[str, list[SampleRecord]] = {}
    for r in records:
        patients.setdefault(r.patient_id, []).append(r)
    patient_records = [
        SampleRecord(path=pid, label=group[0].label, magnification=0,
                     patient_id=pid, subtype="")
        for pid, group in sorted(patients.items())
    ]
    patient_split = split(patient_records, seed, by_patient=False)
    expand = lambda rs: [r for p in rs for r in patients[p.patient_id]]
    return SplitManifest(train=expand(patient_split.train),
                         validation=expand(patient_split.validation),
                         test=expand(patient_split.test), seed=seed)
