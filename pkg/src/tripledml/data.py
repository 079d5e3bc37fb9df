"""Text classification datasets: loading, saving, subsampling and fold splits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

FORMATS = ("csv", "tsv", "jsonl")


@dataclass(frozen=True)
class Record:
    text: str
    label: int
    text2: str | None = None


@dataclass(frozen=True)
class TextDataset:
    records: tuple[Record, ...]
    class_names: tuple[str, ...]
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.records:
            raise DataError("dataset has no records")
        n_classes = len(self.class_names)
        pair = self.records[0].text2 is not None
        for i, rec in enumerate(self.records):
            if not 0 <= rec.label < n_classes:
                raise DataError(f"record {i}: label id {rec.label} outside [0, {n_classes})")
            if (rec.text2 is not None) != pair:
                raise DataError(f"record {i}: mixes single-text and pair records")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def is_pair(self) -> bool:
        return self.records[0].text2 is not None

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def select(self, indices: Sequence[int], sampling: str | None = None) -> "TextDataset":
        prov = dict(self.provenance)
        if sampling:
            prov["sampling"] = (prov.get("sampling", "") + ";" if prov.get("sampling") else "") + sampling
        return TextDataset(tuple(self.records[int(i)] for i in indices), self.class_names, prov)


@dataclass(frozen=True)
class FoldSplit:
    fold_count: int
    folds: tuple[tuple[np.ndarray, np.ndarray], ...]  # (train_idx, val_idx) per fold

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, i):
        return self.folds[i]


def _infer_format(path: Path, fmt: str | None) -> str:
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in FORMATS:
        raise DataError(f"unsupported format {fmt!r}; expected one of {FORMATS}")
    return fmt


def _read_rows(path: Path, fmt: str):
    """Yield ``(line_number, dict)`` pairs."""
    if fmt == "jsonl":
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: unparseable JSON ({exc.msg})") from exc
                if not isinstance(obj, dict):
                    raise DataError(f"{path}:{lineno}: expected a JSON object")
                yield lineno, obj
        return
    delimiter = "," if fmt == "csv" else "\t"
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        if reader.fieldnames is None:
            return
        for col in ("text", "label"):
            if col not in reader.fieldnames:
                raise DataError(f"{path}: missing column {col!r} (have {reader.fieldnames})")
        for row in reader:
            if None in row or any(v is None for v in row.values()):
                raise DataError(f"{path}:{reader.line_num}: wrong number of fields")
            yield reader.line_num, row


def load_dataset(path, format: str | None = None, label_names: Sequence[str] | None = None) -> TextDataset:
    """Parse a csv/tsv/jsonl file with fields ``text``, optional ``text2``, ``label``.

    Label strings get dense ids in first-seen order. Passing ``label_names``
    fixes the label set (e.g. for an evaluation file); any other label is an
    error.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    fmt = _infer_format(path, format)
    closed = label_names is not None
    names: list[str] = list(label_names or [])
    index = {n: i for i, n in enumerate(names)}
    records = []
    for lineno, row in _read_rows(path, fmt):
        for col in ("text", "label"):
            if col not in row:
                raise DataError(f"{path}:{lineno}: missing field {col!r}")
        label = str(row["label"])
        if label not in index:
            if closed:
                raise DataError(f"{path}:{lineno}: unknown label {label!r}")
            index[label] = len(names)
            names.append(label)
        text2 = row.get("text2")
        records.append(Record(str(row["text"]), index[label], None if text2 is None else str(text2)))
    if not records:
        raise DataError(f"{path}: empty file")
    return TextDataset(tuple(records), tuple(names), {"source": str(path), "format": fmt})


def save_dataset(ds: TextDataset, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "jsonl":
        with path.open("w", encoding="utf-8") as fh:
            for rec in ds.records:
                obj = {"text": rec.text}
                if rec.text2 is not None:
                    obj["text2"] = rec.text2
                obj["label"] = ds.class_names[rec.label]
                fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
        return
    fields = ["text", "text2", "label"] if ds.is_pair else ["text", "label"]
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="," if fmt == "csv" else "\t", lineterminator="\n")
        writer.writerow(fields)
        for rec in ds.records:
            row = [rec.text] + ([rec.text2] if ds.is_pair else []) + [ds.class_names[rec.label]]
            writer.writerow(row)


def _stratified_quota(counts: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder apportionment of ``n`` over classes with sizes ``counts``."""
    exact = counts * n / counts.sum()
    quota = np.floor(exact).astype(np.int64)
    remainder = n - quota.sum()
    order = sorted(range(len(counts)), key=lambda c: (-(exact[c] - quota[c]), c))
    for c in order[:remainder]:
        quota[c] += 1
    return quota


def subsample(ds: TextDataset, n: int, seed: int) -> TextDataset:
    """Stratified sample of ``n`` records; the result keeps the original record order."""
    if n > len(ds):
        raise DataError(f"cannot sample {n} records from a dataset of {len(ds)}")
    if n < 1:
        raise DataError("sample size must be positive")
    labels = ds.labels
    counts = np.bincount(labels, minlength=ds.num_classes)
    quota = _stratified_quota(counts, n)
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(labels == c)
        chosen.append(rng.permutation(members)[: quota[c]])
    idx = np.sort(np.concatenate(chosen))
    return ds.select(idx, sampling=f"stratified n={n} seed={seed}")


def stratified_kfold(ds: TextDataset, k: int = 5, seed: int = 0) -> FoldSplit:
    """Deal each class's shuffled members round-robin across ``k`` folds.

    The dealing position carries over between classes so fold sizes also
    differ by at most one.
    """
    if k < 2:
        raise DataError(f"need at least 2 folds, got {k}")
    labels = ds.labels
    counts = np.bincount(labels, minlength=ds.num_classes)
    for c, count in enumerate(counts):
        if count < k:
            raise DataError(f"class {ds.class_names[c]!r} has {count} members, fewer than {k} folds")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(ds), dtype=np.int64)
    offset = 0
    for c in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        assignment[members] = (offset + np.arange(members.size)) % k
        offset = (offset + members.size) % k
    everything = np.arange(len(ds))
    folds = tuple((everything[assignment != f], everything[assignment == f]) for f in range(k))
    return FoldSplit(k, folds)


def with_provenance(ds: TextDataset, **updates) -> TextDataset:
    return replace(ds, provenance={**ds.provenance, **updates})
