"""Run records, aggregation and baseline-vs-candidate comparison tables.

Accuracies are stored as fractions in [0, 1] and rendered as percentages
with two decimals. Gains are expressed in percentage points.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ContractError, DataError

SCHEMA_VERSION = 1
CSV_FIELDS = ("dataset", "loss", "k", "gamma", "lambda", "delta", "beta", "margin", "alpha",
              "seed", "fold", "val_accuracy", "epochs_trained", "wall_time")
_CONFIG_CSV = {"lambda": "lam"}
_TIE_ORDER = ("k", "gamma", "lam", "delta", "beta")
BUCKETS = ("small", "medium", "large", "extra-large")


@dataclass(frozen=True)
class RunRecord:
    dataset: str
    config: dict
    seed: int
    fold: int
    val_accuracy: float
    epochs_trained: int = 0
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        return {"dataset": self.dataset, "config": dict(self.config), "seed": self.seed, "fold": self.fold,
                "val_accuracy": self.val_accuracy, "epochs_trained": self.epochs_trained,
                "wall_time": self.wall_time}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        try:
            return cls(str(d["dataset"]), dict(d["config"]), int(d["seed"]), int(d["fold"]),
                       float(d["val_accuracy"]), int(d.get("epochs_trained", 0)), float(d.get("wall_time", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed run record: {exc}") from exc

    @property
    def config_key(self) -> str:
        return json.dumps(self.config, sort_keys=True)


@dataclass(frozen=True)
class Aggregate:
    dataset: str
    config: dict
    mean: float
    std: float
    n: int

    def as_dict(self) -> dict:
        return {"dataset": self.dataset, "config": dict(self.config), "mean": self.mean, "std": self.std, "n": self.n}


def size_bucket(n: int) -> str | None:
    """Dataset-size group: <=1k small, 4k-5k medium, 10k-11k large, >=50k extra-large."""
    if n <= 1000:
        return "small"
    if 4000 <= n <= 5000:
        return "medium"
    if 10000 <= n <= 11000:
        return "large"
    if n >= 50000:
        return "extra-large"
    return None


def aggregate(records: Iterable[RunRecord]) -> list[Aggregate]:
    """Arithmetic mean and sample standard deviation per (dataset, config).

    A single record gets std 0. Output order follows first appearance.
    """
    groups: dict[tuple[str, str], list[RunRecord]] = {}
    for rec in records:
        groups.setdefault((rec.dataset, rec.config_key), []).append(rec)
    if not groups:
        raise ContractError("cannot aggregate an empty set of records")
    out = []
    for (dataset, _), recs in groups.items():
        values = [r.val_accuracy for r in recs]
        n = len(values)
        mean = math.fsum(values) / n
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
        out.append(Aggregate(dataset, recs[0].config, mean, std, n))
    return out


def _tie_key(config: Mapping) -> tuple:
    return tuple(-math.inf if config.get(k) is None else config[k] for k in _TIE_ORDER)


def best_aggregate(aggs: Sequence[Aggregate]) -> Aggregate:
    """Highest mean; ties go to the lexicographically smallest (k, gamma, lambda, delta, beta)."""
    if not aggs:
        raise ContractError("no aggregates to choose from")
    return min(aggs, key=lambda a: (-a.mean, _tie_key(a.config)))


@dataclass
class RunReport:
    records: list[RunRecord]
    metadata: dict = field(default_factory=dict)
    dataset_sizes: dict = field(default_factory=dict)

    def aggregates(self) -> list[Aggregate]:
        return aggregate(self.records)

    @property
    def datasets(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.dataset)
        return list(seen)

    def best(self, dataset: str | None = None) -> Aggregate:
        aggs = self.aggregates()
        if dataset is not None:
            aggs = [a for a in aggs if a.dataset == dataset]
        return best_aggregate(aggs)

    def merge(self, other: "RunReport") -> "RunReport":
        meta = dict(self.metadata)
        meta.pop("dataset", None)
        meta.pop("n_sentences", None)
        meta.pop("provenance", None)
        return RunReport(self.records + other.records, meta, {**self.dataset_sizes, **other.dataset_sizes})

    @classmethod
    def from_means(cls, means: Mapping[str, float], sizes: Mapping[str, int], label: str = "published",
                   metadata: dict | None = None) -> "RunReport":
        """Wrap already-averaged accuracies (fractions) as a report, one record per dataset."""
        records = [RunRecord(name, {"loss": label}, 0, 0, float(acc)) for name, acc in means.items()]
        return cls(records, dict(metadata or {}), dict(sizes))


# -- comparison -------------------------------------------------------------------

PROTOCOL_KEYS = ("seeds", "fold_count")


@dataclass(frozen=True)
class GainRow:
    dataset: str
    size: int | None
    bucket: str | None
    baseline: float
    candidate: float
    gain_pp: float


@dataclass(frozen=True)
class GainTable:
    rows: tuple[GainRow, ...]
    bucket_gain_pp: dict

    def gain(self, dataset: str) -> float:
        for row in self.rows:
            if row.dataset == dataset:
                return row.gain_pp
        raise KeyError(dataset)


def compare(baseline: RunReport, candidate: RunReport) -> GainTable:
    """Per-dataset gain of the candidate's best config over the baseline's, in percentage points."""
    for key in PROTOCOL_KEYS:
        a, b = baseline.metadata.get(key), candidate.metadata.get(key)
        if a is not None and b is not None and a != b:
            raise ContractError(f"metadata mismatch on {key!r}: {a} vs {b}")
    if set(baseline.datasets) != set(candidate.datasets):
        raise ContractError(f"metadata mismatch: datasets {baseline.datasets} vs {candidate.datasets}")
    rows = []
    for name in baseline.datasets:
        base = baseline.best(name).mean
        cand = candidate.best(name).mean
        size = baseline.dataset_sizes.get(name, candidate.dataset_sizes.get(name))
        rows.append(GainRow(name, size, None if size is None else size_bucket(size), base, cand, (cand - base) * 100.0))
    buckets: dict[str, list[float]] = {}
    for row in rows:
        if row.bucket is not None:
            buckets.setdefault(row.bucket, []).append(row.gain_pp)
    averages = {b: math.fsum(v) / len(v) for b, v in buckets.items()}
    return GainTable(tuple(rows), averages)


# -- emit / load ------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in report.records:
        row = []
        for name in CSV_FIELDS:
            if name in ("dataset", "seed", "fold", "val_accuracy", "epochs_trained", "wall_time"):
                row.append(_fmt(getattr(r, name)))
            else:
                row.append(_fmt(r.config.get(_CONFIG_CSV.get(name, name))))
        writer.writerow(row)
    return buf.getvalue()


def _json_text(report: RunReport) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "metadata": report.metadata,
        "dataset_sizes": report.dataset_sizes,
        "records": [r.as_dict() for r in report.records],
    }
    if report.records:
        doc["aggregates"] = [a.as_dict() for a in report.aggregates()]
        doc["best"] = {name: report.best(name).as_dict() for name in report.datasets}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _markdown_text(report: RunReport) -> str:
    lines = ["| Dataset | Config | Mean acc. (%) | Std (%) | n |", "|---|---|---|---|---|"]
    for a in report.aggregates():
        cfg = ", ".join(f"{k}={v}" for k, v in a.config.items() if v is not None)
        lines.append(f"| {a.dataset} | {cfg} | {pct(a.mean)} | {pct(a.std)} | {a.n} |")
    return "\n".join(lines) + "\n"


def emit(report: RunReport, path, format: str = "json") -> Path:
    path = Path(path)
    renderers = {"json": _json_text, "csv": _csv_text, "markdown": _markdown_text, "md": _markdown_text}
    if format not in renderers:
        raise ContractError(f"unknown report format {format!r}")
    text = renderers[format](report)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write report to {path}: {exc}") from exc
    return path


def _parse_cell(name: str, value: str):
    if value == "":
        return None
    if name in ("k", "seed", "fold", "epochs_trained"):
        return int(value)
    if name in ("dataset", "loss"):
        return value
    return float(value)


def load_report(path, format: str | None = None) -> RunReport:
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    if fmt == "json":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported report schema version {doc.get('schema_version')}")
        return RunReport([RunRecord.from_dict(r) for r in doc["records"]], doc.get("metadata", {}),
                         doc.get("dataset_sizes", {}))
    if fmt == "csv":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise DataError(f"unexpected csv header {reader.fieldnames}")
        records = []
        for row in reader:
            cells = {k: _parse_cell(k, v) for k, v in row.items()}
            config = {}
            for name in CSV_FIELDS[1:9]:
                config[_CONFIG_CSV.get(name, name)] = cells[name]
            records.append(RunRecord(cells["dataset"], config, cells["seed"], cells["fold"], cells["val_accuracy"],
                                     cells["epochs_trained"] or 0, cells["wall_time"] or 0.0))
        return RunReport(records)
    raise DataError(f"cannot load report format {fmt!r}")


def load_records_jsonl(path) -> list[RunRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(RunRecord.from_dict(json.loads(line)))
    return out


def comparison_markdown(table: GainTable, baseline_label: str = "Baseline (CE)",
                        candidate_label: str = "TripleEntropy") -> str:
    """Two-row accuracy table plus gains, one column per dataset."""
    names = [r.dataset for r in table.rows]
    lines = ["| Model | " + " | ".join(names) + " |", "|---" * (len(names) + 1) + "|"]
    lines.append(f"| {baseline_label} | " + " | ".join(pct(r.baseline) for r in table.rows) + " |")
    lines.append(f"| {candidate_label} | " + " | ".join(pct(r.candidate) for r in table.rows) + " |")
    lines.append("| Gain (pp) | " + " | ".join(f"{r.gain_pp:+.2f}" for r in table.rows) + " |")
    if table.bucket_gain_pp:
        lines.append("")
        lines.append("| Size group | Mean gain (pp) |")
        lines.append("|---|---|")
        for bucket in BUCKETS:
            if bucket in table.bucket_gain_pp:
                lines.append(f"| {bucket} | {table.bucket_gain_pp[bucket]:+.2f} |")
    return "\n".join(lines) + "\n"


def write_gain_vs_size(table: GainTable, path, chart_path=None) -> Path:
    """CSV of (dataset, size, gain) rows sorted by size; optionally a PNG chart."""
    path = Path(path)
    rows = sorted((r for r in table.rows if r.size is not None), key=lambda r: (r.size, r.dataset))
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset", "size", "gain_pp"])
        for r in rows:
            writer.writerow([r.dataset, r.size, repr(r.gain_pp)])
    if chart_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.scatter([r.size for r in rows], [r.gain_pp for r in rows])
        for r in rows:
            ax.annotate(r.dataset, (r.size, r.gain_pp), fontsize=7)
        ax.set_xscale("log")
        ax.axhline(0.0, color="grey", lw=0.8)
        ax.set_xlabel("training sentences")
        ax.set_ylabel("gain over baseline (pp)")
        fig.tight_layout()
        fig.savefig(chart_path, dpi=120)
        plt.close(fig)
    return path
