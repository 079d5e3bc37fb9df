import math
import random

import pytest

from tripledml.errors import ContractError, DataError
from tripledml.reporting import (
    RunRecord,
    RunReport,
    aggregate,
    compare,
    comparison_markdown,
    emit,
    load_records_jsonl,
    load_report,
    size_bucket,
    write_gain_vs_size,
)

SMALL_NAMES = ("SST2-1k", "IMDb-1k", "SUBJ-1k", "MPQA-1k", "MRPC-1k", "TREC-1k", "CR-1k", "MR-1k")
SMALL_BASE = (88.63, 81.00, 94.61, 87.75, 78.01, 79.80, 91.57, 85.89)
SMALL_CAND = (89.09, 81.45, 94.70, 87.93, 79.12, 82.09, 92.16, 86.39)
MEDIUM_NAMES = ("MRPC", "TREC", "CR", "MR")
MEDIUM_BASE = (83.11, 96.19, 93.28, 89.09)
MEDIUM_CAND = (84.39, 97.19, 93.58, 89.29)


def _published(names, values, sizes, label):
    return RunReport.from_means({n: v / 100 for n, v in zip(names, values)}, dict(zip(names, sizes)), label)


def _cfg(**kw):
    base = {"loss": "tripleentropy", "k": 10, "gamma": 0.1, "lam": 4.0, "delta": 0.1, "beta": 0.5,
            "margin": None, "alpha": None}
    base.update(kw)
    return base


def _records(n=20, seed=0):
    rng = random.Random(seed)
    return [RunRecord("ds", _cfg(), s, f, rng.random(), rng.randint(1, 10), rng.random())
            for s in (2, 16, 128, 2048) for f in range(5)][:n]


class TestAggregate:
    def test_identical_values(self):
        recs = [RunRecord("d", _cfg(), s, f, 0.8125) for s in range(4) for f in range(5)]
        (a,) = aggregate(recs)
        assert a.mean == 0.8125 and a.std == 0.0 and a.n == 20

    def test_two_values(self):
        (a,) = aggregate([RunRecord("d", _cfg(), 2, 0, 0.0), RunRecord("d", _cfg(), 2, 1, 1.0)])
        assert a.mean == 0.5
        assert a.std == pytest.approx(math.sqrt(0.5), abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_mean_matches_brute_force(self, seed):
        recs = _records(seed=seed)
        total = 0.0
        for r in recs:
            total += r.val_accuracy
        (a,) = aggregate(recs)
        assert abs(a.mean - total / 20) <= 1e-12
        assert a.n == 20

    def test_empty(self):
        with pytest.raises(ContractError):
            aggregate([])

    def test_groups_by_config(self):
        recs = [RunRecord("d", _cfg(beta=0.1), 2, 0, 0.5), RunRecord("d", _cfg(beta=0.9), 2, 0, 0.7),
                RunRecord("d", _cfg(beta=0.1), 2, 1, 0.7)]
        aggs = aggregate(recs)
        assert [(a.config["beta"], a.n) for a in aggs] == [(0.1, 2), (0.9, 1)]


class TestCompare:
    def test_small_table(self):
        table = compare(_published(SMALL_NAMES, SMALL_BASE, [1000] * 8, "ce"),
                        _published(SMALL_NAMES, SMALL_CAND, [1000] * 8, "te"))
        assert round(table.gain("SST2-1k"), 2) == 0.46
        assert abs(table.gain("SST2-1k") - 0.46) < 1e-9
        assert abs(table.gain("TREC-1k") - 2.29) < 1e-9
        assert abs(table.gain("MRPC-1k") - 1.11) < 1e-9
        expected = sum(c - b for b, c in zip(SMALL_BASE, SMALL_CAND)) / 8
        assert abs(table.bucket_gain_pp["small"] - expected) < 1e-9

    def test_medium_table(self):
        sizes = [4000, 5000, 4000, 11000]
        table = compare(_published(MEDIUM_NAMES, MEDIUM_BASE, sizes, "ce"),
                        _published(MEDIUM_NAMES, MEDIUM_CAND, sizes, "te"))
        assert abs(table.gain("MRPC") - 1.28) < 1e-9
        assert abs(table.gain("TREC") - 1.00) < 1e-9
        assert [r.bucket for r in table.rows] == ["medium", "medium", "medium", "large"]

    def test_identical_reports(self):
        rep = RunReport(_records(), {"seeds": [2, 16, 128, 2048], "fold_count": 5})
        table = compare(rep, rep)
        assert all(r.gain_pp == 0.0 for r in table.rows)

    def test_best_config_is_used(self):
        base = RunReport([RunRecord("d", {"loss": "ce"}, 2, 0, 0.5)])
        cand = RunReport([RunRecord("d", _cfg(beta=0.1), 2, 0, 0.4), RunRecord("d", _cfg(beta=0.9), 2, 0, 0.6)])
        assert compare(base, cand).gain("d") == pytest.approx(10.0)

    def test_protocol_mismatch(self):
        a = RunReport(_records(), {"seeds": [2, 16], "fold_count": 5})
        b = RunReport(_records(), {"seeds": [2, 16, 128, 2048], "fold_count": 5})
        with pytest.raises(ContractError, match="mismatch"):
            compare(a, b)

    def test_dataset_mismatch(self):
        a = RunReport([RunRecord("x", {"loss": "ce"}, 2, 0, 0.5)])
        b = RunReport([RunRecord("y", {"loss": "ce"}, 2, 0, 0.5)])
        with pytest.raises(ContractError, match="mismatch"):
            compare(a, b)

    def test_markdown_layout(self):
        table = compare(_published(SMALL_NAMES[:2], SMALL_BASE[:2], [1000] * 2, "ce"),
                        _published(SMALL_NAMES[:2], SMALL_CAND[:2], [1000] * 2, "te"))
        text = comparison_markdown(table)
        assert "| Baseline (CE) | 88.63 | 81.00 |" in text
        assert "| TripleEntropy | 89.09 | 81.45 |" in text
        assert "+0.46" in text and "| small |" in text


@pytest.mark.parametrize(
    "n, bucket",
    [(1, "small"), (1000, "small"), (1001, None), (3999, None), (4000, "medium"), (5000, "medium"),
     (5001, None), (10000, "large"), (11000, "large"), (11001, None), (49999, None), (50000, "extra-large"),
     (67349, "extra-large")],
)
def test_size_bucket(n, bucket):
    assert size_bucket(n) == bucket


class TestEmit:
    def _report(self):
        recs = _records()
        recs += [RunRecord("ds", {"loss": "ce", "k": None, "gamma": None, "lam": None, "delta": None, "beta": None,
                                  "margin": None, "alpha": None}, 2, 0, 0.1 + 0.2, 3, 1.5)]
        return RunReport(recs, {"seeds": [2, 16, 128, 2048], "fold_count": 5, "dataset": "ds"}, {"ds": 200})

    @pytest.mark.parametrize("fmt", ["json", "csv"])
    def test_byte_stable(self, tmp_path, fmt):
        first = emit(self._report(), tmp_path / f"a.{fmt}", fmt)
        back = load_report(first)
        second = emit(back, tmp_path / f"b.{fmt}", fmt)
        assert first.read_bytes() == second.read_bytes()
        assert [r.val_accuracy for r in back.records] == [r.val_accuracy for r in self._report().records]

    def test_csv_header(self, tmp_path):
        path = emit(self._report(), tmp_path / "r.csv", "csv")
        assert path.read_text().splitlines()[0] == (
            "dataset,loss,k,gamma,lambda,delta,beta,margin,alpha,seed,fold,val_accuracy,epochs_trained,wall_time")

    def test_json_has_aggregates(self, tmp_path):
        import json

        doc = json.loads(emit(self._report(), tmp_path / "r.json").read_text())
        assert doc["schema_version"] == 1
        assert {a["n"] for a in doc["aggregates"]} == {20, 1}
        assert list(doc) == sorted(doc)

    def test_markdown(self, tmp_path):
        text = emit(self._report(), tmp_path / "r.md", "markdown").read_text()
        assert text.startswith("| Dataset | Config |")

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataError):
            emit(self._report(), blocker / "sub" / "r.json")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ContractError):
            emit(self._report(), tmp_path / "r.xml", "xml")

    def test_bad_schema_version(self, tmp_path):
        p = tmp_path / "r.json"
        p.write_text('{"schema_version": 99, "records": []}')
        with pytest.raises(DataError):
            load_report(p)


def test_records_jsonl(tmp_path):
    import json

    p = tmp_path / "runs.jsonl"
    recs = _records(3)
    p.write_text("".join(json.dumps(r.as_dict()) + "\n" for r in recs))
    assert load_records_jsonl(p) == recs


def test_gain_vs_size(tmp_path):
    base = _published(("a", "b"), (80.0, 90.0), (10000, 500), "ce")
    cand = _published(("a", "b"), (80.5, 91.0), (10000, 500), "te")
    path = write_gain_vs_size(compare(base, cand), tmp_path / "gain.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "dataset,size,gain_pp"
    assert [line.split(",")[0] for line in lines[1:]] == ["b", "a"]


def test_gain_chart(tmp_path):
    pytest.importorskip("matplotlib")
    base = _published(("a", "b"), (80.0, 90.0), (10000, 500), "ce")
    cand = _published(("a", "b"), (80.5, 91.0), (10000, 500), "te")
    write_gain_vs_size(compare(base, cand), tmp_path / "gain.csv", tmp_path / "gain.png")
    assert (tmp_path / "gain.png").stat().st_size > 0
