import csv
import io

import pytest

from ccalab.errors import InputError
from ccalab.io import read_jsonl, write_jsonl
from ccalab.metrics import MetricsRecord
from ccalab.plotdata import TRADEOFF_COLUMNS, emit_plot_data


def rec(kind, v, **kw):
    return MetricsRecord(run_id=f"{kind}-{v}", loss_kind=kind, seed=0, axis_value=v, fidelity=v, diversity=-v,
                         kl_to_target=0.1, tv_to_target=0.1, **kw).to_row()


def parse(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestTradeoff:
    def test_empty_is_header_only(self, tmp_path):
        write_jsonl(tmp_path / "m.jsonl", [])
        assert emit_plot_data([tmp_path / "m.jsonl"], "tradeoff_curve") == ",".join(TRADEOFF_COLUMNS) + "\n"

    def test_sorted_by_axis(self, tmp_path):
        write_jsonl(tmp_path / "m.jsonl", [rec("cfg", v) for v in (2.0, 0.0, 3.0, 0.5)])
        rows = parse(emit_plot_data([tmp_path / "m.jsonl"], "tradeoff_curve"))
        assert [float(r["axis_value"]) for r in rows] == [0.0, 0.5, 2.0, 3.0]

    def test_frontiers_distinguished(self, tmp_path):
        write_jsonl(tmp_path / "a.jsonl", [rec("cfg", 1.0), rec("cca", 1.0)])
        write_jsonl(tmp_path / "b.jsonl", [rec("cca+cfg", 0.5), rec("cca", 0.1, status="failed")])
        rows = parse(emit_plot_data([tmp_path / "a.jsonl", tmp_path / "b.jsonl"], "tradeoff_curve"))
        assert [r["loss_kind"] for r in rows] == ["cca", "cca+cfg", "cfg"]

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(InputError, match="nope.jsonl"):
            emit_plot_data([tmp_path / "nope.jsonl"], "tradeoff_curve")

    def test_invalid_json_names_line(self, tmp_path):
        (tmp_path / "bad.jsonl").write_text('{"a": 1}\n{oops\n')
        with pytest.raises(InputError, match="bad.jsonl:2"):
            emit_plot_data([tmp_path / "bad.jsonl"], "tradeoff_curve")

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(InputError):
            emit_plot_data([], "histogram")


def test_trajectory_rows(tmp_path):
    write_jsonl(tmp_path / "t.jsonl", [
        dict(step=s, loss=1.0, mean_logp_pos=-1.0, mean_logp_neg=-2.0, kl_to_target=0.1, loss_kind="cca")
        for s in (10, 0, 5)])
    rows = parse(emit_plot_data([tmp_path / "t.jsonl"], "trajectory"))
    assert [int(r["step"]) for r in rows] == [0, 5, 10]


def test_jsonl_round_trip(tmp_path):
    rows = [{"b": 1, "a": float("nan")}, {"x": [1, 2]}]
    write_jsonl(tmp_path / "r.jsonl", rows)
    back = read_jsonl(tmp_path / "r.jsonl")
    assert back[1] == rows[1] and back[0]["b"] == 1
