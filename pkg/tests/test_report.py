import pytest

from codetensor.errors import FormatError
from codetensor.report import SERIES, history_series, parse_csv, render_table, report_render

HEADER = "detector,split_mode,original_bbda_train,mtfd_acc\n"


def test_empty_report_is_header_only(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text(HEADER)
    lines = report_render(path).splitlines()
    assert len(lines) == 2
    assert lines[0].split() == HEADER.strip().split(",")


def test_column_count_matches_header(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text(HEADER + "DT,shared,1.000000,0.950000\nLR,disjoint,0.900000,0.800000\n")
    lines = report_render(path).splitlines()
    assert all(len(line.split()) == 4 for line in lines[2:])
    assert lines[2].startswith("DT") and lines[2].endswith("0.950000")


def test_numbers_right_aligned():
    text = render_table(["name", "v"], [["a", "1.5"], ["bb", "10.25"]])
    rows = text.splitlines()[2:]
    assert rows[0].endswith("  1.5") and rows[1].endswith("10.25")


@pytest.mark.parametrize("text", ["", "a,b\n1,2,3\n", "a,a\n1,2\n", "a,\n1,2\n"])
def test_malformed_csv(text):
    with pytest.raises(FormatError):
        parse_csv(text)


def test_unreadable_inputs(tmp_path):
    with pytest.raises(FormatError):
        report_render(tmp_path / "missing.csv")
    (tmp_path / "bin.csv").write_bytes(b"\xff\xfe\x00\x81")
    with pytest.raises(FormatError):
        report_render(tmp_path / "bin.csv")


HISTORY = "step,loss_d,loss_g,perceptual,bbda_generated,d_accuracy\n1,-0.7,-0.6,0.01,1.0,0.5\n2,-0.9,-0.4,0.02,0.5,0.75\n"


def test_three_series():
    series = history_series(*parse_csv(HISTORY))
    assert list(series) == ["loss", "accuracy", "recall"] == list(SERIES)
    assert series["recall"]["bbda_generated"] == [(1, 1.0), (2, 0.5)]
    assert set(series["loss"]) == {"loss_d", "loss_g"}


def test_history_errors():
    with pytest.raises(FormatError):
        history_series(*parse_csv("loss_d\n1\n"))
    with pytest.raises(FormatError):
        history_series(*parse_csv("step,loss_d\n1,abc\n"))


def test_plot_outputs_are_stable(tmp_path):
    (tmp_path / "r.csv").write_text(HEADER)
    (tmp_path / "h.csv").write_text(HISTORY)
    report_render(tmp_path / "r.csv", tmp_path / "h.csv", tmp_path / "a")
    report_render(tmp_path / "r.csv", tmp_path / "h.csv", tmp_path / "b")
    data = (tmp_path / "a.csv").read_text().splitlines()
    assert data[0] == "panel,series,step,value" and len(data) == 1 + 2 * 4
    assert {line.split(",")[0] for line in data[1:]} == {"loss", "accuracy", "recall"}
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert (tmp_path / "a.svg").read_bytes().startswith(b"<?xml")
