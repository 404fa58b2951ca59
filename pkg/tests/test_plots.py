import pytest

from functok.errors import DomainError
from functok.plots import KINDS, emit_plot
from functok.reports import read_csv, write_csv


def test_empty_csv_gives_axes_only_plot(tmp_path):
    for kind in KINDS:
        src = tmp_path / f"{kind}.csv"
        src.write_text("")
        res = emit_plot(src, kind, tmp_path / f"{kind}.svg")
        assert res.path.read_text().startswith("<?xml")
        assert res.series == {}
    header_only = write_csv(tmp_path / "h.csv", ["k", "token", "covered", "fraction"], [])
    assert emit_plot(header_only, "coverage", tmp_path / "h.svg").series == {"coverage": []}


def test_same_csv_same_bytes(tmp_path):
    src = write_csv(tmp_path / "deg.csv", ["rank", "token", "degree"], [[r, f"t{r}", 1000 // r] for r in range(1, 60)])
    a = emit_plot(src, "loglog_degree", tmp_path / "a.svg")
    b = emit_plot(src, "loglog_degree", tmp_path / "b.svg")
    assert a.path.read_bytes() == b.path.read_bytes()
    assert "<svg" in a.path.read_text()


def test_loss_curves_series_match_csv(tmp_path):
    cols = ["step", "lr", "loss_all", "loss_FF", "loss_FC", "loss_CF", "loss_CC"]
    rows = [[s, 1e-3, 3.0, 2.0 - s / 100, 6.0 - s / 200, 2.2 - s / 90, 4.5 - s / 150] for s in range(0, 100, 10)]
    src = write_csv(tmp_path / "trace.csv", cols, rows, preamble=["config={}"])
    res = emit_plot(src, "loss_curves", tmp_path / "loss.svg")
    _, data = read_csv(src)
    final = {g: float(data[-1][f"loss_{g}"]) for g in ("FF", "FC", "CF", "CC")}
    assert max(final, key=final.get) == "FC"
    assert res.series["FC"][-1][1] == max(final.values())


def test_schema_mismatch(tmp_path):
    src = write_csv(tmp_path / "x.csv", ["a", "b"], [[1, 2]])
    with pytest.raises(DomainError):
        emit_plot(src, "coverage", tmp_path / "x.svg")
    with pytest.raises(DomainError):
        emit_plot(src, "pie", tmp_path / "x.svg")
    with pytest.raises(DomainError):
        emit_plot(tmp_path / "missing.csv", "coverage", tmp_path / "x.svg")


@pytest.mark.parametrize("kind,cols,row", [
    ("coverage", ["k", "token", "covered", "fraction"], [1, ".", 5, 0.5]),
    ("burstiness", ["bin", "count"], [0, 4]),
    ("feature_growth", ["checkpoint_step", "lambda", "recon_score", "unique_features", "dead_features"],
     [100, 4, 0.9, 300, 20]),
])
def test_each_kind_renders(tmp_path, kind, cols, row):
    src = write_csv(tmp_path / "r.csv", cols, [row, row])
    assert emit_plot(src, kind, tmp_path / "r.svg").path.stat().st_size > 0
