import pandas as pd

from modules.metrics import MetricsRecord, compare_variants, summarize
from modules.report import TABLE1_COLUMNS, build_html_report, table1


def _records() -> list[MetricsRecord]:
    return [MetricsRecord(f"T{i:03d}", d, 1.0, v, 5)
            for v, ds in (("SYNSEG", [0.8, 0.9, 0.85]), ("HC", [0.5, 0.6, 0.55]))
            for i, d in enumerate(ds)]


def test_table1_formatting() -> None:
    table = table1(summarize(_records()))
    assert list(table.columns) == TABLE1_COLUMNS
    row = table[table["Variant"] == "SYNSEG"].iloc[0]
    assert row["Median DSC"] == "0.850"
    assert row["Mean±Std ASD"] == "1.00±0.00"


def test_report_contains_sections_and_escapes() -> None:
    records = _records()
    html = build_html_report(
        "<run>",
        {"SYNSEG": "a" * 64, "HC": "b" * 64},
        {"SYNSEG": "source_proxy", "HC": "source_proxy"},
        table1(summarize(records)),
        compare_variants(records),
        None,
        ["ASD indéfinie pour T007"],
        "dsc_boxplot.png",
    )
    assert "&lt;run&gt;" in html and "<run>" not in html
    assert "N.S." in html
    assert "ASD indéfinie pour T007" in html
    assert 'src="dsc_boxplot.png"' in html
    assert "contrôle non évalué" in html


def test_report_without_results() -> None:
    html = build_html_report("vide", {}, {}, pd.DataFrame(), pd.DataFrame())
    assert html.startswith("<!doctype html>")
    assert "<i>—</i>" in html
