# -*- coding: utf-8 -*-
"""
CrossSeg — Module report
Objectif : Tableau récapitulatif (médiane, moyenne ± écart-type de DSC et ASD) et rapport HTML
autonome des comparaisons entre variantes.
"""
from __future__ import annotations

import html
import math
from typing import Iterable

import pandas as pd

TABLE1_COLUMNS = ["Variant", "Class", "N", "Median DSC", "Mean±Std DSC", "Median ASD",
                  "Mean±Std ASD"]

# Thème sombre, une règle par ligne ; `@media print` repasse en clair.
_CSS = "\n".join([
    "body{font-family:system-ui,sans-serif;background:#0b1020;color:#e2e8f0;margin:2rem}",
    ".card{background:#121a2e;border:1px solid #24304a;border-radius:10px;padding:1rem;"
    "margin:.75rem 0}",
    ".metrics{display:flex;flex-wrap:wrap;gap:.75rem;margin:1rem 0 1.5rem}",
    ".metric{flex:1;min-width:10rem;background:#0f172a;border:1px solid #24304a;"
    "border-radius:8px;padding:.75rem}",
    ".metric span{font-size:.8rem;color:#94a3b8}",
    ".metric strong{display:block;font-size:1.5rem;margin-top:.25rem}",
    ".meta{color:#94a3b8;font-size:.9rem;margin:0 0 .4rem}",
    "table{border-collapse:collapse;width:100%}",
    "th,td{border-bottom:1px solid #24304a;padding:.3rem .6rem;text-align:left}",
    "@media print{body{background:#fff;color:#111}.card{border-color:#999}}",
])


def _fmt(value: float, digits: int = 3) -> str:
    return "—" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.{digits}f}"


def table1(summary: pd.DataFrame) -> pd.DataFrame:
    """Mise en forme « Median DSC / Mean±Std DSC / Median ASD / Mean±Std ASD »."""
    rows = []
    for r in summary.itertuples(index=False):
        rows.append({
            "Variant": r.variant,
            "Class": int(r[1]),
            "N": int(r.n),
            "Median DSC": _fmt(r.dsc_median),
            "Mean±Std DSC": f"{_fmt(r.dsc_mean)}±{_fmt(r.dsc_std)}",
            "Median ASD": _fmt(r.asd_mm_median, 2),
            "Mean±Std ASD": f"{_fmt(r.asd_mm_mean, 2)}±{_fmt(r.asd_mm_std, 2)}",
        })
    return pd.DataFrame(rows, columns=TABLE1_COLUMNS)


def _li(items: Iterable[str]) -> str:
    """Transforme une liste de chaînes en <li> (ordre conservé, vides ignorés)."""
    items = [html.escape(str(x)) for x in (items or []) if str(x).strip()]
    return "".join(f"<li>{x}</li>" for x in items) or "<i>—</i>"


def _table(frame: pd.DataFrame) -> str:
    if frame is None or frame.empty:
        return "<p><i>—</i></p>"
    head = "".join(f"<th>{html.escape(str(c))}</th>" for c in frame.columns)
    body = "".join(
        "<tr>" + "".join(f"<td>{html.escape(str(v))}</td>" for v in row) + "</tr>"
        for row in frame.itertuples(index=False)
    )
    return f"<table><thead><tr>{head}</tr></thead><tbody>{body}</tbody></table>"


def _ordering_block(ordering: dict | None) -> str:
    if not ordering:
        return """
    <div class="card">
      <h3>Contrôle d'ordre</h3>
      <p class="meta">Les quatre variantes ne sont pas toutes présentes : contrôle non évalué.</p>
    </div>
    """
    checks = "".join(
        f"<li>{html.escape(name)} : <b>{'OK' if ok else 'ÉCHEC'}</b></li>"
        for name, ok in ordering["checks"].items()
    )
    medians = ", ".join(f"{html.escape(k)}={v:.3f}" for k, v in ordering["medians"].items())
    return f"""
    <div class="card">
      <h3>Contrôle d'ordre (SEG_ONLY ≥ SYNSEG &gt; TWO_STAGE &gt; HC)</h3>
      <p class="meta">Médianes DSC&nbsp;: {medians}</p>
      <p class="meta">Plancher calibré&nbsp;: {ordering['calibrated_floor']:.3f}
        — p(SYNSEG vs HC)&nbsp;: {_fmt(ordering['p_synseg_vs_hc'], 4)}</p>
      <ul>{checks}</ul>
      <p><b>Résultat&nbsp;:</b> {'conforme' if ordering['passed'] else 'non conforme'}</p>
    </div>
    """


def build_html_report(
    title: str,
    config_hashes: dict[str, str],
    selection: dict[str, str],
    summary: pd.DataFrame,
    comparisons: pd.DataFrame,
    ordering: dict | None = None,
    notices: list[str] | None = None,
    figure: str | None = None,
) -> str:
    """
    Génère un rapport HTML autonome.

    - title          : titre du rapport
    - config_hashes  : variante → empreinte de configuration du checkpoint évalué
    - selection      : variante → politique de sélection d'époque utilisée
    - summary        : tableau déjà mis en forme par `table1`
    - comparisons    : Wilcoxon par paire (colonne `marker` « * » / « N.S. »)
    - ordering       : résultat de `metrics.ordering_check` (optionnel)
    - notices        : avertissements (labels manquants, ASD indéfinies…)
    - figure         : nom du fichier image de boîtes à moustaches (optionnel)
    """
    ttl = html.escape(title or "")
    runs = [f"{v} — époque sélectionnée par « {selection.get(v, '?')} » — config {h[:12]}"
            for v, h in sorted(config_hashes.items())]
    comp = comparisons.copy() if comparisons is not None else pd.DataFrame()
    if not comp.empty:
        comp["p_value"] = comp["p_value"].map(lambda p: _fmt(p, 4))
        comp["statistic"] = comp["statistic"].map(lambda s: _fmt(s, 1))

    metrics_html = f"""
    <div class="metrics">
      <div class="metric">
        <span>Variantes évaluées</span>
        <strong>{len(config_hashes)}</strong>
      </div>
      <div class="metric">
        <span>Comparaisons</span>
        <strong>{0 if comp.empty else len(comp)}</strong>
      </div>
      <div class="metric">
        <span>Significatives (p &lt; 0.05)</span>
        <strong>{0 if comp.empty else int((comp['marker'] == '*').sum())}</strong>
      </div>
    </div>
    """
    figure_block = ""
    if figure:
        figure_block = f"""
    <div class="card">
      <h3>DSC par sujet</h3>
      <img src="{html.escape(figure)}" alt="DSC par variante" style="max-width:100%">
    </div>
    """

    return f"""<!doctype html>
<html>
<head>
  <meta charset="utf-8">
  <title>{ttl} — Rapport</title>
  <style>{_CSS}</style>
</head>
<body>

  <h1>{ttl}</h1>

  {metrics_html}

  <div class="card">
    <h3>Runs évalués</h3>
    <ul>{_li(runs)}</ul>
  </div>

  <div class="card">
    <h3>Récapitulatif</h3>
    {_table(summary)}
  </div>

  <div class="card">
    <h3>Wilcoxon (rangs signés, bilatéral)</h3>
    {_table(comp)}
  </div>

  {_ordering_block(ordering)}

  {figure_block}

  <div class="card">
    <h3>Avertissements</h3>
    <ul>{_li(notices or [])}</ul>
  </div>

</body>
</html>"""
