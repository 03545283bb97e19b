# -*- coding: utf-8 -*-
"""
CrossSeg — point d'entrée CLI
Objectif: Verbes `gen-data`, `train`, `eval`, `montage` reliant fantôme, entraînement,
métriques et rapports.

Codes de sortie : 0 succès, 2 usage / configuration, 3 données, 4 échec numérique.
Variable d'environnement : CROSSSEG_NUM_THREADS (défaut 1, mode déterministe).
"""
from __future__ import annotations

import os

_THREADS = os.environ.get("CROSSSEG_NUM_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ[_var] = _THREADS

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Any, Dict, List, Optional, Sequence  # noqa: E402

import numpy as np  # noqa: E402

from modules.checkpoint import Checkpoint, list_checkpoints, load_checkpoint  # noqa: E402
from modules.config import RunConfig, build_configs, load_run_config, resolve_config  # noqa: E402
from modules.data import (  # noqa: E402
    DatasetReader,
    EvalStore,
    Modality,
    atomic_write_bytes,
    read_dataset_info,
    write_image_pgm,
)
from modules.errors import CrossSegError, DataError, TrainingError  # noqa: E402
from modules.metrics import (  # noqa: E402
    MetricsRecord,
    compare_variants,
    evaluate_subject,
    ordering_check,
    records_frame,
    summarize,
)
from modules.phantom import phantom_generate, write_phantom_dataset  # noqa: E402
from modules.report import build_html_report, table1  # noqa: E402
from modules.rng import stream  # noqa: E402
from modules.training import (  # noqa: E402
    RunPaths,
    infer,
    load_network,
    montage_panels,
    prepare_scans,
    read_losses,
    read_run_manifest,
    run_training,
)
from modules.visuals import (  # noqa: E402
    plot_dsc_boxplot,
    plot_loss_curves,
    save_figure,
    tile_montage,
)

logger = logging.getLogger("crossseg")


# ---------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------
def _overrides(args: argparse.Namespace) -> List[str]:
    items = list(args.set or [])
    if getattr(args, "variant", None):
        items.append(f"train.variant={args.variant}")
    if getattr(args, "seed", None) is not None:
        items.append(f"seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        items.append(f"train.epochs={args.epochs}")
    return items


def _run_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config, _overrides(args))


# ---------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------
def cmd_gen_data(args: argparse.Namespace) -> int:
    run = _run_config(args)
    out = Path(args.out)
    ds = phantom_generate(run.phantom)
    write_phantom_dataset(ds, out, run.hash)
    logger.info("gen-data terminé: %s", out)
    return 0


# ---------------------------------------------------------------------
# train
# ---------------------------------------------------------------------
def cmd_train(args: argparse.Namespace) -> int:
    run = _run_config(args)
    out = Path(args.out)
    result = run_training(run, Path(args.data), out)
    losses = read_losses(RunPaths(out).losses)
    save_figure(plot_loss_curves(losses), out / "losses.png")
    logger.info("train terminé: checkpoint retenu %s (%s)", result.selected, result.policy)
    return 0


# ---------------------------------------------------------------------
# Résolution des runs évalués
# ---------------------------------------------------------------------
class EvaluatedRun:
    def __init__(self, label: str, ckpt: Checkpoint, run: RunConfig, policy: str,
                 run_dir: Optional[Path]) -> None:
        self.label = label
        self.ckpt = ckpt
        self.run = run
        self.policy = policy
        self.run_dir = run_dir


def _resolve_run(path: Path, fallback: RunConfig) -> EvaluatedRun:
    """Répertoire de run (checkpoint sélectionné) ou fichier `.ckpt` isolé."""
    path = Path(path)
    run_dir = path if path.is_dir() else path.parent.parent
    manifest = read_run_manifest(run_dir / "run_manifest.json")
    if path.is_dir():
        if manifest is None or manifest.get("status") != "complete":
            raise DataError(f"{path}: run inexistant ou inachevé")
        ckpt = load_checkpoint(Path(manifest["selection"]["checkpoint"]))
        policy = manifest["selection"]["policy"]
    else:
        ckpt = load_checkpoint(path)
        policy = "checkpoint explicite"
    run = fallback
    if manifest is not None and manifest.get("config_hash") == ckpt.config_hash:
        run = build_configs(resolve_config(manifest["config"]))
    elif ckpt.config_hash != fallback.hash:
        logger.warning("%s: empreinte de config différente de --config, contrôle de forme seul",
                       path)
    return EvaluatedRun(ckpt.variant, ckpt, run, policy, run_dir if manifest else None)


def _unique_labels(runs: List[EvaluatedRun]) -> None:
    seen: Dict[str, int] = {}
    for r in runs:
        seen[r.label] = seen.get(r.label, 0) + 1
        if seen[r.label] > 1:
            r.label = f"{r.label}#{seen[r.label]}"


# ---------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------
def cmd_eval(args: argparse.Namespace) -> int:
    base = _run_config(args)
    data_root = Path(args.data)
    out = Path(args.out)
    info = read_dataset_info(data_root)
    runs = [_resolve_run(Path(p), base) for p in args.runs]
    _unique_labels(runs)
    notices: List[str] = []
    store = EvalStore(data_root, info.n_classes)
    records: List[MetricsRecord] = []
    if not store.available():
        notices.append("labels d'évaluation absents (eval_only/) : DSC et ASD omis")
        logger.warning(notices[-1])
        scans = []
    else:
        scans = store.target_scans()
    for r in runs:
        cfg = r.run.train
        if cfg.n_classes != info.n_classes:
            raise DataError(f"{r.label}: {cfg.n_classes} classes, jeu de données à {info.n_classes}")
        seg = load_network(r.ckpt, "Seg", cfg)
        ev = r.run.eval
        classes = list(range(1, cfg.n_classes)) if ev.all_classes else [ev.organ_class]
        for scan in scans:
            spacing = scan.images[0].spacing_mm
            pred = infer(seg, scan.volume(), cfg.image_size, None, scan.images[0].shape, spacing)
            pred_vol = [p.classes for p in pred]
            for cls in classes:
                dsc, asd_mm = evaluate_subject(np.stack(pred_vol), scan.label_volume(), cls,
                                               spacing, ev.slice_thickness_mm)
                if np.isnan(asd_mm):
                    notices.append(f"{r.label}/{scan.scan_id}: ASD indéfinie (classe {cls})")
                records.append(MetricsRecord(scan.scan_id, dsc, asd_mm, r.label, r.ckpt.epoch, cls))
    _write_eval(out, runs, records, notices, base)
    if not scans:
        raise DataError("évaluation impossible sans labels cible (voir report.html)")
    return 0


def _write_eval(out: Path, runs: List[EvaluatedRun], records: List[MetricsRecord],
                notices: List[str], base: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    results = records_frame(records)
    atomic_write_bytes(out / "results.csv",
                       results.to_csv(index=False, lineterminator="\n").encode("utf-8"))
    summary = summarize(records) if records else None
    comparisons = compare_variants(records) if records else None
    table = table1(summary) if summary is not None else None
    ordering = None
    if summary is not None:
        atomic_write_bytes(out / "summary.csv",
                           table.to_csv(index=False, lineterminator="\n").encode("utf-8"))
        atomic_write_bytes(out / "comparison.csv",
                           comparisons.to_csv(index=False, lineterminator="\n").encode("utf-8"))
        ordering = ordering_check(summary, comparisons, base.eval.organ_class)
        order = [v for v in ("SEG_ONLY", "SYNSEG", "TWO_STAGE", "HC")
                 if v in set(results["variant"])]
        order += sorted(set(results["variant"]) - set(order))
        save_figure(plot_dsc_boxplot(results, comparisons, base.eval.organ_class, order),
                    out / "dsc_boxplot.png")
    hashes = {r.label: r.ckpt.config_hash for r in runs}
    policies = {r.label: r.policy for r in runs}
    report = build_html_report(
        "CrossSeg — évaluation sur le domaine cible",
        hashes,
        policies,
        table,
        comparisons,
        ordering,
        notices,
        "dsc_boxplot.png" if summary is not None else None,
    )
    atomic_write_bytes(out / "report.html", report.encode("utf-8"))
    eval_manifest = {"config_hashes": hashes, "selection": policies, "ordering": ordering,
                     "notices": notices}
    atomic_write_bytes(out / "eval_manifest.json",
                       (json.dumps(eval_manifest, sort_keys=True, indent=2, ensure_ascii=False,
                                   default=bool) + "\n").encode("utf-8"))
    logger.info("eval terminé: %d enregistrements → %s", len(records), out)


# ---------------------------------------------------------------------
# montage
# ---------------------------------------------------------------------
def _montage_networks(target: Path, base: RunConfig) -> tuple[Dict[str, Any], EvaluatedRun]:
    resolved = _resolve_run(target, base)
    cfg = resolved.run.train
    nets = {role: load_network(resolved.ckpt, role, cfg)
            for role in ("G1", "G2", "Seg") if resolved.ckpt.has_group(role)}
    if "G1" not in nets:
        raise TrainingError(f"{target}: checkpoint sans générateur (variante {resolved.ckpt.variant})")
    if "G2" not in nets and resolved.run_dir is not None:
        stage1 = list_checkpoints(RunPaths(resolved.run_dir).checkpoints, "stage1")
        if stage1:
            nets["G2"] = load_network(load_checkpoint(stage1[-1]), "G2", cfg)
    return nets, resolved


def cmd_montage(args: argparse.Namespace) -> int:
    if args.n < 0:
        raise DataError(f"--n doit être ≥ 0 (reçu {args.n})")
    if args.n == 0:
        logger.info("montage: n=0, aucun fichier écrit")
        return 0
    base = _run_config(args)
    nets, resolved = _montage_networks(Path(args.run), base)
    cfg = resolved.run.train
    reader = DatasetReader(Path(args.data), cfg.n_classes)
    source = prepare_scans(reader.load_split("train", Modality.SOURCE, False), cfg.image_size)
    target = prepare_scans(reader.load_split("train", Modality.TARGET, False), cfg.image_size)
    rng = stream(cfg.seed, "montage")
    xs = np.stack([s.pixels for scan in source for s in scan.images])
    ys = np.stack([s.pixels for scan in target for s in scan.images])
    x = xs[rng.integers(0, len(xs), size=args.n)]
    y = ys[rng.integers(0, len(ys), size=args.n)]
    panels = montage_panels(nets, x, y, cfg.n_classes)
    out = Path(args.out)
    comment = f"config_hash={resolved.ckpt.config_hash}"
    suffix = "" if "path_b" in panels else "_hc_no_path_b"
    for name, rows in panels.items():
        path = out / f"montage_{name}{suffix if name == 'path_a' else ''}.pgm"
        write_image_pgm(path, tile_montage(rows), comment)
        logger.info("montage écrit: %s", path)
    return 0


# ---------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossseg", description="Synthèse + segmentation "
                                     "inter-modalités à l'échelle du poste de travail")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="fichier YAML")
        p.add_argument("--set", action="append", metavar="CLÉ=VALEUR",
                       help="surcharge (ex. train.lambda3=10), répétable")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="génère le jeu de données fantôme")
    common(p)
    p.add_argument("--out", type=Path, default=Path("dataset"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="entraîne la variante configurée (reprise automatique)")
    common(p)
    p.add_argument("--data", type=Path, default=Path("dataset"))
    p.add_argument("--out", type=Path, default=Path("runs/default"))
    p.add_argument("--variant", choices=["SYNSEG", "HC", "TWO_STAGE", "SEG_ONLY"])
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="évalue des runs sur les labels cible")
    common(p)
    p.add_argument("--data", type=Path, default=Path("dataset"))
    p.add_argument("--runs", nargs="+", required=True,
                   help="répertoires de run ou fichiers .ckpt")
    p.add_argument("--out", type=Path, default=Path("eval"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("montage", help="montages chemin A / chemin B")
    common(p)
    p.add_argument("--data", type=Path, default=Path("dataset"))
    p.add_argument("--run", required=True, help="répertoire de run ou fichier .ckpt")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--out", type=Path, default=Path("montage"))
    p.set_defaults(func=cmd_montage)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=getattr(logging, args.log_level))
    try:
        return int(args.func(args))
    except CrossSegError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("E/S: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
