import json
import shutil

import pandas as pd

from crossseg import main


def test_usage_errors_exit_with_two(tmp_path) -> None:
    assert main(["--bogus"]) == 2
    assert main(["train", "--variant", "GAN"]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "absent.yaml"),
                 "--out", str(tmp_path / "ds")]) == 2
    assert main(["gen-data", "--set", "train.nope=1", "--out", str(tmp_path / "ds")]) == 2


def test_gen_data_writes_dataset(tmp_path, tiny_config_file) -> None:
    out = tmp_path / "ds"
    assert main(["gen-data", "--config", str(tiny_config_file), "--out", str(out)]) == 0
    info = json.loads((out / "dataset.json").read_text(encoding="utf-8"))
    assert info["n_classes"] == 2
    assert (out / "train" / "manifest.csv").is_file()
    assert (out / "eval_only" / "manifest.csv").is_file()


def test_missing_dataset_exits_with_three(tmp_path, tiny_config_file) -> None:
    code = main(["train", "--config", str(tiny_config_file), "--data", str(tmp_path / "nothing"),
                 "--out", str(tmp_path / "run")])
    assert code == 3


def test_montage_with_zero_panels_writes_nothing(tmp_path) -> None:
    out = tmp_path / "montage"
    assert main(["montage", "--run", str(tmp_path / "run"), "--n", "0", "--out", str(out)]) == 0
    assert not out.exists()
    assert main(["montage", "--run", str(tmp_path / "run"), "--n", "-1"]) == 3


def test_full_pipeline(tmp_path, tiny_config_file) -> None:
    cfg = ["--config", str(tiny_config_file)]
    data, run, ev, mont = (tmp_path / d for d in ("ds", "run", "eval", "montage"))
    assert main(["--log-level", "WARNING", "gen-data", *cfg, "--out", str(data)]) == 0
    assert main(["train", *cfg, "--data", str(data), "--out", str(run)]) == 0
    assert (run / "losses.png").is_file()
    manifest = json.loads((run / "run_manifest.json").read_text(encoding="utf-8"))
    assert manifest["status"] == "complete"

    assert main(["eval", *cfg, "--data", str(data), "--runs", str(run), "--out", str(ev)]) == 0
    results = pd.read_csv(ev / "results.csv")
    assert set(results["variant"]) == {"SYNSEG"}
    assert len(results) == 2
    assert results["dsc"].between(0.0, 1.0).all()
    assert (ev / "report.html").is_file() and (ev / "summary.csv").is_file()

    assert main(["montage", *cfg, "--data", str(data), "--run", str(run), "--n", "2",
                 "--out", str(mont)]) == 0
    for name in ("montage_path_a.pgm", "montage_path_b.pgm"):
        assert (mont / name).read_bytes().startswith(b"P5\n# config_hash=")


def test_eval_without_labels_still_reports(tmp_path, tiny_config_file, tiny_dataset) -> None:
    cfg = ["--config", str(tiny_config_file)]
    run = tmp_path / "run"
    assert main(["train", *cfg, "--data", str(tiny_dataset), "--out", str(run)]) == 0
    shutil.rmtree(tiny_dataset / "eval_only")
    ev = tmp_path / "eval"
    assert main(["eval", *cfg, "--data", str(tiny_dataset), "--runs", str(run),
                 "--out", str(ev)]) == 3
    assert "absents (eval_only/)" in (ev / "report.html").read_text(encoding="utf-8")
