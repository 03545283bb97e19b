import numpy as np
import pandas as pd
import pytest
from matplotlib.figure import Figure

from modules.errors import ShapeError
from modules.metrics import MetricsRecord, compare_variants, records_frame
from modules.visuals import plot_dsc_boxplot, plot_loss_curves, save_figure, tile_montage


def test_loss_curves_figure(tmp_path) -> None:
    losses = pd.DataFrame({
        "stage": [1, 1, 2, 2], "epoch": [1, 2, 1, 2], "step": [1, 2, 3, 4],
        "gan_g1": [0.7, 0.6, 0.0, 0.0], "gan_g2": 0.0, "cycle_s": [0.3, 0.2, 0.0, 0.0],
        "cycle_t": 0.0, "seg": [0.0, 0.0, 0.9, 0.5], "total": 1.0, "d1": 0.7, "d2": 0.0,
    })
    fig = plot_loss_curves(losses)
    assert isinstance(fig, Figure)
    path = save_figure(fig, tmp_path / "out" / "losses.png")
    assert path.is_file() and path.stat().st_size > 0


def test_empty_losses_still_plot() -> None:
    assert isinstance(plot_loss_curves(pd.DataFrame(columns=["stage", "epoch"])), Figure)


def test_boxplot_with_markers(tmp_path) -> None:
    records = [MetricsRecord(f"T{i:03d}", d, 1.0, v, 3)
               for v, base in (("SYNSEG", 0.8), ("HC", 0.5)) for i, d in
               enumerate(base + 0.01 * np.arange(6))]
    fig = plot_dsc_boxplot(records_frame(records), compare_variants(records), 1,
                           ["SYNSEG", "HC"])
    assert save_figure(fig, tmp_path / "box.png").is_file()


def test_tile_montage_layout() -> None:
    rows = [[np.zeros((4, 4)), np.ones((4, 4))], [np.full((4, 4), 0.5)]]
    canvas = tile_montage(rows)
    assert canvas.shape == (8, 8)
    assert canvas[0, 4] == 1.0 and canvas[4, 0] == 0.5 and canvas[4, 4] == 0.0
    with pytest.raises(ShapeError):
        tile_montage([[np.zeros((4, 4)), np.zeros((3, 4))]])
    with pytest.raises(ShapeError):
        tile_montage([])
