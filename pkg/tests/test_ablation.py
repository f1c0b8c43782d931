import csv

import pytest

from ga_ssd import ablation
from ga_ssd.ablation import ablation_grid, ablation_table, levels_label, run_ablation
from ga_ssd.errors import ConfigurationError
from ga_ssd.evaluation import CATEGORY_BUCKETS, CpmReport
from ga_ssd.trainer import TrainResult


def test_input_grid(train_cfg):
    cells = ablation_grid("input", train_cfg)
    assert [(c.variant, c.levels_or_mode) for c in cells] == [
        ("no GA", "multi_channel_2_5d"), ("GA", "multi_channel_2_5d"),
        ("no GA", "volume_3d"), ("GA", "volume_3d"),
    ]
    assert [c.config.network.ga_at_load for c in cells] == [False, True, False, True]
    assert train_cfg.network.input_mode == "volume_3d"


def test_fpn_grid(train_cfg):
    cells = ablation_grid("fpn", train_cfg)
    assert len(cells) == 8
    assert [c.levels_or_mode for c in cells[::2]] == ["P4", "P4,P3", "P4,P3,P2", "P4,P3,P2,P1"]
    assert [c.variant for c in cells[:2]] == ["FPN", "GA-FPN"]
    assert cells[-1].config.network.active_levels == ["P1", "P2", "P3", "P4"]
    assert all(c.config.network.use_fpn for c in cells)


def test_compare_grid(train_cfg):
    cells = ablation_grid("compare", train_cfg)
    assert [c.variant for c in cells] == ["SSD", "FPN", "GA-SSD"]
    assert not cells[0].config.network.use_fpn
    assert cells[2].config.network.ga_at_load and cells[2].config.network.ga_at_fpn
    assert levels_label(["P2", "P3"]) == "P3,P2"


def test_unknown_mode(train_cfg):
    with pytest.raises(ConfigurationError):
        ablation_grid("backbone", train_cfg)


@pytest.fixture
def recorded(monkeypatch):
    calls = {"train": [], "evaluate": []}

    def fake_train(cfg, dataset=None, max_workers=1, show_progress=True):
        calls["train"].append(cfg)
        return TrainResult(model=cfg.network)

    def fake_evaluate(model, dataset, out_dir=None, max_workers=1, **kwargs):
        calls["evaluate"].append(dataset.scan_ids)
        score = 0.5 if model.ga_at_load else 0.25
        return CpmReport(cpm=score, sensitivities_at={}, fp_tp_ratio=float("inf"),
                         per_category={"pggn": 0.5}), []

    monkeypatch.setattr(ablation, "train", fake_train)
    monkeypatch.setattr(ablation, "evaluate", fake_evaluate)
    return calls


def test_input_ablation_rows(train_cfg, small_dataset, recorded, tmp_path):
    out = str(tmp_path / "input.csv")
    rows = run_ablation("input", train_cfg, dataset=small_dataset, out_path=out)
    assert len(rows) == 4
    assert [r.cpm for r in rows] == [0.25, 0.5, 0.25, 0.5]
    assert len({r.split_hash for r in rows}) == 1
    assert len({cfg.checkpoint_dir for cfg in recorded["train"]}) == 4
    assert all(ids == small_dataset.scan_ids for ids in recorded["evaluate"])
    with open(out) as f:
        lines = list(csv.reader(f))
    assert lines[0] == ["variant", "levels_or_mode", "cpm", "fp_tp_ratio"]
    assert lines[1] == ["no GA", "multi_channel_2_5d", "0.2500", "inf"]
    assert len(lines) == 5
    assert ablation_table("input", rows).row_count == 4


def test_compare_csv_has_category_columns(train_cfg, small_dataset, recorded, tmp_path):
    out = str(tmp_path / "compare.csv")
    run_ablation("compare", train_cfg, dataset=small_dataset, out_path=out)
    with open(out) as f:
        lines = list(csv.reader(f))
    assert lines[0][4:] == list(CATEGORY_BUCKETS)
    pggn = 4 + CATEGORY_BUCKETS.index("pggn")
    assert [line[pggn] for line in lines[1:]] == ["0.5000"] * 3
    assert lines[1][4] == ""
