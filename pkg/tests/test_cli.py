import csv
import json

import numpy as np
import pytest

from cotamflow import cli, coteach, flowio, gradsuite, network, ops

TINY = """\
# tiny run for tests
image_size=16x16
max_translation=2
texture_wl_min=6
texture_wl_max=12
levels=3
channels=4,6,8
radius=1
estimator_channels=6,4
context_channels=6,4
context_dilations=1,1
t_max=2
batch_size=2
n_train=4
n_val=2
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(TINY)
    return p


def test_schema_and_config_parsing(cfg_file, capsys):
    assert cli.main(["schema"]) == 0
    out = capsys.readouterr().out
    assert "tau" in out and "0.8" in out
    cfg = cli.RunConfig.from_file(cfg_file)
    assert cfg.image_size == (16, 16) and cfg.channels == (4, 6, 8)
    assert cli.RunConfig.parse_pairs(cfg.to_text().splitlines()) == cfg
    with pytest.raises(cli.ConfigError, match="unknown"):
        cli.RunConfig.parse_pairs(["tua=0.5"])
    with pytest.raises(cli.ConfigError):
        cli.RunConfig.parse_pairs(["tau=1.5"])
    with pytest.raises(cli.ConfigError):
        cli.RunConfig.parse_pairs(["swap=maybe"])
    with pytest.raises(AttributeError):
        cfg.tau = 0.5


def test_usage_errors_exit_2(cfg_file, tmp_path):
    assert cli.main(["bogus"]) == 2
    assert cli.main(["train"]) == 2
    assert cli.main(["train", "--config", str(cfg_file), "--set", "nope=1", "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["ablate", "--config", str(cfg_file), "--grid", "lr=1,2", "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["gradcheck", "--only", "no_such_case"]) == 2


def test_runtime_error_exit_1(tmp_path):
    assert cli.main(["viz", "--flo", str(tmp_path / "missing.flo"), "--out", str(tmp_path / "x.png")]) == 1


def test_viz_zero_flow_is_white(tmp_path):
    flowio.write_flo(np.zeros((4, 5, 2), np.float32), tmp_path / "z.flo")
    assert cli.main(["viz", "--flo", str(tmp_path / "z.flo"), "--out", str(tmp_path / "z.png")]) == 0
    img = flowio.read_image(tmp_path / "z.png")
    assert img.shape == (4, 5, 3) and np.all(img == 1.0)


def test_gradcheck_pass_and_negative_control(monkeypatch, capsys):
    assert cli.main(["gradcheck", "--only", "bilinear_warp", "selfsup_loss"]) == 0

    def broken():
        import torch

        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, a):
                return a * a

            @staticmethod
            def backward(ctx, g):
                return g

        x = torch.rand(3, dtype=torch.float64, requires_grad=True)
        return ops.gradcheck(Bad.apply, [x])

    monkeypatch.setitem(gradsuite.SUITE, "injected_bug", broken)
    assert cli.main(["gradcheck", "--only", "injected_bug"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_train_eval_infer(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_file), "--out", str(out), "--quiet"]) == 0
    assert (out / "config.txt").read_text() == cli.RunConfig.from_file(cfg_file).to_text()
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 2
    capsys.readouterr()
    js = tmp_path / "eval.json"
    assert cli.main(["eval", "--config", str(cfg_file), "--checkpoint", str(out / "net_a"),
                     "--checkpoint", str(out / "net_b"), "--json", str(js), "--csv", str(tmp_path / "e.csv")]) == 0
    table = json.loads(js.read_text())
    assert [r["checkpoint"] for r in table][-1] == "mean"
    assert table[0]["aepe"] == pytest.approx(float(rows[-1]["val_aepe_a"]), abs=1e-6)
    assert table[1]["aepe"] == pytest.approx(float(rows[-1]["val_aepe_b"]), abs=1e-6)

    img = np.random.default_rng(0).random((13, 19, 3))
    flowio.write_image(img, tmp_path / "a.png")
    assert cli.main(["infer", "--checkpoint", str(out / "net_a"), "--i1", str(tmp_path / "a.png"),
                     "--i2", str(tmp_path / "a.png"), "--out", str(tmp_path / "f.flo"),
                     "--color", str(tmp_path / "f.png")]) == 0
    assert flowio.read_flo(tmp_path / "f.flo").shape == (13, 19, 2)
    assert flowio.read_image(tmp_path / "f.png").shape == (13, 19, 3)


def test_eval_requires_data_or_validation(tmp_path, cfg_file):
    m = network.init_params(0, cli.RunConfig.from_file(cfg_file).pyramid())
    network.save_checkpoint(m, tmp_path / "ck")
    cfg_file.write_text(TINY + f"data_dir={tmp_path}\n")
    assert cli.main(["eval", "--config", str(cfg_file), "--checkpoint", str(tmp_path / "ck")]) == 2


def test_grid_parsing_and_seeds(cfg_file):
    axes = cli.parse_grid("tau=0.6,0.8 fmm=on,off")
    assert axes == [("tau", [0.6, 0.8]), ("fmm", [True, False])]
    base = cli.RunConfig.from_file(cfg_file)
    cells = cli.grid_cells(base, axes)
    assert len(cells) == 4
    seeds = {(c.seed_a, c.seed_b) for _, c in cells}
    assert len(seeds) == 4
    assert cells[1][0] == {"tau": 0.6, "fmm": False} and not cells[1][1].fmm
    with pytest.raises(cli.UsageError):
        cli.parse_grid("tau=0.6 tau=0.7")


def test_ablate_degenerate_grid_matches_train(cfg_file, tmp_path):
    assert cli.main(["ablate", "--config", str(cfg_file), "--grid", "swap=on", "--out", str(tmp_path / "ab")]) == 0
    assert cli.main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "tr"), "--quiet"]) == 0
    for name in ("net_a", "net_b"):
        for f in (network.MANIFEST, network.BLOB):
            assert ((tmp_path / "ab" / "cell000" / name / f).read_bytes()
                    == (tmp_path / "tr" / name / f).read_bytes())
    rows = list(csv.DictReader(open(tmp_path / "ab" / "results.csv")))
    assert len(rows) == 1 and rows[0]["swap"] == "true"
    assert (tmp_path / "ab" / "results.txt").exists()


def test_ablate_plain_decoder_cell(cfg_file, tmp_path):
    assert cli.main(["ablate", "--config", str(cfg_file), "--set", "t_max=1",
                     "--grid", "fmm=off cmm=off", "--out", str(tmp_path / "ab")]) == 0
    m = network.load_checkpoint(tmp_path / "ab" / "cell000" / "net_a")
    assert not m.cfg.fmm and not m.cfg.cmm
    assert all(d.fmm is None and d.cmm is None for d in m.decoders.values())
