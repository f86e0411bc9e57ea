import json

import numpy as np
import pytest

from sgmnet import checkpoint, cli
from sgmnet.cli import ConfigError, RunConfig, main, parse_config_text, resolve_config
from sgmnet.imageio import decode_pnm

RUN = """\
# tiny desk run
way = 3
shot = 1
queries = 2
episodes = 6
pretrain_epochs = 1
pretrain_batch = 16
meta_epochs = 1
meta_episodes = 2
meta_queries = 2
val_episodes = 2
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["init-manifest", str(root / "m.txt"), "--images-per-class", "4", "--seed", "3"]) == 0
    assert main(["gen-data", "--manifest", str(root / "m.txt"), "--out", str(root / "data")]) == 0
    (root / "run.cfg").write_text(RUN)
    base = ["--config", str(root / "run.cfg"), "--dataset", str(root / "data"), "--output", str(root / "out")]
    assert main(["pretrain", *base]) == 0
    assert main(["meta-train", *base]) == 0
    return root, base


def test_gen_data_writes_images_and_index(run):
    root, _ = run
    assert len(list((root / "data").rglob("*.ppm"))) == 24 * 4
    assert len((root / "data" / "index.tsv").read_text().splitlines()) == 96


def test_gen_data_refuses_to_overwrite(run, capsys):
    root, _ = run
    index = root / "data" / "index.tsv"
    before = index.read_bytes()
    assert main(["gen-data", "--manifest", str(root / "m.txt"), "--out", str(root / "data")]) == 1
    assert "--force" in capsys.readouterr().err
    assert index.read_bytes() == before


def test_missing_manifest_is_named(tmp_path, capsys):
    code = main(["gen-data", "--manifest", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "d")])
    assert code == 2
    assert "nope.txt" in capsys.readouterr().err


def test_evaluate_emits_metrics_and_is_deterministic(run, capsys):
    root, base = run
    assert main(["evaluate", *base]) == 0
    path = root / "out" / "metrics-matcher.json"
    first = path.read_bytes()
    doc = json.loads(first)
    assert {"mean_acc", "ci95", "episodes", "task", "seed", "schema_version"} <= set(doc)
    assert doc["episodes"] == 6 and doc["task"] == "3w1s" and doc["method"] == "sgmnet"
    assert main(["evaluate", *base]) == 0
    assert path.read_bytes() == first
    assert "mean_acc" in capsys.readouterr().out


def test_baseline_evaluation(run):
    root, base = run
    assert main(["evaluate", *base, "--baseline", "cosine"]) == 0
    doc = json.loads((root / "out" / "metrics-baseline-cosine.json").read_text())
    assert doc["method"] == "baseline-cosine" and 0 <= doc["mean_acc"] <= 1


def test_evaluate_without_matcher_names_artifact(run, capsys):
    _, base = run
    assert main(["evaluate", *base, "--no-interaction"]) == 2
    assert "matcher-nointer.ckpt" in capsys.readouterr().err


def test_meta_train_without_pretraining_names_artifact(run, tmp_path, capsys):
    root, _ = run
    code = main(["meta-train", "--config", str(root / "run.cfg"), "--dataset", str(root / "data"),
                 "--output", str(tmp_path / "empty")])
    assert code == 2
    assert "pretrain.ckpt" in capsys.readouterr().err


@pytest.mark.parametrize("flags", [["--shot", "0"], ["--way", "1"], ["--episodes", "0"]])
def test_invalid_config_exits_1(run, flags, capsys):
    _, base = run
    assert main(["evaluate", *base, *flags]) == 1
    assert "config error" in capsys.readouterr().err


def test_usage_error_exits_1(capsys):
    assert main(["no-such-command"]) == 1
    assert main(["evaluate", "--seed", "abc"]) == 1


def test_match_viz_outputs(run, capsys):
    root, base = run
    img = sorted((root / "data").rglob("*.ppm"))[0]
    out = root / "viz"
    assert main(["match-viz", *base, "--support", str(img), "--query", str(img), "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert len(files) == 17 and files[0] == "node_00.pgm" and files[-1] == "weights.csv"
    W = np.loadtxt(out / "weights.csv", delimiter=",")
    assert W.shape == (16, 16)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-6)
    heat = decode_pnm((out / "node_03.pgm").read_bytes())
    assert heat.shape == (4, 4) and heat.max() == 255
    assert "peak at their own position" in capsys.readouterr().out


def test_match_viz_unreadable_image(run, tmp_path):
    _, base = run
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\n64 64\n255\n" + b"\0" * 10)
    assert main(["match-viz", *base, "--support", str(bad), "--query", str(bad), "--out", str(tmp_path / "v")]) == 2


def test_checkpoints_are_loadable(run):
    root, _ = run
    assert any(k.startswith("pretrain.") for k in checkpoint.load(root / "out" / "pretrain.ckpt"))
    assert any(k.startswith("matcher.") for k in checkpoint.load(root / "out" / "matcher.ckpt"))


# -- configuration ------------------------------------------------------------------------

def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("seed = 4\nway = 7\noutput_dir = from-file\n")
    env = {cli.OUTPUT_ENV: "from-env"}
    cfg = resolve_config(str(cfg_file), {"way": 6, "shot": None}, env)
    assert (cfg.seed, cfg.way, cfg.shot, cfg.output_dir) == (4, 6, 1, "from-env")
    cfg = resolve_config(str(cfg_file), {"output_dir": "from-flag"}, env)
    assert cfg.output_dir == "from-flag"
    assert resolve_config(None, {}, {}) == RunConfig()


def test_config_text_round_trip_and_errors():
    cfg = RunConfig(way=4, no_interaction=True, meta_lr=5e-4)
    assert RunConfig(**parse_config_text(cli.config_to_text(cfg))) == cfg
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config_text("colour = red\n")
    with pytest.raises(ConfigError, match="int"):
        parse_config_text("way = five\n")
    with pytest.raises(ConfigError, match=":2"):
        parse_config_text("way = 3\nnonsense\n")


@pytest.mark.parametrize("changes", [{"shot": 0}, {"way": 1}, {"meta_lr": 0.0}, {"pretrain_lr": -1.0},
                                     {"dataset": "x", "output_dir": "x"}])
def test_run_config_invariants(changes):
    with pytest.raises(ConfigError):
        RunConfig(**changes).validate()


def test_constant_heatmap_is_flat():
    assert set(np.unique(decode_pnm(cli.heatmap_pgm(np.full(16, 1 / 16), (4, 4))))) == {255}


def test_atomic_writes_leave_no_temporaries(run):
    root, _ = run
    leftovers = [p for p in (root / "out").iterdir() if p.name.startswith(".") or p.suffix == ".tmp"]
    assert leftovers == []

