import json
from pathlib import Path

import numpy as np
import pytest

from pigcl import cli
from pigcl import graph as gr


DESK_CONFIG = """
[train]
epochs = 3
lr_encoder = 5e-3
tau = 0.5
seed = 1

[augment]
edge_mode = "learnable"
feat_mode = "learnable"

[dims]
hidden = 8
embed = 6
proj = 6
edge_hidden = 5
attr_hidden = 5

[eval]
n_splits = 1
n_seeds = 1
"""


@pytest.fixture()
def data_dir(tmp_path):
    g, splits = gr.generate_sbm(50, 2, 0.2, 0.04, feat_dim=4, feat_shift=1.5, seed=0)
    d = tmp_path / "data"
    gr.save_graph(g, d, splits=splits, split_seed=0)
    return d


@pytest.fixture()
def config_path(tmp_path):
    p = tmp_path / "desk.toml"
    p.write_text(DESK_CONFIG)
    return p


def test_missing_config_exits_1_with_filename(capsys, tmp_path):
    rc = cli.main(["train", "--config", str(tmp_path / "nope.toml"),
                   "--data", "x", "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "nope.toml" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[train]\nepochs = 1\nwarp_speed = true\n")
    rc = cli.main(["train", "--config", str(p), "--data", "x", "--out", str(tmp_path)])
    assert rc == 1
    assert "warp_speed" in capsys.readouterr().err


def test_bad_data_dir_exits_2(config_path, tmp_path, capsys):
    rc = cli.main(["train", "--config", str(config_path),
                   "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_train_produces_expected_artifacts(config_path, data_dir, tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["train", "--config", str(config_path),
                   "--data", str(data_dir), "--out", str(out)])
    assert rc == 0
    assert (out / "params.bin").exists()
    assert (out / "params.json").exists()
    assert (out / "diagnostics.jsonl").exists()
    assert (out / "edge_noise.tsv").exists()
    assert (out / "edge_noise.dot").exists()
    assert (out / "run_meta.json").exists()
    lines = (out / "diagnostics.jsonl").read_text().strip().splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[0])
    assert set(rec) == {"epoch", "loss", "mean_kappa", "task_entropy", "neg_cond_entropy"}


def test_train_rerun_is_byte_identical(config_path, data_dir, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", str(config_path),
                     "--data", str(data_dir), "--out", str(out_a)]) == 0
    assert cli.main(["train", "--config", str(config_path),
                     "--data", str(data_dir), "--out", str(out_b)]) == 0
    assert (out_a / "diagnostics.jsonl").read_bytes() == (out_b / "diagnostics.jsonl").read_bytes()
    assert (out_a / "params.bin").read_bytes() == (out_b / "params.bin").read_bytes()


def test_seed_flag_overrides_config(config_path, data_dir, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    cli.main(["train", "--config", str(config_path), "--data", str(data_dir),
              "--out", str(out_a)])
    cli.main(["train", "--config", str(config_path), "--data", str(data_dir),
              "--out", str(out_b), "--seed", "99"])
    assert (out_a / "params.bin").read_bytes() != (out_b / "params.bin").read_bytes()


def test_seed_zero_flag_overrides_config(config_path, data_dir, tmp_path):
    # the config seed is 1; --seed 0 must not be dropped as falsy
    out_cfg, out_zero_a, out_zero_b = tmp_path / "c", tmp_path / "z1", tmp_path / "z2"
    cli.main(["train", "--config", str(config_path), "--data", str(data_dir),
              "--out", str(out_cfg)])
    for out in (out_zero_a, out_zero_b):
        cli.main(["train", "--config", str(config_path), "--data", str(data_dir),
                  "--out", str(out), "--seed", "0"])
    assert (out_zero_a / "params.bin").read_bytes() == (out_zero_b / "params.bin").read_bytes()
    assert (out_zero_a / "params.bin").read_bytes() != (out_cfg / "params.bin").read_bytes()


def test_out_dir_from_environment(config_path, data_dir, tmp_path, monkeypatch):
    out = tmp_path / "from_env"
    monkeypatch.setenv("PIGCL_OUT", str(out))
    rc = cli.main(["train", "--config", str(config_path), "--data", str(data_dir)])
    assert rc == 0
    assert (out / "params.bin").exists()


def test_gen_synth_roundtrip(tmp_path):
    out = tmp_path / "synth"
    rc = cli.main(["gen-synth", "--blocks", "2", "--size", "8", "--p-in", "0.6",
                   "--p-out", "0.1", "--shift", "1.0", "--feat-dim", "5",
                   "--seed", "3", "--out", str(out)])
    assert rc == 0
    g, splits = gr.load_graph(out)
    assert g.num_nodes == 16 and g.feat_dim == 5
    assert splits is not None

    out2 = tmp_path / "synth2"
    cli.main(["gen-synth", "--blocks", "2", "--size", "8", "--p-in", "0.6",
              "--p-out", "0.1", "--shift", "1.0", "--feat-dim", "5",
              "--seed", "3", "--out", str(out2)])
    assert (out / "edges.tsv").read_bytes() == (out2 / "edges.tsv").read_bytes()
    assert (out / "features.csv").read_bytes() == (out2 / "features.csv").read_bytes()


def test_gen_synth_edge_count_binomial(tmp_path):
    out = tmp_path / "synth"
    cli.main(["gen-synth", "--blocks", "2", "--size", "40", "--p-in", "0.4",
              "--p-out", "0.05", "--feat-dim", "4", "--seed", "1", "--out", str(out)])
    g, _ = gr.load_graph(out)
    intra_pairs = 2 * (40 * 39 // 2)
    inter_pairs = 40 * 40
    mean = 0.4 * intra_pairs + 0.05 * inter_pairs
    var = intra_pairs * 0.4 * 0.6 + inter_pairs * 0.05 * 0.95
    assert abs(g.num_edges - mean) < 4 * np.sqrt(var)


def test_gradcheck_tiny_scale_is_fast(capsys):
    import time
    start = time.perf_counter()
    rc = cli.main(["gradcheck", "--scale", "tiny"])
    elapsed = time.perf_counter() - start
    assert rc == 0
    out = capsys.readouterr().out
    assert "all 3 seeds ok" in out
    assert elapsed < 5.0


def test_gradcheck_injected_bug_exits_nonzero():
    assert cli.main(["gradcheck", "--inject-bug"]) != 0


def test_eval_command_single_repeat_zero_std(config_path, data_dir, tmp_path, capsys):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(config_path), "--data", str(data_dir),
              "--out", str(out)])
    rc = cli.main(["eval", "--checkpoint", str(out / "params.bin"),
                   "--data", str(data_dir), "--repeats", "1",
                   "--out", str(tmp_path / "evalout")])
    assert rc == 0
    report = json.loads((tmp_path / "evalout" / "report.json").read_text())
    assert report["std"] == 0.0
    assert len(report["accuracies"]) == 1
    assert 0.0 <= report["mean"] <= 1.0


def test_eval_with_explicit_split_file(config_path, data_dir, tmp_path):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(config_path), "--data", str(data_dir),
              "--out", str(out)])
    splits = gr.make_split(100, seed=5)
    split_file = tmp_path / "mysplits.json"
    split_file.write_text(json.dumps({
        "train": np.nonzero(splits.train)[0].tolist(),
        "val": np.nonzero(splits.val)[0].tolist(),
        "test": np.nonzero(splits.test)[0].tolist()}))
    rc = cli.main(["eval", "--checkpoint", str(out / "params.bin"),
                   "--data", str(data_dir), "--splits", str(split_file)])
    assert rc == 0


def test_eval_reruns_identically(config_path, data_dir, tmp_path):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(config_path), "--data", str(data_dir),
              "--out", str(out)])
    args = ["eval", "--checkpoint", str(out / "params.bin"), "--data", str(data_dir),
            "--repeats", "3", "--out", None]
    ra = tmp_path / "ea"
    rb = tmp_path / "eb"
    cli.main(args[:-1] + [str(ra)])
    cli.main(args[:-1] + [str(rb)])
    assert (ra / "report.json").read_bytes() == (rb / "report.json").read_bytes()


def test_ablate_grid_outputs(config_path, data_dir, tmp_path):
    out = tmp_path / "grid"
    rc = cli.main(["ablate", "--config", str(config_path), "--data", str(data_dir),
                   "--out", str(out), "--emit-latex"])
    assert rc == 0
    payload = json.loads((out / "report.json").read_text())
    assert len(payload["cells"]) == 9
    assert (out / "report.csv").exists()
    assert (out / "report.tex").exists()


def test_preset_resolves_by_bare_name():
    spec = cli.load_experiment_spec("cora")
    assert spec.cfg.epochs == 500


def test_preset_configs_parse():
    for preset in Path(cli.PRESET_DIR).glob("*.toml"):
        spec = cli.load_experiment_spec(preset)
        assert spec.cfg.epochs >= 500
        assert spec.cfg.lr_edge_gen == pytest.approx(1e-4)
        assert spec.cfg.lr_attr_gen == pytest.approx(1e-3)
        assert spec.cfg.wd_gens == pytest.approx(1e-4)
    cora = cli.load_experiment_spec(cli.PRESET_DIR / "cora.toml")
    assert cora.cfg.epochs == 500
    assert cora.cfg.lr_encoder == pytest.approx(5e-4)
    assert cora.cfg.wd_encoder == pytest.approx(1e-4)
    assert cora.cfg.tau == pytest.approx(0.3)
    assert cora.cfg.dims.hidden == 512
    assert cora.cfg.dims.embed == 256
