import csv
import subprocess
import sys

import pytest

from fmocc.bench import read_bench
from fmocc.cli import main
from fmocc.config import RunConfig
from fmocc.metrics import parse_document
from fmocc.scene import load_scene

TINY = {
    "scene": {"dims": [12, 12, 4], "ego": [6, 6, 2], "num_boxes": 3},
    "data": {"n_train": 3, "n_test": 2},
    "model": {"depth": 1, "state_size": 4, "scan_chunk": 16},
    "train": {"epochs": 2, "batch_size": 2, "checkpoint_every": 1},
    "eval": {"n_azimuth": 16, "n_elevation": 2, "mask_ratios": [0.0, 0.5]},
    "bench": {"scan_lengths": [64, 128], "euler_steps": [1, 2], "repeats": 1},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.yaml"
    RunConfig.from_dict(TINY).save(cfg_path)
    assert main(["gen", "--config", str(cfg_path), "--out", str(root / "train")]) == 0
    assert main(["--config", str(cfg_path), "gen", "--split", "test",
                 "--out", str(root / "test")]) == 0
    assert main(["train", "--config", str(cfg_path), "--data", str(root / "train"),
                 "--out", str(root / "run")]) == 0
    return root, cfg_path


def test_gen_writes_scenes_and_manifest(workspace, tmp_path):
    root, cfg_path = workspace
    assert sorted(p.name for p in (root / "train").glob("*.fmoc")) == \
        ["scene_0.fmoc", "scene_1.fmoc", "scene_2.fmoc"]
    assert main(["gen", "--config", str(cfg_path), "--n", "2", "--out", str(tmp_path)]) == 0
    import json
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1]
    assert manifest["scene_hash"] == RunConfig.load(cfg_path).scene_hash()
    for s in (0, 1):
        assert (tmp_path / f"scene_{s}.fmoc").read_bytes() == \
            (root / "train" / f"scene_{s}.fmoc").read_bytes()


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    for name in ("config.yaml", "config.hash", "log.csv", "final.fmck"):
        assert (run / name).exists(), name
    assert sorted(p.name for p in run.glob("ckpt_step*.fmck")) == ["ckpt_step2.fmck",
                                                                   "ckpt_step4.fmck"]
    rows = list(csv.DictReader(open(run / "log.csv")))
    assert list(rows[0]) == ["step", "epoch", "flow_loss", "ce_loss", "p_drop"]
    assert len(rows) == 4
    assert float(rows[0]["p_drop"]) == 0.0 and float(rows[-1]["p_drop"]) == 0.25


def test_train_is_reproducible_and_resumable(workspace, tmp_path):
    root, cfg_path = workspace
    base = ["train", "--config", str(cfg_path), "--data", str(root / "train")]
    assert main(base + ["--out", str(tmp_path / "a"), "--stop-after", "1"]) == 0
    assert (tmp_path / "a" / "ckpt_step1.fmck").exists()
    # resume picks the config snapshot up from the run directory
    assert main(["train", "--data", str(root / "train"), "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "final.fmck").read_bytes() == \
        (root / "run" / "final.fmck").read_bytes()
    assert (tmp_path / "a" / "log.csv").read_text() == (root / "run" / "log.csv").read_text()


def test_train_refuses_mismatched_manifest(workspace, tmp_path, capsys):
    root, cfg_path = workspace
    code = main(["train", "--config", str(cfg_path), "--set", "scene.num_boxes=5",
                 "--data", str(root / "train"), "--out", str(tmp_path)])
    assert code == 2
    assert "hash" in capsys.readouterr().err


def test_eval_sweep_and_documents(workspace):
    root, _ = workspace
    out = root / "eval"
    assert main(["eval", "--checkpoint", str(root / "run" / "final.fmck"),
                 "--data", str(root / "test"), "--out", str(out)]) == 0
    for r in ("0.00", "0.50"):
        doc = parse_document((out / f"metrics_mask{r}.txt").read_text())
        assert 0 <= doc["miou"] <= 1 and doc["mask_ratio"] == float(r)
    sweep = list(csv.DictReader(open(out / "sweep.csv")))
    assert [float(r["mask_ratio"]) for r in sweep] == [0.0, 0.5]
    per_scene = list(csv.DictReader(open(out / "per_scene.csv")))
    assert len(per_scene) == 4


def test_eval_fully_masked_input_is_valid(workspace, tmp_path):
    root, _ = workspace
    assert main(["eval", "--checkpoint", str(root / "run" / "final.fmck"), "--data",
                 str(root / "test"), "--mask-ratio", "1.0", "--out", str(tmp_path)]) == 0
    doc = parse_document((tmp_path / "metrics_mask1.00.txt").read_text())
    assert all(0 <= doc[k] <= 1 for k in ("miou", "rayiou.1m", "rayiou.2m", "rayiou.4m"))


def test_eval_lists_missing_seeds(workspace, tmp_path, capsys):
    root, _ = workspace
    data = tmp_path / "data"
    data.mkdir()
    for p in (root / "test").iterdir():
        (data / p.name).write_bytes(p.read_bytes())
    (data / "scene_100000.fmoc").unlink()
    code = main(["eval", "--checkpoint", str(root / "run" / "final.fmck"), "--data", str(data),
                 "--out", str(tmp_path / "e")])
    assert code == 2
    assert "100000" in capsys.readouterr().err


def test_infer_writes_prediction(workspace, tmp_path):
    root, _ = workspace
    out = tmp_path / "pred.fmoc"
    assert main(["infer", "--checkpoint", str(root / "run" / "final.fmck"),
                 "--scene", str(root / "test" / "scene_100000.fmoc"), "--out", str(out)]) == 0
    pred, src = load_scene(out), load_scene(root / "test" / "scene_100000.fmoc")
    assert pred.labels.shape == src.labels.shape


def test_bench_row_set(workspace, tmp_path):
    _, cfg_path = workspace
    assert main(["bench", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
    rows = read_bench(tmp_path / "bench.csv")
    assert [(r.kind, r.size) for r in rows] == [("ssm_scan", 64), ("ssm_scan", 128),
                                                ("infer", 1), ("infer", 2)]
    assert all(r.seconds > 0 and r.peak_bytes > 0 for r in rows)


def test_plot_single_and_overlay_byte_stable(workspace, tmp_path):
    root, _ = workspace
    files = sorted(str(p) for p in (root / "eval").glob("metrics_mask*.txt"))
    if not files:
        pytest.skip("eval artifacts not produced")
    assert main(["plot", *files, "--out", str(tmp_path / "one")]) == 0
    assert (tmp_path / "one" / "mask_ratio_miou.png").exists()
    args = ["plot", "--series", "mt=" + ",".join(files), "--series", "no_mt=" + ",".join(files),
            "--log", f"mt={root / 'run' / 'log.csv'}"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("mask_ratio_miou.png", "losses.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_plot_malformed_metrics_names_key(tmp_path, capsys):
    bad = tmp_path / "m.txt"
    bad.write_text("miou = 0.5\nmask_ratio = 0.1\n")
    assert main(["plot", str(bad), "--out", str(tmp_path)]) == 2
    assert "rayiou.1m" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["gen", "--set", "scene.nope=1"],
    ["gen", "--set", "scene.dims=[1,4,4]", "--n", "1"],
    ["eval", "--checkpoint", "missing.fmck", "--data", "."],
])
def test_contract_violations_exit_nonzero(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path / "o")]) != 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fmocc.cli", "gen", "--n", "1", "--set",
                           "scene.dims=[8,8,4]", "--set", "scene.ego=[4,4,2]",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "scene_0.fmoc").exists()
    bad = subprocess.run([sys.executable, "-m", "fmocc.cli", "train", "--data", str(tmp_path),
                          "--set", "bogus=1"], capture_output=True, text=True)
    assert bad.returncode == 2
