import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hiendmae.cli import main
from hiendmae.diagnostics import read_pgm
from hiendmae.volume_io import load_rvol

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.json"

TINY = {
    "output_dir": "unused",
    "train": {"total_steps": 6, "warmup_steps": 1, "batch_size": 1},
    "encoder": {"patch_size": 4, "embed_dim": 24, "depth": 2, "heads": 2, "tap_layers": [1, 2]},
    "decoder": {"dec_dim": 12, "heads": 2, "n_self": 1, "n_cross": 2},
    "data": {"synth_count": 1, "synth_dims": [16, 16, 16], "crop": [12, 12, 12]},
}


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    code = main(["pretrain", "--config", str(DESK), "--out", str(out)])
    return code, out, time.perf_counter() - t0


def _tiny(tmp_path, **train):
    cfg = json.loads(json.dumps(TINY))
    cfg["train"].update(train)
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg))
    return path


def test_synth_writes_volumes_and_manifest(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "a"), "--count", "4", "--dims", "32,32,32", "--seed", "5"]) == 0
    files = sorted((tmp_path / "a").glob("*.rvol"))
    assert len(files) == 4 and all(load_rvol(f).dims == (32, 32, 32) for f in files)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert [v["seed"] for v in manifest["volumes"]] == [5, 6, 7, 8]
    assert "wrote 4 volumes" in capsys.readouterr().out


def test_synth_same_seed_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--count", "2", "--dims", "8,8,8"]) == 0
    for f in ("vol_0000.rvol", "vol_0001.rvol", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("dims", ["0,1,1", "1,2", "a,b,c"])
def test_synth_bad_dims(tmp_path, capsys, dims):
    assert main(["synth", "--out", str(tmp_path), "--dims", dims]) == 2
    assert "--dims" in capsys.readouterr().err


def test_synth_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub"), "--count", "1", "--dims", "4,4,4"]) == 3


def test_unknown_flag_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["synth", "--out", "x", "--bogus"])
    assert info.value.code == 2


def test_pretrain_tiny_and_resume(tmp_path, capsys):
    cfg = _tiny(tmp_path)
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out), "--steps", "3"]) == 0
    assert "step 3/6" in capsys.readouterr().out
    assert main(["pretrain", "--config", str(cfg), "--out", str(out), "--resume", str(out / "checkpoint.hemc")]) == 0
    assert "step 6/6 final loss" in capsys.readouterr().out
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and [int(l.split(",")[0]) for l in lines[1:]] == list(range(6))
    assert (out / "loss.png").stat().st_size > 0
    # the resumed run logged the same losses as a straight run
    straight = tmp_path / "straight"
    assert main(["pretrain", "--config", str(cfg), "--out", str(straight)]) == 0
    assert (straight / "metrics.csv").read_text() == (out / "metrics.csv").read_text()


def test_pretrain_resume_final_checkpoint_exits(tmp_path, capsys):
    cfg = _tiny(tmp_path)
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "again"),
                 "--resume", str(out / "checkpoint.hemc")]) == 0
    assert "step 6 = total_steps" in capsys.readouterr().out


def test_pretrain_bad_ratio(tmp_path, capsys):
    assert main(["pretrain", "--config", str(_tiny(tmp_path, mask_ratio=1.0))]) == 2
    assert "mask_ratio" in capsys.readouterr().err


def test_pretrain_unknown_key(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lr": 1.0}}))
    assert main(["pretrain", "--config", str(path)]) == 2


def test_pretrain_missing_config(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "nope.json")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretrain_non_finite_exit_4(tmp_path, capsys):
    assert main(["pretrain", "--config", str(_tiny(tmp_path, base_lr=1e30)), "--out", str(tmp_path / "o")]) == 4
    assert "step" in capsys.readouterr().err


def test_desk_pretrain_smoke(desk_run):
    code, out, seconds = desk_run
    assert code == 0 and seconds < 300
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and len(lines) == 201
    assert json.loads((out / "config.json").read_text())["encoder"]["depth"] == 8


def test_diagnose_desk_checkpoint(desk_run, tmp_path, capsys):
    _, run, _ = desk_run
    args = ["diagnose", "--checkpoint", str(run / "checkpoint.hemc"), "--probe-count", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    rows = (tmp_path / "a" / "spectra.csv").read_text().splitlines()[1:]
    for vol in (0, 1):
        assert sum(r.startswith(f"{vol},") for r in rows) == 8
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for f in ("spectra.csv", "spectra.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_attnmap_desk_checkpoint(desk_run, tmp_path, capsys):
    _, run, _ = desk_run
    out = tmp_path / "maps"
    assert main(["attnmap", "--checkpoint", str(run / "checkpoint.hemc"), "--query", "0", "--layer", "1",
                 "--out", str(out)]) == 0
    probs = np.loadtxt(out / "attn_layer1.csv", delimiter=",", skiprows=1)[:, -1]
    assert abs(probs.sum() - 1.0) < 1e-5
    pgms = sorted(out.glob("attn_layer1_slice*.pgm"))
    assert len(pgms) == 4
    pix = np.stack([read_pgm(p) for p in pgms]).astype(np.float64)
    assert pix.max() == 255
    assert abs((pix / 255.0 * probs.max()).sum() - 1.0) < probs.size * 0.5 / 255.0 * probs.max()
    assert "map sum 1.000000" in capsys.readouterr().out


def test_attnmap_bad_query(desk_run, tmp_path):
    _, run, _ = desk_run
    assert main(["attnmap", "--checkpoint", str(run / "checkpoint.hemc"), "--query", "64",
                 "--out", str(tmp_path)]) == 2


def test_unreadable_checkpoint(tmp_path):
    bad = tmp_path / "bad.hemc"
    bad.write_bytes(b"garbage")
    assert main(["diagnose", "--checkpoint", str(bad), "--out", str(tmp_path / "d")]) == 3
    assert main(["attnmap", "--checkpoint", str(tmp_path / "missing.hemc"), "--out", str(tmp_path / "d")]) == 3


def test_flops_similarity_ratio(tmp_path, capsys):
    assert main(["flops", "--gamma", "0.75", "--gamma", "0.0", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "similarity ratio gamma=0.75 vs gamma=0.0: 0.25" in out
    assert out.startswith("# 1 MAC = 1 multiply-add")
    assert (tmp_path / "flops.csv").exists() and (tmp_path / "flops_stages.png").exists()


def test_flops_full_stage_sweep(capsys):
    assert main(["flops", "--preset", "full", "--gamma", "0.75"]) == 0
    out = capsys.readouterr().out.splitlines()
    start = out.index("cross_stages,self_blocks,decoder_macs")
    totals = [int(l.split(",")[2]) for l in out[start + 1:]]
    assert len(totals) == 4 and all(a > b for a, b in zip(totals, totals[1:]))


def test_flops_bad_gamma():
    assert main(["flops", "--gamma", "1.5"]) == 2


def test_bench_small(tmp_path, capsys):
    cfg = tmp_path / "b.json"
    cfg.write_text(json.dumps({"encoder": {"patch_size": 4, "embed_dim": 12, "depth": 2, "heads": 2,
                                           "tap_layers": [1, 2]},
                               "decoder": {"dec_dim": 12, "heads": 2, "n_cross": 2},
                               "data": {"crop": [8, 8, 16]}}))
    assert main(["bench", "--config", str(cfg), "--reps", "2", "--warmup", "1", "--gamma", "0.5",
                 "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("# threads=1") and len(lines) == 4


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("HIENDMAE_THREADS", "0")
    assert main(["flops"]) == 2
    monkeypatch.setenv("HIENDMAE_THREADS", "1")
    assert main(["flops"]) == 0


def test_help_lists_defaults():
    for cmd in ("synth", "pretrain", "diagnose", "attnmap", "flops", "bench"):
        res = subprocess.run([sys.executable, "-m", "hiendmae.cli", cmd, "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        assert "default" in res.stdout or cmd == "pretrain"
    res = subprocess.run([sys.executable, "-m", "hiendmae.cli", "synth", "--help"], capture_output=True, text=True)
    assert "(default: 32,32,32)" in res.stdout and "--count" in res.stdout
