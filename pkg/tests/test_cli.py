import numpy as np
import pytest

from ticl import cli
from ticl.checkpoint import decode, load_checkpoint
from ticl.metrics import parse_ablation_csv

CONFIG = """
scenario = "custom"
classes_per_step = [2, 2]
dataset = "synthetic"
class_count = 4
per_class = 12
test_per_class = 6
preset = "tiny"
epochs = 1
batch_size = 8
seed = 1
"""


@pytest.fixture
def run_dir(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(CONFIG)
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return tmp_path, cfg, out


def test_train_smoke(run_dir):
    _, _, out = run_dir
    ckpts = sorted((out / "checkpoints").iterdir())
    assert [p.name for p in ckpts] == ["step_01.ticl", "step_02.ticl"]
    for name in ("accuracy.csv", "summary.csv", "losses.csv", "accuracy.svg", "bwt.svg"):
        assert (out / name).stat().st_size > 0
    assert (out / "bwt.svg").read_text().startswith("<svg")


def test_rerun_is_byte_identical(run_dir):
    tmp, cfg, out = run_dir
    again = tmp / "again"
    assert cli.main(["train", "--config", str(cfg), "--out", str(again)]) == 0
    for name in ("accuracy.csv", "summary.csv", "losses.csv"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(CONFIG)
    c = cli.load_config(cfg, {"lambda": 0.25, "seed": 9, "scenario": None})
    assert c.lam == 0.25 and c.seed == 9 and c.scenario == "custom"


@pytest.mark.parametrize("extra", [["--epochs", "0"], ["--scenario", "b9-9"], ["--preset", "huge"],
                                   ["--lambda", "-1"], ["--classes-per-step", "2,3"]])
def test_invalid_config_exit_2(tmp_path, extra):
    cfg = tmp_path / "run.toml"
    cfg.write_text(CONFIG)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), *extra]) == 2
    assert not (tmp_path / "o").exists()


def test_unknown_key_exit_2(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(CONFIG + "\nwarmup = 3\n")
    assert cli.main(["train", "--config", str(cfg)]) == 2


def test_missing_dataset_exit_3_without_outputs(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('dataset = "cifar100"\npreset = "full"\nscenario = "b0-5"\ndata_dir = "nowhere"\n')
    out = tmp_path / "o"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 3
    assert not out.exists()


def test_eval_matches_in_memory(run_dir, capsys):
    _, cfg, out = run_dir
    ckpt = out / "checkpoints" / "step_02.ticl"
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--mode", "task-il"]) == 0
    task_il = capsys.readouterr().out
    acc = (out / "accuracy.csv").read_text().splitlines()
    # the step-2 rows of accuracy.csv are the same numbers
    assert [l.split(",")[2] for l in acc if l.startswith("2,")] == \
           [l.split(",")[2] for l in task_il.splitlines()[1:3]]
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--mode", "class-il"]) == 0
    class_il = capsys.readouterr().out
    overall = lambda text: float(text.splitlines()[-1].split(",")[2])
    assert overall(class_il) <= overall(task_il)


def test_ablate(run_dir, capsys):
    _, _, out = run_dir
    ckpt = out / "checkpoints" / "step_02.ticl"
    capsys.readouterr()
    assert cli.main(["ablate", "--checkpoint", str(ckpt)]) == 0
    text = capsys.readouterr().out
    tasks, grid = parse_ablation_csv(text)
    assert grid.shape == (2, 2)
    assert (out / "checkpoints" / "ablation.csv").read_text() == text
    assert cli.main(["eval", "--checkpoint", str(ckpt)]) == 0
    evals = [float(l.split(",")[2]) for l in capsys.readouterr().out.splitlines()[1:3]]
    np.testing.assert_array_equal(np.diag(grid), np.round(evals, 6))
    assert cli.main(["ablate", "--checkpoint", str(out / "checkpoints" / "step_01.ticl")]) == 2


def test_forget(run_dir, tmp_path, capsys):
    _, _, out = run_dir
    ckpt = out / "checkpoints" / "step_02.ticl"
    dest = tmp_path / "f.ticl"
    assert cli.main(["forget", "--checkpoint", str(ckpt), "--task", "1", "--out", str(dest)]) == 0
    before, _ = decode(ckpt.read_bytes())
    after, meta = decode(dest.read_bytes())
    removed = {n for n, _ in before} - {n for n, _ in after}
    assert removed == {"token.1", "head.1.layers.0.weight", "head.1.layers.0.bias"}
    kept = dict(after)
    assert all(kept[n].tobytes() == a.tobytes() for n, a in before if n in kept)
    assert meta["forgotten"] == [1]
    a, _ = load_checkpoint(ckpt)
    b, _ = load_checkpoint(dest)
    x = np.random.default_rng(0).normal(size=(8, 3, 8, 8)).astype(np.float32)
    assert a.logits(x, 2).tobytes() == b.logits(x, 2).tobytes()
    assert cli.main(["forget", "--checkpoint", str(dest), "--task", "1"]) == 2
    empty = tmp_path / "e.ticl"
    assert cli.main(["forget", "--checkpoint", str(dest), "--task", "2", "--out", str(empty)]) == 0
    assert cli.main(["eval", "--checkpoint", str(empty)]) == 2


def test_corrupt_checkpoint_exit_5(run_dir, tmp_path):
    _, _, out = run_dir
    bad = tmp_path / "bad.ticl"
    bad.write_bytes((out / "checkpoints" / "step_01.ticl").read_bytes()[:100])
    assert cli.main(["eval", "--checkpoint", str(bad)]) == 5
    assert cli.main(["ablate", "--checkpoint", str(tmp_path / "none.ticl")]) == 5


def test_thread_env(run_dir, monkeypatch):
    _, cfg, out = run_dir
    ckpt = out / "checkpoints" / "step_02.ticl"
    monkeypatch.setenv("TICL_NUM_THREADS", "1")
    assert cli.main(["eval", "--checkpoint", str(ckpt)]) == 0
    monkeypatch.setenv("TICL_NUM_THREADS", "zero")
    assert cli.main(["eval", "--checkpoint", str(ckpt)]) == 2
