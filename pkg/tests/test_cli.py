import hashlib
from pathlib import Path

import pytest
from click.testing import CliRunner

from vlrr import cli
from vlrr.cli import main, run_cli
from vlrr.dataset_io import load_dataset

PLAN = """variant = {variant}
seed = 1
out = {out}
data.train = data/train.vlrd
data.test = data/test.vlrd
network.n = 4,4,4
network.m4 = 16
network.m5 = 4
pretrain.epochs = 1
pretrain.batch_size = 32
finetune.epochs = 2
finetune.batch_size = 32
finetune.lr = 0.01
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    res = CliRunner().invoke(
        main, ["synth", "--classes", "4", "--per-class", "20", "--train", "64", "--out", str(root / "data")]
    )
    assert res.exit_code == 0, res.output
    return root


def write_plan(root: Path, variant: str, out: str, extra: str = "") -> Path:
    p = root / f"{out}.plan"
    p.write_text(PLAN.format(variant=variant, out=out) + extra)
    return p


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_prepare_manifest_and_checksums(workspace, tmp_path):
    args = ["prepare", "--input", str(workspace / "data/train.vlrd"), "--sp-fraction", "0.15", "--seed", "4"]
    r1 = CliRunner().invoke(main, args + ["--out", str(tmp_path / "a")])
    r2 = CliRunner().invoke(main, args + ["--out", str(tmp_path / "b")])
    assert r1.exit_code == 0 and r2.exit_code == 0
    assert "corrupted_pixels_per_image = 154" in r1.output
    assert r1.output.replace(str(tmp_path / "a"), "") == r2.output.replace(str(tmp_path / "b"), "")
    for name in ("hr.vlrd", "hr_corrupted.vlrd", "lr.vlrd", "pairs.vlrp"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)
        assert f"sha256.{name} = {sha(tmp_path / 'a' / name)}" in r1.output
    lr = load_dataset(tmp_path / "a" / "lr.vlrd")
    assert lr.images.shape[2:] == (8, 8)


def test_missing_input_exit_code_2(tmp_path):
    assert run_cli(["prepare", "--input", str(tmp_path / "nope.vlrd"), "--out", str(tmp_path / "o")]) == 2


def test_bad_plan_exit_code_2(workspace):
    plan = write_plan(workspace, "III", "bad", "coupling.c = 0.5,0.5,0.5\n")
    assert run_cli(["run", "--plan", str(plan)]) == 2
    assert run_cli(["run", "--plan", str(workspace / "missing.plan")]) == 2
    assert run_cli(["run"]) == 2  # usage error


def test_internal_error_exit_code_1(workspace, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("kaboom")

    monkeypatch.setattr(cli.harness, "run_plan", boom)
    assert run_cli(["run", "--plan", str(write_plan(workspace, "I", "x"))]) == 1


def test_run_layout_and_determinism(workspace):
    plan = write_plan(workspace, "IV", "iv")
    assert run_cli(["run", "--plan", str(plan), "--out", str(workspace / "iv_a")]) == 0
    assert run_cli(["run", "--plan", str(plan), "--out", str(workspace / "iv_b")]) == 0
    names = sorted(p.name for p in (workspace / "iv_a").iterdir())
    assert names == ["decoupled.vlrc", "metrics.csv", "model.vlrc", "plan.txt", "pretrained.vlrc", "report.txt"]
    for name in ("metrics.csv", "model.vlrc", "pretrained.vlrc", "decoupled.vlrc"):
        assert sha(workspace / "iv_a" / name) == sha(workspace / "iv_b" / name)
    header = (workspace / "iv_a" / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,phase,loss,top1,top5,lr"


def test_model_iii_equals_iv_full_coupling(workspace):
    iii = write_plan(workspace, "III", "iii")
    iv = write_plan(workspace, "IV", "ivfull", "coupling.c = 1,1,1\n")
    assert run_cli(["run", "--plan", str(iii)]) == 0
    assert run_cli(["run", "--plan", str(iv)]) == 0
    for name in ("model.vlrc", "decoupled.vlrc", "pretrained.vlrc", "metrics.csv"):
        assert sha(workspace / "iii" / name) == sha(workspace / "ivfull" / name)


def test_eval_dual_checkpoint_on_lr_only_data(workspace, tmp_path):
    plan = write_plan(workspace, "V", "v")
    assert run_cli(["run", "--plan", str(plan)]) == 0
    prep = tmp_path / "prep"
    assert run_cli(["prepare", "--input", str(workspace / "data/test.vlrd"), "--out", str(prep)]) == 0
    res = CliRunner().invoke(
        main, ["eval", "--checkpoint", str(workspace / "v/model.vlrc"), "--data", str(prep / "lr.vlrd"),
               "--out", str(tmp_path / "ev")]
    )
    assert res.exit_code == 0, res.output
    assert "top1 = " in res.output and "top5" not in res.output  # 4 classes
    assert (tmp_path / "ev" / "eval.txt").read_text() == res.output


def test_eval_topology_mismatch(workspace, tmp_path):
    plan = write_plan(workspace, "I", "i")
    assert run_cli(["run", "--plan", str(plan)]) == 0
    CliRunner().invoke(main, ["synth", "--classes", "3", "--per-class", "2", "--out", str(tmp_path / "d3")])
    code = run_cli(["eval", "--checkpoint", str(workspace / "i/model.vlrc"), "--data", str(tmp_path / "d3/test.vlrd")])
    assert code == 2


def test_search_with_oracle(workspace):
    plan = write_plan(workspace, "IV", "search")
    res = CliRunner().invoke(main, ["search", "--plan", str(plan), "--oracle", "l1"])
    assert res.exit_code == 0, res.output
    rows = (workspace / "search" / "search.csv").read_text().splitlines()
    assert rows[0] == "k1,k2,k3,c1,c2,c3,top1_error"
    assert "best.c = 0.50,0.75,0.75" in res.output
    assert f"trials = {len(rows) - 1}" in res.output
    errors = [float(r.split(",")[-1]) for r in rows[1:]]
    best_row = rows[1 + errors.index(min(errors))]
    assert best_row.startswith("2,3,3,0.50,0.75,0.75,")


def test_search_rejects_single_channel_variant(workspace):
    assert run_cli(["search", "--plan", str(write_plan(workspace, "II", "s2")), "--oracle", "l1"]) == 2


def test_selfcheck_quick():
    res = CliRunner().invoke(main, ["selfcheck", "--quick"])
    assert res.exit_code == 0, res.output
    assert "FAIL" not in res.output and res.output.count("PASS") >= 10
