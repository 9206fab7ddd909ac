import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from masf import cli
from masf.data import DomainDataset, SampleSet, load_mdt, save_mdt

SMALL_SPEC = """
num_domains = 3
num_classes = 2
samples_per_class = 20
scales = 1.0, 1.5, 2.2
"""

TINY_TRAIN = """
# quick settings
alpha = 0.01
eta = 0.01
gamma = 0.01
max_iters = 8
eval_every = 4
batch_size = 8
num_triplets = 8
feature_dims = 32, 16
metric_dims = 16, 8
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "spec.cfg").write_text(SMALL_SPEC)
    (tmp_path / "train.cfg").write_text(TINY_TRAIN)
    assert cli.main(["generate", "--config", str(tmp_path / "spec.cfg"), "--out", str(tmp_path / "d.mdt")]) == 0
    return tmp_path


def test_no_arguments_is_usage_error(capsys):
    assert cli.main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert cli.main(["gradcheck", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err and "--bogus" in err


def test_bad_choice_is_usage_error(capsys):
    assert cli.main(["eval", "--method", "maml"]) == 1
    assert cli.main(["train", "--grad-mode", "second", "--out", "x"]) == 1


def test_gradcheck(capsys, tmp_path):
    assert cli.main(["gradcheck", "--out", str(tmp_path / "g.txt")]) == 0
    out = capsys.readouterr().out
    assert "masf_objective[exact]" in out
    worst = float(next(line for line in out.splitlines() if line.startswith("max")).split()[1])
    assert worst <= 1e-5
    assert (tmp_path / "g.txt").read_text() == out


def test_generate_writes_mdt(workspace):
    sets = load_mdt(workspace / "d.mdt")
    assert len(sets) == 3
    assert sum(len(d.train) + len(d.val) + len(d.test) for d in sets) == 3 * 40


def test_train_writes_checkpoint_and_report(workspace):
    out = workspace / "run"
    argv = ["train", "--data", str(workspace / "d.mdt"), "--config", str(workspace / "train.cfg"),
            "--seed", "2", "--target-domain", "0", "--out", str(out)]
    assert cli.main(argv) == 0
    lines = (out / "report.jsonl").read_text().splitlines()
    assert len(lines) == 8
    assert json.loads(lines[3])["val_acc"] is not None
    first = (out / "model.mgm").read_bytes()
    assert cli.main(argv) == 0
    assert (out / "model.mgm").read_bytes() == first


def test_train_deepall_and_exact_mode(workspace):
    base = ["train", "--data", str(workspace / "d.mdt"), "--config", str(workspace / "train.cfg")]
    assert cli.main(base + ["--method", "deepall", "--out", str(workspace / "a")]) == 0
    assert cli.main(base + ["--grad-mode", "exact", "--out", str(workspace / "b")]) == 0
    assert cli.main(base + ["--method", "masf", "--method", "deepall", "--out", str(workspace / "c")]) == 1
    assert cli.main(base + ["--target-domain", "9", "--out", str(workspace / "c")]) == 1


def test_eval_emits_table_and_csv(workspace, capsys):
    out = workspace / "eval"
    argv = ["eval", "--data", str(workspace / "d.mdt"), "--config", str(workspace / "train.cfg"),
            "--method", "masf", "--method", "deepall", "--seed", "1", "--out", str(out)]
    assert cli.main(argv) == 0
    printed = capsys.readouterr().out
    table = (out / "table.txt").read_text()
    assert printed.startswith(table)
    assert table.splitlines()[0].split("|")[0].strip() == "Source"
    assert len(table.splitlines()) == 2 + 3 + 1  # header, rule, 3 folds, single-seed note
    rows = list(csv.DictReader(io.StringIO((out / "comparison.csv").read_text())))
    assert [r["target_domain"] for r in rows] == ["0", "1", "2"]
    per_seed = list(csv.DictReader(io.StringIO((out / "per_seed.csv").read_text())))
    assert {r["method"] for r in per_seed} == {"masf", "deepall"}


def test_eval_single_method_and_fold(workspace, capsys):
    argv = ["eval", "--data", str(workspace / "d.mdt"), "--config", str(workspace / "train.cfg"),
            "--method", "deepall", "--seed", "1", "--target-domain", "2"]
    assert cli.main(argv) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 1 and rows[0]["target_domain"] == "2"


def test_export_embeddings(workspace):
    run = workspace / "run"
    assert cli.main(["train", "--data", str(workspace / "d.mdt"), "--config", str(workspace / "train.cfg"),
                     "--out", str(run)]) == 0
    dump = workspace / "emb.jsonl"
    assert cli.main(["export-embeddings", "--data", str(workspace / "d.mdt"), "--model", str(run / "model.mgm"),
                     "--target-domain", "1", "--out", str(dump)]) == 0
    lines = dump.read_text().splitlines()
    assert "task_head" in json.loads(lines[0])
    assert len(lines) - 1 == len(load_mdt(workspace / "d.mdt")[1].test)
    assert cli.main(["export-embeddings", "--data", str(workspace / "d.mdt"), "--model", str(run / "model.mgm"),
                     "--out", str(workspace / "all.jsonl")]) == 0
    domains = {json.loads(line)["domain"] for line in (workspace / "all.jsonl").read_text().splitlines()[1:]}
    assert domains == {0, 1, 2}


def test_numeric_error_exit_code(tmp_path, capsys):
    rng = np.random.default_rng(0)

    def part(n):
        return SampleSet(rng.normal(size=(n, 3)) * 1e300, np.arange(n) % 2)

    save_mdt([DomainDataset(k, part(12), part(12), part(4)) for k in range(3)], tmp_path / "huge.mdt")
    (tmp_path / "t.cfg").write_text(TINY_TRAIN)
    with np.errstate(all="ignore"):
        code = cli.main(["train", "--data", str(tmp_path / "huge.mdt"), "--config", str(tmp_path / "t.cfg"),
                         "--out", str(tmp_path / "r")])
    assert code == 2
    assert "numeric" in capsys.readouterr().err
    with np.errstate(all="ignore"):
        code = cli.main(["eval", "--data", str(tmp_path / "huge.mdt"), "--config", str(tmp_path / "t.cfg"),
                         "--seed", "1", "--target-domain", "0"])
    assert code == 2


def test_corrupt_data_is_usage_error(tmp_path, capsys):
    (tmp_path / "bad.mdt").write_bytes(b"nope")
    assert cli.main(["train", "--data", str(tmp_path / "bad.mdt"), "--out", str(tmp_path / "r")]) == 1
    assert "magic" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "masf"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "usage" in proc.stderr
