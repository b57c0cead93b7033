import json
import subprocess
import sys

import numpy as np
import pytest

from helpers import random_instance, standard_error, two_node
from nedmp.cli import main
from nedmp.graph import save_instance
from nedmp.models import NEDMP
from nedmp.simulate import MarginalTrajectory


@pytest.fixture
def files(tmp_path):
    save_instance(two_node(), tmp_path / "two_node.json")
    tree = random_instance("tree", 10, np.random.default_rng(4))
    save_instance(tree, tmp_path / "tree.json")
    return tmp_path


def _csv(path):
    return MarginalTrajectory.from_csv(path)


def test_simulate_two_node(files):
    out = files / "mc.csv"
    argv = ["simulate", "--instance", str(files / "two_node.json"), "--runs", "100000", "--mc-seed", "7"]
    assert main([*argv, "--out", str(out)]) == 0
    text = out.read_text().splitlines()
    assert text[0].startswith("# nedmp simulate --instance")
    assert text[1] == "t,node,ps,pi,pr"
    P = _csv(out)
    assert abs(P.ps[30, 1] - 1 / 3) <= 4 * standard_error(1 / 3, 100_000)


def test_dmp_then_eval_on_tree(files):
    inst = str(files / "tree.json")
    assert main(["simulate", "--instance", inst, "--runs", "100000", "--mc-seed", "1", "--out", str(files / "mc.csv")]) == 0
    assert main(["dmp", "--instance", inst, "--out", str(files / "dmp.csv")]) == 0
    argv = ["eval", "--instance", inst, "--pred", str(files / "dmp.csv"), "--labels", str(files / "mc.csv")]
    assert main([*argv, "--out", str(files / "l1.csv")]) == 0
    lines = (files / "l1.csv").read_text().splitlines()
    assert lines[0].startswith("# nedmp eval") and lines[1] == "instance,l1"
    assert float(lines[-1].split(",")[1]) <= 0.01


def test_identity_refine_matches_dmp(files):
    NEDMP(seed=3).save(files / "w.json")
    inst = str(files / "tree.json")
    main(["dmp", "--instance", inst, "--out", str(files / "d.csv")])
    argv = ["infer", "--model", "nedmp", "--ckpt", str(files / "w.json"), "--instance", inst, "--identity-refine"]
    assert main([*argv, "--out", str(files / "n.csv")]) == 0
    assert (files / "n.csv").read_text().splitlines()[1:] == (files / "d.csv").read_text().splitlines()[1:]


def test_horizon_flag(files):
    assert main(["dmp", "--instance", str(files / "two_node.json"), "--horizon", "4", "--out", str(files / "d.csv")]) == 0
    assert _csv(files / "d.csv").shape == (5, 2)


def test_gen_train_eval_pipeline(files):
    ds = files / "ds"
    gen = ["gen", "--out", str(ds), "--kind", "grid", "--size", "6", "--count", "5", "--runs", "500", "--horizon", "5"]
    assert main([*gen, "--data-seed", "3"]) == 0
    manifest = json.loads((ds / "manifest.json").read_text())
    assert [len(manifest["splits"][k]) for k in ("train", "val", "test")] == [3, 1, 1]
    ckpt = files / "g.json"
    train = ["train", "--model", "gnn", "--dataset", str(ds), "--out", str(ckpt), "--max-epochs", "2", "--hidden", "4"]
    assert main([*train, "--train-seed", "1", "--lambda", "5"]) == 0
    log = (files / "g.log.csv").read_text().splitlines()
    assert log[0].startswith("# nedmp train") and log[1] == "epoch,train_loss,val_loss,lr" and len(log) == 4
    assert json.loads(ckpt.read_text())["model_kind"] == "nodegnn"
    assert main(["eval", "--model", "gnn", "--ckpt", str(ckpt), "--dataset", str(ds), "--out", str(files / "e.csv")]) == 0
    rows = (files / "e.csv").read_text().splitlines()
    assert rows[-1].startswith("mean,")
    # the wrong model kind for a checkpoint is a data error
    assert main(["eval", "--model", "nedmp", "--ckpt", str(ckpt), "--dataset", str(ds)]) == 2


def test_commands_are_bit_reproducible(files):
    inst = str(files / "tree.json")
    for k in range(2):
        assert main(["simulate", "--instance", inst, "--runs", "3000", "--mc-seed", "5", "--out", str(files / f"s{k}.csv")]) == 0
    # only the provenance comment (which names the output file) may differ
    s0, s1 = ((files / f"s{k}.csv").read_text().splitlines() for k in range(2))
    assert s0[1:] == s1[1:]
    for k in range(2):
        gen = ["gen", "--out", str(files / f"d{k}"), "--count", "3", "--runs", "100", "--size", "5", "--data-seed", "2"]
        assert main(gen) == 0
    names = sorted(p.name for p in (files / "d0").iterdir())
    for name in names:
        a, b = (files / "d0" / name).read_text(), (files / "d1" / name).read_text()
        if name == "manifest.json":
            a, b = a.replace("d0", ""), b.replace("d1", "")
        assert a == b


@pytest.mark.parametrize(
    "argv, code",
    [
        ([], 1),
        (["bogus"], 1),
        (["simulate"], 1),
        (["simulate", "--instance", "x.json", "--runs", "many"], 1),
        (["infer", "--model", "svm", "--instance", "x.json"], 1),
        (["dmp", "--instance", "does_not_exist.json"], 2),
        (["infer", "--model", "nedmp", "--instance", "{TREE}"], 2),
        (["infer", "--model", "nedmp", "--instance", "{TREE}", "--ckpt", "missing.json"], 2),
        (["train", "--model", "gnn", "--dataset", "nowhere", "--out", "w.json"], 2),
        (["experiment", "--spec", "nowhere.json"], 2),
    ],
)
def test_exit_codes(files, argv, code):
    argv = [a.replace("{TREE}", str(files / "tree.json")) for a in argv]
    assert main(argv) == code


def test_schema_violation_is_data_error(files, capsys):
    doc = json.loads((files / "two_node.json").read_text())
    doc["gamma"] = [0.5]
    (files / "bad.json").write_text(json.dumps(doc))
    assert main(["dmp", "--instance", str(files / "bad.json")]) == 2
    assert "gamma" in capsys.readouterr().err


def test_numerical_failure_exit_code(files):
    m = NEDMP(seed=0)
    m.params["phi_r.b1"].value[:] = np.nan
    m.save(files / "nan.json")
    argv = ["eval", "--model", "nedmp", "--ckpt", str(files / "nan.json"), "--instance", str(files / "tree.json")]
    main(["simulate", "--instance", str(files / "tree.json"), "--runs", "100", "--out", str(files / "mc.csv")])
    assert main([*argv, "--labels", str(files / "mc.csv")]) == 3


def test_module_entry_point(files):
    proc = subprocess.run(
        [sys.executable, "-m", "nedmp", "dmp", "--instance", str(files / "two_node.json"), "--horizon", "2"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[1] == "t,node,ps,pi,pr"
