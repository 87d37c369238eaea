import io

import numpy as np
import pytest

from partco.cli import run
from partco.features import read_features
from partco.partlabels import read_store

SMALL = ["--set", "num_classes=6", "--set", "old_classes=3", "--set", "images_per_class=6"]


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    code, _, err = call("gen", "--preset", "fine_grained", "--out", d, "--seed", 2, *SMALL)
    assert code == 0, err
    return d


def test_no_arguments_prints_usage_and_exits_1():
    code, _, err = call()
    assert code == 1 and "usage" in err


def test_help_for_each_subcommand():
    for sub in ("gen", "build-labels", "train", "eval", "gradcheck", "ablate"):
        with pytest.raises(SystemExit) as info:
            run([sub, "--help"], io.StringIO(), io.StringIO())
        assert info.value.code == 0


def test_gen_writes_three_files(dataset):
    assert read_features(dataset / "dataset.ptcf").num_images == 36
    assert (dataset / "dataset.csv").read_text().startswith("image_id,class_id,labeled\n")
    truth = read_store(dataset / "dataset.truth")
    assert truth.order == "both"


def test_full_pipeline(dataset, tmp_path):
    f, m = dataset / "dataset.ptcf", dataset / "dataset.csv"
    plm = tmp_path / "l.plm"
    code, out, err = call("build-labels", "--features", f, "--manifest", m, "--order", "both",
                          "--out", plm, "--ppm-dir", tmp_path / "ppm", "--ppm-count", 2)
    assert code == 0, err
    assert read_store(plm).order == "both"
    assert len(list((tmp_path / "ppm").glob("*.ppm"))) == 4
    ck = tmp_path / "run" / "c.pckp"  # output directories are created on demand
    code, out, err = call("train", "--features", f, "--manifest", m, "--labels", plm,
                          "--order", "both", "--epochs", 2, "--set", "batch_size=16",
                          "--out", ck, "--history", tmp_path / "run" / "h.csv")
    assert code == 0, err
    lines = (tmp_path / "run" / "h.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,rep_unsup") and len(lines) == 3
    csv_path = tmp_path / "acc.csv"
    code, out, err = call("eval", "--features", f, "--manifest", m, "--checkpoint", ck,
                          "--csv", csv_path)
    assert code == 0, err
    assert [ln.split()[0] for ln in out.splitlines()[2:]] == ["All", "Old", "New"]
    assert csv_path.read_text().splitlines()[0] == "split,acc,count"


def test_train_order_off_without_labels(dataset, tmp_path):
    code, _, err = call("train", "--features", dataset / "dataset.ptcf", "--manifest",
                        dataset / "dataset.csv", "--order", "off", "--epochs", 1,
                        "--out", tmp_path / "c.pckp")
    assert code == 0, err


def test_config_file_and_flag_precedence(dataset, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=5\nbatch_size=16\norder=off\n")
    ck = tmp_path / "c.pckp"
    code, out, err = call("train", "--features", dataset / "dataset.ptcf", "--manifest",
                          dataset / "dataset.csv", "--config", cfg, "--epochs", 1, "--out", ck)
    assert code == 0, err
    assert "trained 1 epochs" in out


@pytest.mark.parametrize("argv,code", [
    (["train", "--features", "missing.ptcf", "--manifest", "x.csv", "--out", "c"], 2),
    (["gen", "--preset", "bogus", "--out", "x"], 1),
    (["gradcheck", "--loss", "nope"], 1),
    (["frobnicate"], 1),
])
def test_exit_codes(argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert call(*argv)[0] == code


def test_unknown_config_key_is_validation_error(dataset, tmp_path):
    code, _, err = call("train", "--features", dataset / "dataset.ptcf", "--manifest",
                        dataset / "dataset.csv", "--set", "bogus=1", "--out", tmp_path / "c")
    assert code == 1 and "unknown key" in err


def test_corrupt_feature_file_exit_2(dataset, tmp_path):
    bad = tmp_path / "bad.ptcf"
    bad.write_bytes((dataset / "dataset.ptcf").read_bytes()[:-5])
    code, _, err = call("build-labels", "--features", bad, "--manifest", dataset / "dataset.csv",
                        "--out", tmp_path / "l.plm")
    assert code == 2 and "offset" in err


def test_nan_exit_3(dataset, tmp_path):
    with np.errstate(all="ignore"):
        code, _, err = call("train", "--features", dataset / "dataset.ptcf", "--manifest",
                            dataset / "dataset.csv", "--order", "off", "--epochs", 3,
                            "--set", "lr0=1e300", "--set", "lr_min=0", "--out", tmp_path / "c")
    assert code == 3 and "non-finite" in err


def test_gradcheck_command():
    code, out, _ = call("gradcheck", "--loss", "part_sup", "--instances", 3)
    assert code == 0 and "pass" in out


def test_ablate_dim_rows(tmp_path):
    csv_path = tmp_path / "dim.csv"
    code, out, err = call("ablate", "--sweep", "dim", "--preset", "fine_grained",
                          "--synth", "num_classes=4", "--synth", "old_classes=2",
                          "--synth", "images_per_class=4", "--epochs", 1,
                          "--set", "batch_size=8", "--csv", csv_path)
    assert code == 0, err
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "d_prime,All,Old,New"
    assert [r.split(",")[0] for r in rows[1:]] == ["64", "128", "256", "512"]


def test_ablate_order_rows(dataset, tmp_path):
    code, out, err = call("ablate", "--sweep", "order", "--features", dataset / "dataset.ptcf",
                          "--manifest", dataset / "dataset.csv", "--epochs", 1,
                          "--set", "batch_size=16")
    assert code == 0, err
    csv_part = out.split("\n\n")[1].splitlines()
    assert [r.split(",")[0] for r in csv_part[1:]] == ["1", "2", "both", "off"]
