import json

import numpy as np
import pytest

from apexseg.cli import main
from apexseg.data import read_dataset

GEN_CFG = "H = 32\nW = 32\nradius_min = 3\nradius_max = 4\nn_train = 10\nn_test = 4\nseed = 2\n"


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "gen.cfg").write_text(GEN_CFG)
    assert main(["gen-data", "--config", str(d / "gen.cfg"), "--out", str(d / "data.apex")]) == 0
    return d / "data.apex"


def test_gen_data_writes_records_and_hash(dataset, tmp_path, capsys):
    recs = read_dataset(dataset)
    assert len(recs) == 14 and sum(r.meta["split"] == "test" for r in recs) == 4
    assert recs[0].meta["class_names"]["anatomy"][0] == "anatomy_1"
    (tmp_path / "gen.cfg").write_text(GEN_CFG)
    main(["gen-data", "--config", str(tmp_path / "gen.cfg"), "--out", str(tmp_path / "again.apex")])
    assert (tmp_path / "again.apex").read_bytes() == dataset.read_bytes()
    assert "sha1" in capsys.readouterr().out


def test_train_zero_epochs_and_eval_dump(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(dataset), "--out", str(out), "--epochs", "0", "--row", "ca"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["losses"] == [] and man["config"]["label"] == "ca" and len(man["dataset_sha1"]) == 40
    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(out / "checkpoint.apexck"), "--dataset", str(dataset),
                 "--out", str(ev), "--dump-masks"]) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert {"miou", "mbiou", "map", "per_class", "folds"} <= set(metrics)
    masks = sorted(p.name for p in (ev / "masks").iterdir())
    # 4 test samples, pathology and anatomy maps each
    assert len(masks) == 8 and masks[0] == "0000_anatomy.pgm"


def test_train_is_deterministic(dataset, tmp_path):
    args = ["train", "--dataset", str(dataset), "--epochs", "1", "--row", "baseline", "--folds", "2", "--seed", "1"]
    for name in ("a", "b"):
        assert main(args + ["--out", str(tmp_path / name)]) == 0
    a, b = (json.loads((tmp_path / n / "manifest.json").read_text()) for n in ("a", "b"))
    assert a["losses"] == b["losses"] and a["metrics"] == b["metrics"]
    assert (tmp_path / "a" / "checkpoint.apexck").read_bytes() == (tmp_path / "b" / "checkpoint.apexck").read_bytes()


def test_rho_mismatch_is_refused(dataset, tmp_path):
    with pytest.raises(SystemExit, match="rho"):
        main(["train", "--dataset", str(dataset), "--out", str(tmp_path), "--epochs", "0", "--rho", "0.1"])


def test_bad_dataset_exit_code(tmp_path, capsys):
    (tmp_path / "bad.apex").write_bytes(b"NOTAPEX\x01")
    assert main(["train", "--dataset", str(tmp_path / "bad.apex"), "--out", str(tmp_path / "o")]) == 2
    assert "APEXDS1" in capsys.readouterr().err


def test_ablate_small_grid(dataset, tmp_path, capsys):
    rc = main(["ablate", "--dataset", str(dataset), "--out", str(tmp_path), "--rows", "baseline,multitask_gA",
               "--epochs", "0", "--folds", "2"])
    assert rc == 0
    lines = (tmp_path / "ablation.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "Method,A. Cond,A. Pred,γ,IoU"
    assert lines[1].startswith("Baseline,--,--,--,") and lines[2].startswith("Multitask,--,✓,6,")
    cells = json.loads((tmp_path / "cells.json").read_text())
    assert len(cells) == 4


def test_ablate_unknown_row(dataset, tmp_path):
    with pytest.raises(SystemExit, match="unknown rows"):
        main(["ablate", "--dataset", str(dataset), "--out", str(tmp_path), "--rows", "bogus"])


def test_untrained_model_scores_near_chance(tmp_path):
    (tmp_path / "gen.cfg").write_text("n_train = 6\nn_test = 6\n")
    main(["gen-data", "--config", str(tmp_path / "gen.cfg"), "--out", str(tmp_path / "d.apex")])
    main(["train", "--dataset", str(tmp_path / "d.apex"), "--out", str(tmp_path / "r"), "--epochs", "0",
          "--folds", "2"])
    main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.apexck"), "--dataset", str(tmp_path / "d.apex"),
          "--out", str(tmp_path / "e")])
    assert json.loads((tmp_path / "e" / "metrics.json").read_text())["miou"] < 0.2


def test_ablate_std_over_five_folds(dataset, tmp_path):
    main(["ablate", "--dataset", str(dataset), "--out", str(tmp_path), "--rows", "baseline,ca", "--epochs", "0"])
    cells = json.loads((tmp_path / "cells.json").read_text())
    for key in ("baseline", "ca"):
        assert sorted(c["config"]["fold"] for c in cells if c["config"]["label"] == key) == [0, 1, 2, 3, 4]
