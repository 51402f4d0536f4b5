import csv
import hashlib
import json

import numpy as np
import pytest

from eyeopen import net as N
from eyeopen.cli import main
from eyeopen.dataset import read_image, write_pgm


def _hash_tree(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run.json":
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--domain", "syn", "--count", "22", "--seed", "1", "--out", str(root / "syn")]) == 0
    assert main(["gen", "--domain", "real", "--count", "18", "--seed", "2", "--out", str(root / "real")]) == 0
    assert main(["gen", "--domain", "realprime", "--count", "16", "--seed", "3", "--out", str(root / "rp")]) == 0
    assert main(["gen", "--domain", "blink", "--count", "24", "--out", str(root / "blink")]) == 0
    assert main(["train", "--mode", "joint", "--syn", str(root / "syn"), "--real", str(root / "real"),
                 "--out", str(root / "j.ckpt"), "--epochs", "1", "--batch-size", "8", "--net", "reduced",
                 "--lr", "0.001"]) == 0
    return root


def test_gen_writes_images_manifest_and_run_record(data):
    assert len(list((data / "syn" / "images").glob("*.pgm"))) == 22
    lines = (data / "syn" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 22 and json.loads(lines[0])["label_kind"] == "degree"
    run = json.loads((data / "syn" / "run.json").read_text())
    assert run["command"] == "gen" and run["seeds"] == {"dataset_seed": 1}


def test_gen_is_reproducible(data, tmp_path):
    assert main(["gen", "--domain", "syn", "--count", "22", "--seed", "1", "--out", str(tmp_path / "again")]) == 0
    assert _hash_tree(tmp_path / "again") == _hash_tree(data / "syn")


def test_gen_stratified_eleven(tmp_path):
    assert main(["gen", "--domain", "syn", "--count", "11", "--out", str(tmp_path)]) == 0
    degs = sorted(json.loads(l)["openness_gt"] for l in (tmp_path / "manifest.jsonl").read_text().splitlines())
    assert degs == [float(d) for d in range(0, 101, 10)]


def test_gen_zero_count_exit_2(tmp_path):
    assert main(["gen", "--domain", "real", "--count", "0", "--out", str(tmp_path)]) == 2


def test_gen_config_file(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("camera_max = 0\nstratified = false\n")
    assert main(["gen", "--domain", "syn", "--count", "5", "--out", str(tmp_path / "d"), "--config", str(cfg)]) == 0
    for l in (tmp_path / "d" / "manifest.jsonl").read_text().splitlines():
        assert json.loads(l)["camera"] == [0.0, 0.0]
    cfg.write_text("colour = blue\n")
    assert main(["gen", "--domain", "syn", "--count", "5", "--out", str(tmp_path / "e"), "--config", str(cfg)]) == 2


def test_train_outputs(data):
    for suffix in ("", ".net.json", ".log.jsonl", ".loss.svg", ".run.json"):
        assert (data / f"j.ckpt{suffix}").exists(), suffix
    run = json.loads((data / "j.ckpt.run.json").read_text())
    assert run["config"]["epochs"] == 1 and run["config"]["mode"] == "joint"


def test_train_joint_needs_real(data, tmp_path):
    assert main(["train", "--mode", "joint", "--syn", str(data / "syn"), "--out", str(tmp_path / "m.ckpt")]) == 2


def test_train_syn_ignores_missing_real(data, tmp_path):
    assert main(["train", "--mode", "syn", "--syn", str(data / "syn"), "--out", str(tmp_path / "m.ckpt"),
                 "--epochs", "1", "--batch-size", "8", "--net", "reduced"]) == 0


def test_train_config_file_and_flag_override(data, tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("epochs = 3\nbatch_size = 8\nnet = reduced\nmode = syn\n")
    out = tmp_path / "m.ckpt"
    assert main(["train", "--syn", str(data / "syn"), "--out", str(out), "--config", str(cfg), "--epochs", "1"]) == 0
    assert len((tmp_path / "m.ckpt.log.jsonl").read_text().splitlines()) == 1
    cfg.write_text("epochs = many\n")
    assert main(["train", "--syn", str(data / "syn"), "--out", str(out), "--config", str(cfg)]) == 2


def test_eval_report_is_byte_stable(data, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert main(["eval", "--ckpt", str(data / "j.ckpt"), "--data", str(data / "syn"), "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["n_degree_labels"] == 22


def test_eval_missing_checkpoint_exit_3(data, tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(data / "syn"),
                 "--out", str(tmp_path / "r.json")]) == 3


def test_eval_corrupt_checkpoint_exit_3(data, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"JUNK" + (data / "j.ckpt").read_bytes()[4:])
    (tmp_path / "bad.ckpt.net.json").write_text((data / "j.ckpt.net.json").read_text())
    assert main(["eval", "--ckpt", str(bad), "--data", str(data / "syn"), "--out", str(tmp_path / "r.json")]) == 3


def test_matrix(data, tmp_path, capsys):
    prefix = tmp_path / "mx"
    ck = str(data / "j.ckpt")
    assert main(["matrix", "--ckpts", f"syn={ck}", f"joint={ck}", "--data", f"syn={data / 'syn'}",
                 f"real={data / 'real'}", "--out", str(prefix)]) == 0
    rows = json.loads((tmp_path / "mx.json").read_text())
    assert len(rows) == 4 and rows[1]["degree_mse"] is None
    assert "--" in (tmp_path / "mx.txt").read_text()
    assert main(["matrix", "--ckpts", f"syn={ck}", "--modes", "syn", "real", "--data", f"syn={data / 'syn'}",
                 "--out", str(prefix)]) == 2


def test_infer_crop_and_landmarks(data, tmp_path, capsys):
    img = data / "syn" / "images" / "000000.pgm"
    assert main(["infer", "--ckpt", str(data / "j.ckpt"), "--image", str(img), "--out", str(tmp_path / "r.json")]) == 0
    res = json.loads((tmp_path / "r.json").read_text())
    assert res["state"] in ("open", "closed") and res["degree"] >= 0
    face = np.full((144, 144), 80, np.uint8)
    face[32:80, 8:136] = read_image(img)
    write_pgm(tmp_path / "face.pgm", face)
    (tmp_path / "lm.json").write_text(json.dumps({"left": [36, 56], "right": [108, 56]}))
    capsys.readouterr()
    assert main(["infer", "--ckpt", str(data / "j.ckpt"), "--image", str(tmp_path / "face.pgm"),
                 "--landmarks", str(tmp_path / "lm.json")]) == 0
    via_face = json.loads(capsys.readouterr().out)
    assert via_face["raw"] == pytest.approx(res["raw"], abs=1e-4)
    assert main(["infer", "--ckpt", str(data / "j.ckpt"), "--image", str(tmp_path / "face.pgm")]) == 2


def test_curve_outputs(data, tmp_path):
    prefix = tmp_path / "cv"
    assert main(["curve", "--ckpt", str(data / "j.ckpt"), "--seq", str(data / "blink"), "--out", str(prefix)]) == 0
    rows = list(csv.reader(open(tmp_path / "cv.csv")))
    assert len(rows) - 1 == 24
    assert (tmp_path / "cv.svg").read_text().lstrip().startswith("<?xml")
    summary = json.loads((tmp_path / "cv.json").read_text())
    assert summary["frames"] == 24 and summary["gt_monotone_segments"] == 4


def test_finetune_command(data, tmp_path):
    out = tmp_path / "f.ckpt"
    assert main(["finetune", "--ckpt", str(data / "j.ckpt"), "--data", str(data / "rp"), "--out", str(out),
                 "--epochs", "1", "--batch-size", "4"]) == 0
    summary = json.loads((tmp_path / "f.ckpt.eval.json").read_text())
    assert summary["test_samples"] == 4
    assert N.load_checkpoint(out).count() == N.load_checkpoint(data / "j.ckpt").count()


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--seed", "1", "--out", str(tmp_path / "g.json")]) == 0
    assert json.loads((tmp_path / "g.json").read_text())["passed"] is True
    assert "PASS" in capsys.readouterr().out


def test_help_lists_training_defaults(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for flag, default in (("--lr", "0.0001"), ("--epochs", "80"), ("--batch-size", "256"), ("--lambda1", "0.01"),
                          ("--ot", "15.0"), ("--real-fraction", "0.25")):
        assert flag in text and default in text


def test_bad_flag_exit_2():
    with pytest.raises(SystemExit) as e:
        main(["train", "--nope"])
    assert e.value.code == 2
