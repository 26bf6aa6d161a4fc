import json
import xml.etree.ElementTree as ET

import pytest

from dfanet.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from dfanet.data import read_pcb

FAST = ["--k", "4", "--width-scale", "0.0625", "--epochs", "2", "--batch", "4"]


@pytest.fixture
def cls_data(tmp_path):
    path = tmp_path / "train.pcb"
    assert main(["synth", "--out", str(path), "--points", "24", "--per-class", "3", "--seed", "1"]) == EXIT_OK
    return path


class TestSynth:
    def test_classification(self, cls_data):
        clouds = read_pcb(cls_data)
        assert len(clouds) == 12 and sorted({c.class_label for c in clouds}) == [0, 1, 2, 3]

    def test_partseg(self, tmp_path):
        out = tmp_path / "parts.pcb"
        assert main(["synth", "--task", "partseg", "--out", str(out), "--points", "16", "--per-class", "2"]) == 0
        assert all(c.part_labels is not None for c in read_pcb(out))

    def test_spec_file(self, tmp_path):
        spec = tmp_path / "s.txt"
        spec.write_text("classes=torus,plane\nper_class=2\npoints=8\n")
        out = tmp_path / "s.pcb"
        assert main(["synth", "--spec", str(spec), "--out", str(out)]) == 0
        assert len(read_pcb(out)) == 4

    def test_bad_spec(self, tmp_path):
        spec = tmp_path / "s.txt"
        spec.write_text("classes=teapot\n")
        assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "x.pcb")]) == EXIT_DATA


class TestTrainEval:
    def test_round_trip(self, cls_data, tmp_path, capsys):
        ckpt, csv_out = tmp_path / "m.ckpt", tmp_path / "m.csv"
        assert main(["train", "--data", str(cls_data), "--ckpt", str(ckpt), "--out", str(csv_out)] + FAST) == 0
        assert len(csv_out.read_text().splitlines()) == 3
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(cls_data)]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert 0 <= metrics["oa"] <= 1 and metrics["task"] == "cls"
        svg = tmp_path / "m.svg"
        assert main(["report", "--data", str(csv_out), "--out", str(svg)]) == 0
        ET.parse(svg)

    def test_divergence_exit(self, cls_data, tmp_path):
        args = ["train", "--data", str(cls_data), "--ckpt", str(tmp_path / "m.ckpt"), "--lr", "1e30"] + FAST
        assert main(args) == EXIT_DIVERGED

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope.pcb"), "--ckpt", str(tmp_path / "m")]) == EXIT_DATA

    def test_corrupt_data(self, tmp_path):
        bad = tmp_path / "bad.pcb"
        bad.write_bytes(b"PCB2 count=0 points=0 dims=3 labels=none\n")
        assert main(["eval", "--ckpt", str(tmp_path / "m"), "--data", str(bad)]) == EXIT_DATA

    def test_points_mismatch(self, cls_data, tmp_path):
        args = ["train", "--data", str(cls_data), "--ckpt", str(tmp_path / "m"), "--points", "99"] + FAST
        assert main(args) == EXIT_DATA


class TestUsage:
    def test_no_command(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == EXIT_USAGE

    def test_bad_choice(self):
        with pytest.raises(SystemExit) as e:
            main(["train", "--data", "x", "--ckpt", "y", "--agg", "median"])
        assert e.value.code == EXIT_USAGE

    def test_unknown_axis(self, cls_data, tmp_path):
        args = ["ablate", "--data", str(cls_data), "--test", str(cls_data), "--grid", "dropout=0.1",
                "--out", str(tmp_path / "a.csv")]
        assert main(args) == EXIT_USAGE


def test_ablate(cls_data, tmp_path):
    out = tmp_path / "a.csv"
    args = ["ablate", "--data", str(cls_data), "--test", str(cls_data), "--grid", "aggregation=max,mean",
            "--out", str(out)] + FAST[:4] + ["--epochs", "1", "--batch", "4"]
    assert main(args) == 0
    assert len(out.read_text().splitlines()) == 3


def test_gradcheck(capsys):
    assert main(["gradcheck", "--coords", "3"]) == EXIT_OK
    assert "pass" in capsys.readouterr().out


def test_sample_off(tmp_path):
    off = tmp_path / "tri.off"
    off.write_text("OFF\n4 2 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n")
    out = tmp_path / "s.pcb"
    assert main(["sample-off", "--data", str(off), str(off), "--points", "32", "--label", "3",
                 "--out", str(out)]) == 0
    clouds = read_pcb(out)
    assert len(clouds) == 2 and clouds[0].class_label == 3 and clouds[0].num_points == 32
    bad = tmp_path / "bad.off"
    bad.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 5\n")
    assert main(["sample-off", "--data", str(bad), "--out", str(out)]) == EXIT_DATA
