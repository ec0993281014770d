import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from structgraph import cli
from structgraph.data import load_manifest, read_pgm, save_checkpoint, write_pgm
from structgraph.numeric import Rng
from structgraph.sgnn import LinearHead, Model, ModelConfig


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["synth", "--out", str(out), "--n-per-class", "10", "--seed", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "m.sgnn"
    assert cli.main(["train", "--manifest", str(dataset / "manifest.jsonl"), "--out", str(path), "--epochs", "2"]) == 0
    return path


class TestSynth:
    def test_writes_and_reports(self, capsys, tmp_path):
        code, out, _ = run(capsys, "synth", "--out", tmp_path / "d", "--n-per-class", 10, "--seed", 1)
        lines = out.splitlines()
        assert code == 0
        assert lines[0].startswith("config ") and json.loads(lines[0][7:])["seed"] == 1
        assert "wrote 20 samples" in lines
        assert lines[-1] == str(tmp_path / "d" / "manifest.jsonl")
        assert len(load_manifest(tmp_path / "d" / "manifest.jsonl")) == 20

    def test_rerun_byte_identical(self, capsys, tmp_path, dataset):
        run(capsys, "synth", "--out", tmp_path / "d", "--n-per-class", 10, "--seed", 1)
        for p in sorted(dataset.rglob("*")):
            if p.is_file():
                assert digest(p) == digest(tmp_path / "d" / p.relative_to(dataset))

    @pytest.mark.parametrize("n", ["0", "-3", "ten"])
    def test_bad_count_is_usage_error(self, capsys, tmp_path, n):
        code, _, err = run(capsys, "synth", "--out", tmp_path, "--n-per-class", n)
        assert code == 1 and "n-per-class" in err

    def test_unwritable_output(self, capsys, tmp_path):
        (tmp_path / "file").write_text("")
        code, _, _ = run(capsys, "synth", "--out", tmp_path / "file" / "sub", "--n-per-class", 1)
        assert code == 2


class TestTrain:
    def test_zero_epochs(self, capsys, tmp_path, dataset):
        code, out, _ = run(capsys, "train", "--manifest", dataset / "manifest.jsonl", "--out", tmp_path / "m", "--epochs", 0)
        assert code == 0 and (tmp_path / "m").exists()
        cfg = json.loads(out.splitlines()[0][7:])
        assert cfg["train"]["epochs"] == 0 and cfg["train"]["seed"] == 0 and cfg["model"]["hidden"] == 64
        assert not [l for l in out.splitlines() if l.startswith("epoch ")]

    def test_epoch_lines_and_determinism(self, capsys, tmp_path, dataset, trained):
        args = ["train", "--manifest", dataset / "manifest.jsonl", "--out", tmp_path / "m", "--epochs", 2]
        code, out, _ = run(capsys, *args)
        epochs = [l.split() for l in out.splitlines() if l.startswith("epoch ")]
        assert code == 0 and len(epochs) == 2
        assert [e[0::2] for e in epochs] == [["epoch", "loss", "val_auc"]] * 2
        assert digest(tmp_path / "m") == digest(trained)

    def test_options_reach_config(self, capsys, tmp_path, dataset):
        code, out, _ = run(
            capsys, "train", "--manifest", dataset / "manifest.jsonl", "--out", tmp_path / "m", "--epochs", 0,
            "--pooling", "importance", "--lr", "0.001", "--batch-size", 3, "--lambda-node", 0.5,
            "--lambda-explain", 2, "--no-augment", "--freeze-backbone", "--seed", 9,
        )
        cfg = json.loads(out.splitlines()[0][7:])
        assert code == 0
        assert cfg["model"]["pooling"] == "importance"
        t = cfg["train"]
        assert (t["lr"], t["batch_size"], t["lambda_node"], t["lambda_explain"], t["seed"]) == (0.001, 3, 0.5, 2.0, 9)
        assert t["augment"]["enabled"] is False and t["freeze_backbone"] is True

    def test_missing_manifest(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--manifest", tmp_path / "none.jsonl", "--out", tmp_path / "m")
        assert code == 2 and "none.jsonl" in err

    def test_bad_manifest_line(self, capsys, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"image": "a.pgm", "label": 1, "split": "train"}\n{oops\n')
        code, _, err = run(capsys, "train", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "m")
        assert code == 2 and ":2:" in err

    def test_missing_image(self, capsys, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"image": "gone.pgm", "label": 1, "split": "train"}\n')
        code, _, err = run(capsys, "train", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "m", "--epochs", 1)
        assert code == 2 and "gone.pgm" in err

    def test_bad_pooling(self, capsys, tmp_path, dataset):
        code, _, _ = run(capsys, "train", "--manifest", dataset / "manifest.jsonl", "--out", tmp_path / "m", "--pooling", "max")
        assert code == 1


class TestEval:
    def test_outputs(self, capsys, tmp_path, dataset, trained):
        code, out, _ = run(
            capsys, "eval", "--manifest", dataset / "manifest.jsonl", "--model", trained, "--split", "train",
            "--report", tmp_path / "r.json", "--roc", tmp_path / "roc.csv", "--node-f1", tmp_path / "f1.txt",
        )
        assert code == 0
        summary = out.splitlines()[-1].split()
        assert [s.split("=")[0] for s in summary] == ["acc", "auc", "node_f1"]
        report = json.loads((tmp_path / "r.json").read_text())
        assert sum(report["graph"]["confusion"].values()) == report["n_samples"] == 16
        rows = (tmp_path / "roc.csv").read_text().splitlines()
        assert rows[0] == "threshold,fpr,tpr" and rows[-1].startswith("# auc=")
        fpr = [float(r.split(",")[1]) for r in rows[1:-1]]
        assert fpr == sorted(fpr)
        f1 = [float(x) for x in (tmp_path / "f1.txt").read_text().split()]
        assert f1 == report["per_image_node_f1"]

    def test_deterministic_outputs(self, capsys, tmp_path, dataset, trained):
        for name in ("a", "b"):
            run(capsys, "eval", "--manifest", dataset / "manifest.jsonl", "--model", trained,
                "--report", tmp_path / f"{name}.json", "--roc", tmp_path / f"{name}.csv")
        assert digest(tmp_path / "a.json") == digest(tmp_path / "b.json")
        assert digest(tmp_path / "a.csv") == digest(tmp_path / "b.csv")

    def test_single_class_split(self, capsys, tmp_path, dataset, trained):
        lines = [l for l in (dataset / "manifest.jsonl").read_text().splitlines() if '"label": 1' in l]
        (dataset / "pos.jsonl").write_text("\n".join(lines) + "\n")
        code, out, _ = run(capsys, "eval", "--manifest", dataset / "pos.jsonl", "--model", trained,
                           "--roc", tmp_path / "roc.csv")
        assert code == 0
        assert "AUC: undefined" in out and "auc=undefined" in out
        assert (tmp_path / "roc.csv").read_text().endswith("# auc=undefined\n")

    def test_zero_epoch_model_is_near_chance(self, capsys, tmp_path):
        run(capsys, "synth", "--out", tmp_path / "d", "--n-per-class", 100, "--seed", 0)
        run(capsys, "train", "--manifest", tmp_path / "d" / "manifest.jsonl", "--out", tmp_path / "m", "--epochs", 0)
        code, _, _ = run(capsys, "eval", "--manifest", tmp_path / "d" / "manifest.jsonl", "--model", tmp_path / "m",
                         "--report", tmp_path / "r.json")
        auc = json.loads((tmp_path / "r.json").read_text())["graph"]["auc"]
        assert code == 0
        assert 0.3 <= auc <= 0.7

    def test_corrupt_checkpoint(self, capsys, tmp_path, dataset):
        (tmp_path / "bad").write_bytes(b"SGNN\x07\0\0\0")
        code, _, err = run(capsys, "eval", "--manifest", dataset / "manifest.jsonl", "--model", tmp_path / "bad")
        assert code == 2 and "version" in err

    def test_empty_split(self, capsys, tmp_path, trained):
        (tmp_path / "m.jsonl").write_text("")
        code, _, _ = run(capsys, "eval", "--manifest", tmp_path / "m.jsonl", "--model", trained)
        assert code == 2


class TestExplain:
    def test_csv_and_heatmap(self, capsys, tmp_path, dataset, trained):
        code, _, _ = run(capsys, "explain", "--model", trained, "--image", dataset / "images" / "img_00001.pgm",
                         "--heatmap", tmp_path / "h.pgm", "--scores", tmp_path / "s.csv")
        assert code == 0
        rows = (tmp_path / "s.csv").read_text().splitlines()
        assert rows[0] == "row,col,importance,node_prob" and len(rows) == 1 + 64
        cells = [r.split(",") for r in rows[1:]]
        assert [(int(a), int(b)) for a, b, _, _ in cells] == [(i, j) for i in range(8) for j in range(8)]
        heat = np.rint(read_pgm(tmp_path / "h.pgm")[0] * 255)
        assert heat.shape == (64, 64) and heat.min() == 0 and heat.max() == 255
        s = np.array([float(c[2]) for c in cells]).reshape(8, 8)
        i, j = np.unravel_index(np.argmax(s), s.shape)
        assert np.all(heat[8 * i:8 * i + 8, 8 * j:8 * j + 8] == 255)

    def test_constant_importance(self, capsys, tmp_path):
        m = Model(ModelConfig(), Rng(0))
        for p in m.explain_head.parameters():
            p.value[...] = 0
        save_checkpoint(m, tmp_path / "m")
        write_pgm(Rng(1).uniform_array(64 * 64).reshape(64, 64), tmp_path / "i.pgm")
        code, _, _ = run(capsys, "explain", "--model", tmp_path / "m", "--image", tmp_path / "i.pgm",
                         "--heatmap", tmp_path / "h.pgm")
        assert code == 0
        assert np.all(np.rint(read_pgm(tmp_path / "h.pgm")[0] * 255) == 128)

    def test_resizes_other_sizes(self, capsys, tmp_path, trained):
        write_pgm(np.full((40, 40), 0.3), tmp_path / "i.pgm")
        code, _, _ = run(capsys, "explain", "--model", trained, "--image", tmp_path / "i.pgm", "--scores", tmp_path / "s.csv")
        assert code == 0 and len((tmp_path / "s.csv").read_text().splitlines()) == 65

    def test_bad_image(self, capsys, tmp_path, trained):
        (tmp_path / "i.pgm").write_bytes(b"P2\n1 1\n255\n0")
        code, _, err = run(capsys, "explain", "--model", trained, "--image", tmp_path / "i.pgm")
        assert code == 2 and "magic" in err


class TestGradcheck:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_passes(self, capsys, seed):
        code, out, _ = run(capsys, "gradcheck", "--seed", seed)
        last = out.splitlines()[-1]
        assert code == 0 and last.startswith("max_rel_err=") and " params=" in last
        assert float(last.split()[0].split("=")[1]) <= 1e-5

    def test_injected_bug(self, capsys, monkeypatch):
        original = LinearHead.backward

        def doubled(self, grad_logits):
            before = self.weight.grad.copy()
            out = original(self, grad_logits)
            self.weight.grad += self.weight.grad - before
            return out

        monkeypatch.setattr(LinearHead, "backward", doubled)
        code, out, _ = run(capsys, "gradcheck")
        assert code == 3
        assert float(out.splitlines()[-1].split()[0].split("=")[1]) > 1e-5

    def test_eps_range(self, capsys):
        assert run(capsys, "gradcheck", "--eps", "0.1")[0] == 1


class TestCompare:
    def write(self, path, values):
        path.write_text("".join(f"{v}\n" for v in values))
        return path

    def test_self(self, capsys, tmp_path):
        a = self.write(tmp_path / "a", [0.2, 0.5, 0.7, 0.1])
        code, out, _ = run(capsys, "compare", "--scores-a", a, "--scores-b", a)
        assert code == 0 and out.splitlines()[-1] == "t=0 dof=6 p=1"

    def test_separated(self, capsys, tmp_path):
        a = self.write(tmp_path / "a", [0.1, 0.12, 0.15, 0.11, 0.09])
        b = self.write(tmp_path / "b", [0.8, 0.85, 0.9, 0.82, 0.79, 0.88])
        code, out, _ = run(capsys, "compare", "--scores-a", a, "--scores-b", b)
        fields = dict(f.split("=") for f in out.splitlines()[-1].split())
        assert code == 0 and list(fields) == ["t", "dof", "p"] and float(fields["p"]) < 0.05

    def test_malformed(self, capsys, tmp_path):
        a = self.write(tmp_path / "a", [0.1, 0.2])
        b = self.write(tmp_path / "b", ["0.1", "", "abc"])
        code, _, err = run(capsys, "compare", "--scores-a", a, "--scores-b", b)
        assert code == 2 and ":3:" in err

    def test_too_short(self, capsys, tmp_path):
        a = self.write(tmp_path / "a", [0.1])
        assert run(capsys, "compare", "--scores-a", a, "--scores-b", a)[0] == 2


class TestUsage:
    @pytest.mark.parametrize("cmd", sorted(cli.COMMANDS))
    def test_help(self, capsys, cmd):
        code = cli.main([cmd, "--help"])
        out = capsys.readouterr().out
        assert code == 0
        for action in cli.build_parser()._subparsers._group_actions[0].choices[cmd]._actions:
            for opt in action.option_strings:
                assert opt in out
            if action.default not in (None, False, "==SUPPRESS==") and action.option_strings[0] != "--help":
                assert "default" in out

    def test_unknown_flag(self, capsys):
        assert run(capsys, "gradcheck", "--bogus")[0] == 1

    def test_no_command(self, capsys):
        assert run(capsys)[0] == 1

    @pytest.mark.parametrize("value", ["0", "-2", "many"])
    def test_thread_env(self, capsys, monkeypatch, value):
        monkeypatch.setenv("STRUCTGRAPH_THREADS", value)
        code, _, err = run(capsys, "gradcheck")
        assert code == 1 and "STRUCTGRAPH_THREADS" in err

    def test_module_entry_point(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "structgraph", "compare", "--scores-a", "x", "--scores-b", "y"],
                           capture_output=True, text=True, cwd=tmp_path)
        assert r.returncode == 2
