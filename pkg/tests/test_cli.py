import csv
import json

import numpy as np
import pytest

import hybridla.nn as nn
from hybridla import checkpoint
from hybridla.cli import main
from hybridla.datasets import PageConfig, SyntheticPage, export_results, synthetic_split
from hybridla.evaluator import EvalConfig, evaluate
from hybridla.model import HybriDLA, ModelConfig
from hybridla.trainer import load_checkpoint
from hybridla.verify import gradient_suite

TINY_MODEL = dict(dim=16, heads=2, levels=2, depth=2, n_init=4, n_aqe=4, ffn_dim=16)


def write_config(tmp_path, **sections):
    doc = {"model": dict(TINY_MODEL), "train": {"lr": 1e-3, "batch": 2, "max_steps": 2, "epochs": 10},
           "data": {"pages": 3, "image_size": 32, "min_elements": 1, "max_elements": 3}}
    for k, v in sections.items():
        doc.setdefault(k, {}).update(v)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


def fixture_split(pages=3, seed=0):
    return synthetic_split(pages, PageConfig(min_elements=1, max_elements=3), seed=seed, size=32)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root)
    assert main(["train", "--config", cfg, "--out", str(root / "run")]) == 0
    return root, cfg, str(root / "run" / "checkpoint.hdla")


class TestConfig:
    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train={"foo": 1})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "foo" in capsys.readouterr().err

    def test_type_mismatch(self, tmp_path, capsys):
        cfg = write_config(tmp_path, model={"depth": "three"})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "model.depth" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 4

    def test_bad_log_level(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HYBRIDLA_LOG", "chatty")
        assert main(["verify"]) == 2

    def test_help_lists_defaults(self, capsys):
        assert main(["--help"]) == 0
        out = capsys.readouterr().out
        assert "[model]" in out and "n_init = 12" in out and "exit codes" in out.lower()


class TestTrain:
    def test_artifacts(self, trained):
        root, _, _ = trained
        metrics = json.loads((root / "run" / "metrics.json").read_text())
        assert metrics["steps"] == 2 and 0.0 <= metrics["train_map"] <= 1.0
        rows = list(csv.reader(open(root / "run" / "loss_curve.csv")))
        assert rows[0][:4] == ["step", "epoch", "lr", "total"] and len(rows) == 3

    def test_zero_epochs_saves_initialisation(self, tmp_path):
        cfg = write_config(tmp_path, train={"epochs": 0})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        params, _, _ = load_checkpoint(tmp_path / "o" / "checkpoint.hdla")
        init = HybriDLA(ModelConfig(**TINY_MODEL)).state_dict()
        assert params.keys() == init.keys()
        for k, v in init.items():
            np.testing.assert_array_equal(params[k], checkpoint.narrow(v))


class TestEval:
    def test_ground_truth_as_predictions(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        split = fixture_split()
        gts = [g for _, g in split.pages]
        from hybridla.datasets import Detections
        export_results([Detections(g.boxes, np.ones(len(g)), g.labels, g.page_id) for g in gts],
                       split.image_dims, tmp_path / "gt.json")
        assert main(["eval", "--config", cfg, "--predictions", str(tmp_path / "gt.json"),
                     "--out", str(tmp_path / "o")]) == 0
        assert "mAP 1.000" in capsys.readouterr().out

    def test_empty_predictions(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        (tmp_path / "empty.json").write_text("[]")
        assert main(["eval", "--config", cfg, "--predictions", str(tmp_path / "empty.json"),
                     "--out", str(tmp_path / "o")]) == 0
        assert "mAP 0.000" in capsys.readouterr().out

    def test_reports_byte_identical(self, trained, tmp_path):
        _, cfg, ckpt = trained
        for name in ("a", "b"):
            assert main(["eval", "--config", cfg, "--checkpoint", ckpt, "--out", str(tmp_path / name)]) == 0
        for f in ("report.json", "pr_curves.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_shape_mismatch(self, trained, tmp_path, capsys):
        _, _, ckpt = trained
        cfg = write_config(tmp_path, model={"dim": 32, "ffn_dim": 32})
        assert main(["eval", "--config", cfg, "--checkpoint", ckpt, "--out", str(tmp_path / "o")]) == 3
        assert "does not fit" in capsys.readouterr().err

    def test_needs_exactly_one_source(self, trained, tmp_path):
        _, cfg, ckpt = trained
        assert main(["eval", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert main(["eval", "--config", cfg, "--checkpoint", ckpt, "--predictions", "x.json",
                     "--out", str(tmp_path / "o")]) == 2

    def test_corrupt_checkpoint(self, trained, tmp_path):
        _, cfg, ckpt = trained
        bad = tmp_path / "bad.hdla"
        bad.write_bytes(b"XXXX" + open(ckpt, "rb").read()[4:])
        assert main(["eval", "--config", cfg, "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 3


class TestInfer:
    def test_empty_page(self, trained, tmp_path):
        _, cfg, _ = trained
        model = HybriDLA(ModelConfig(**TINY_MODEL))
        model.decoder.class_head.bias.data[-1] = 50.0       # no-object dominates every query
        from hybridla.trainer import save_checkpoint
        save_checkpoint(model, None, None, tmp_path / "m.hdla")
        page = tmp_path / "page.json"
        page.write_text(json.dumps(SyntheticPage((64, 64), [], 0).to_json()))
        assert main(["infer", "--config", cfg, "--checkpoint", str(tmp_path / "m.hdla"), "--input", str(page),
                     "--out", str(tmp_path / "o")]) == 0
        assert json.loads((tmp_path / "o" / "results.json").read_text()) == []
        assert (tmp_path / "o" / "overlay_0.svg").read_text().count("<rect") == 0

    def test_svg_rect_per_detection(self, trained, tmp_path):
        _, _, ckpt = trained
        cfg = write_config(tmp_path, eval={"score_threshold": 0.0})
        page = tmp_path / "page.json"
        split_page = SyntheticPage((64, 64), [(1, (8, 8, 20, 12)), (2, (36, 30, 16, 20))], 0)
        page.write_text(json.dumps(split_page.to_json()))
        assert main(["infer", "--config", cfg, "--checkpoint", ckpt, "--input", str(page),
                     "--out", str(tmp_path / "o")]) == 0
        results = json.loads((tmp_path / "o" / "results.json").read_text())
        assert len(results) >= TINY_MODEL["n_init"]
        assert (tmp_path / "o" / "overlay_0.svg").read_text().count('<rect class="detection"') == len(results)

    def test_results_reevaluate_to_in_memory_map(self, trained, tmp_path):
        _, _, ckpt = trained
        split = fixture_split()
        model = HybriDLA(ModelConfig(**TINY_MODEL))
        load_checkpoint(ckpt, model)
        dets = model.detect(np.stack([img for img, _ in split.pages]), [g.page_id for _, g in split.pages])
        gts = [g for _, g in split.pages]
        want = evaluate(dets, gts, EvalConfig(list(range(4)))).map
        export_results(dets, split.image_dims, tmp_path / "r.json")
        cfg = write_config(tmp_path)
        assert main(["eval", "--config", cfg, "--predictions", str(tmp_path / "r.json"),
                     "--out", str(tmp_path / "o")]) == 0
        got = json.loads((tmp_path / "o" / "report.json").read_text())["map"]
        assert abs(got - want) <= 1e-9

    def test_npy_input(self, trained, tmp_path):
        _, cfg, ckpt = trained
        np.save(tmp_path / "x.npy", np.zeros((2, 3, 32, 32)))
        assert main(["infer", "--config", cfg, "--checkpoint", ckpt, "--input", str(tmp_path / "x.npy"),
                     "--out", str(tmp_path / "o")]) == 0
        assert {p.name for p in (tmp_path / "o").iterdir()} == {"results.json", "overlay_0.svg", "overlay_1.svg"}


class TestAblate:
    def test_grid(self, tmp_path):
        cfg = write_config(tmp_path, data={"pages": 2})
        assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        rows = list(csv.DictReader(open(tmp_path / "o" / "ablation.csv")))
        assert len(rows) == 4
        assert {(r["dr_enabled"], r["aqe_enabled"]) for r in rows} == {(a, b) for a in ("True", "False")
                                                                         for b in ("True", "False")}
        for r in rows:
            if r["aqe_enabled"] == "False":
                assert float(r["mean_predictions"]) == TINY_MODEL["n_init"]
            else:
                assert TINY_MODEL["n_init"] <= float(r["mean_predictions"]) <= 8


class TestVerify:
    def test_clean_build(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        for suite in ("gradients", "hungarian", "map"):
            assert suite in out

    def test_mutation_canary(self, monkeypatch):
        original = nn.matmul

        def flipped(a, b):
            out = original(a, b)
            backward = out._backward

            def negated(g):
                return tuple(None if x is None else -x for x in backward(g))
            out._backward = negated
            return out

        monkeypatch.setattr(nn, "matmul", flipped)
        assert not gradient_suite().passed
