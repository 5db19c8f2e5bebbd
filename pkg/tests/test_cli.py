import json

import numpy as np
import pytest

from schemanet.cli import load_run_config, main, run_gradcheck
from schemanet.data_io import load_checkpoint, load_vocab


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    spec = {"num_object_classes": 4, "num_predicate_classes": 3,
            "feature_dim": 8, "train_scenes": 12, "test_scenes": 4,
            "objects_min": 3, "objects_max": 4, "seed": 3}
    (out / "spec.json").write_text(json.dumps(spec))
    code = main(["synth", "--spec", str(out / "spec.json"),
                 "--out", str(out / "data")])
    assert code == 0
    return out / "data"


@pytest.fixture(scope="module")
def trained_ckpt(world_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = {"d": 8, "num_layers": 1, "num_heads": 2, "ff_hidden": 8,
              "injection_hidden": 8, "predicate_init_hidden": 8,
              "object_dropout": 0.0, "predicate_dropout": 0.0,
              "assimilations_trained": 1, "lr": 1e-3, "batch_size": 4,
              "epochs": 2, "seed": 5}
    (out / "config.json").write_text(json.dumps(config))
    ckpt = str(out / "model.ckpt")
    code = main(["train", "--config", str(out / "config.json"),
                 "--data", str(world_dir / "train.jsonl"),
                 "--vocab", str(world_dir / "vocab.json"),
                 "--kb", str(world_dir / "kb.jsonl"),
                 "--out", ckpt])
    assert code == 0
    return out, ckpt


class TestRunConfig:
    def test_defaults_without_file(self):
        model_config, train_config = load_run_config(None, {})
        assert model_config.d == 512 and model_config.num_layers == 4
        assert model_config.num_heads == 5 and model_config.ff_hidden == 2048
        assert model_config.object_dropout == 0.8
        assert train_config.lr == 1e-5 and train_config.batch_size == 14
        assert train_config.epochs == 24

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"d": 16, "epochs": 3}))
        model_config, train_config = load_run_config(str(path), {"epochs": 7})
        assert model_config.d == 16
        assert train_config.epochs == 7

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"nonsense": 1}))
        with pytest.raises(Exception, match="unknown config keys"):
            load_run_config(str(path), {})


class TestSynthCommand:
    def test_outputs_exist(self, world_dir):
        for name in ("vocab.json", "train.jsonl", "test.jsonl", "kb.jsonl"):
            assert (world_dir / name).is_file()
        vocab = load_vocab(str(world_dir / "vocab.json"))
        assert vocab.num_objects == 4 and vocab.num_predicates == 3

    def test_bad_spec_is_usage_error(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"bogus_key": 1}))
        code, _, err = run(capsys, "synth", "--spec", str(bad),
                           "--out", str(tmp_path / "d"))
        assert code == 2 and "unknown spec keys" in err


class TestTrainCommand:
    def test_missing_vocab_exits_2(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--vocab",
                           str(tmp_path / "nope.json"),
                           "--out", str(tmp_path / "m.ckpt"),
                           "--kb", str(tmp_path / "kb.jsonl"))
        assert code == 2 and "not found" in err

    def test_requires_data_or_kb(self, capsys, world_dir, tmp_path):
        code, _, err = run(capsys, "train",
                           "--vocab", str(world_dir / "vocab.json"),
                           "--out", str(tmp_path / "m.ckpt"))
        assert code == 2 and "--data" in err

    def test_kb_only_training(self, capsys, world_dir, tmp_path):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"d": 8, "num_layers": 1, "num_heads": 2,
                                      "ff_hidden": 8, "injection_hidden": 8,
                                      "predicate_init_hidden": 8,
                                      "assimilations_trained": 1,
                                      "epochs": 1, "lr": 1e-3}))
        code, _, err = run(capsys, "train", "--config", str(config),
                           "--vocab", str(world_dir / "vocab.json"),
                           "--kb", str(world_dir / "kb.jsonl"),
                           "--out", str(tmp_path / "m.ckpt"))
        assert code == 0
        assert (tmp_path / "m.ckpt").is_file()

    def test_epoch_log_is_jsonl_on_stderr(self, capsys, trained_ckpt,
                                          world_dir, tmp_path):
        out_dir, _ = trained_ckpt
        code, _, err = run(capsys, "train",
                           "--config", str(out_dir / "config.json"),
                           "--data", str(world_dir / "train.jsonl"),
                           "--vocab", str(world_dir / "vocab.json"),
                           "--out", str(tmp_path / "m2.ckpt"),
                           "--log", str(tmp_path / "log.jsonl"))
        assert code == 0
        lines = [json.loads(l) for l in err.strip().splitlines()]
        epochs = [l for l in lines if "epoch" in l]
        assert len(epochs) == 2
        logged = [json.loads(l) for l in
                  (tmp_path / "log.jsonl").read_text().strip().splitlines()]
        assert logged == epochs

    def test_same_seed_bitwise_identical_checkpoints(self, capsys, trained_ckpt,
                                                     world_dir, tmp_path):
        out_dir, _ = trained_ckpt
        paths = []
        for name in ("a.ckpt", "b.ckpt"):
            path = str(tmp_path / name)
            code, _, _ = run(capsys, "train",
                             "--config", str(out_dir / "config.json"),
                             "--data", str(world_dir / "train.jsonl"),
                             "--vocab", str(world_dir / "vocab.json"),
                             "--kb", str(world_dir / "kb.jsonl"),
                             "--out", path)
            assert code == 0
            paths.append(path)
        a = open(paths[0], "rb").read()
        b = open(paths[1], "rb").read()
        assert a == b


class TestEvalCommand:
    def test_report_per_step(self, capsys, trained_ckpt, world_dir):
        _, ckpt = trained_ckpt
        code, out, _ = run(capsys, "eval", "--ckpt", ckpt,
                           "--data", str(world_dir / "test.jsonl"),
                           "--task", "predcls", "--k", "1,3",
                           "--assimilations", "2")
        assert code == 0
        reports = [json.loads(l) for l in out.strip().splitlines()]
        assert [r["step"] for r in reports] == [0, 1, 2]
        for r in reports:
            assert set(r["recall_at"]) == {"1", "3"}
            assert 0.0 <= r["micro_accuracy"] <= 1.0

    def test_zero_assimilations_single_block(self, capsys, trained_ckpt, world_dir):
        _, ckpt = trained_ckpt
        code, out, _ = run(capsys, "eval", "--ckpt", ckpt,
                           "--data", str(world_dir / "test.jsonl"),
                           "--task", "sgcls", "--assimilations", "0")
        assert code == 0
        assert len(out.strip().splitlines()) == 1

    def test_unknown_task_is_usage_error(self, capsys, trained_ckpt, world_dir):
        _, ckpt = trained_ckpt
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--ckpt", ckpt,
                  "--data", str(world_dir / "test.jsonl"), "--task", "sgdet"])
        assert exc.value.code == 2
        capsys.readouterr()


class TestLinkPredictCommand:
    def test_sorted_descending_and_deterministic(self, capsys, trained_ckpt,
                                                 world_dir, tmp_path):
        _, ckpt = trained_ckpt
        pairs = tmp_path / "pairs.txt"
        pairs.write_text("obj_00 obj_01\nobj_02 obj_03\n")
        code, out_a, _ = run(capsys, "link-predict", "--ckpt", ckpt,
                             "--pairs", str(pairs), "--top", "3")
        assert code == 0
        rows = [json.loads(l) for l in out_a.strip().splitlines()]
        assert len(rows) == 6
        first = [r["score"] for r in rows[:3]]
        assert first == sorted(first, reverse=True)
        code, out_b, _ = run(capsys, "link-predict", "--ckpt", ckpt,
                             "--pairs", str(pairs), "--top", "3")
        assert out_a == out_b

    def test_empty_pairs_file(self, capsys, trained_ckpt, tmp_path):
        _, ckpt = trained_ckpt
        pairs = tmp_path / "pairs.txt"
        pairs.write_text("")
        code, out, _ = run(capsys, "link-predict", "--ckpt", ckpt,
                           "--pairs", str(pairs), "--top", "2")
        assert code == 0 and out == ""


class TestExportCommand:
    def test_row_count_and_names(self, capsys, trained_ckpt, tmp_path):
        _, ckpt = trained_ckpt
        out_path = tmp_path / "obj.csv"
        code, _, _ = run(capsys, "export", "--ckpt", ckpt,
                         "--what", "object-schema", "--out", str(out_path))
        assert code == 0
        lines = out_path.read_text().strip().splitlines()
        assert len(lines) == 5  # header + 4 classes
        assert lines[0].startswith("class,dim_0")
        assert [l.split(",")[0] for l in lines[1:]] == [
            "obj_00", "obj_01", "obj_02", "obj_03"]

    def test_export_survives_checkpoint_round_trip(self, capsys, trained_ckpt,
                                                   tmp_path):
        _, ckpt = trained_ckpt
        from schemanet.data_io import save_checkpoint

        model = load_checkpoint(ckpt)
        ckpt2 = str(tmp_path / "again.ckpt")
        save_checkpoint(model, ckpt2, training_step=model.training_step)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run(capsys, "export", "--ckpt", ckpt, "--what", "predicate-schema",
            "--out", str(a))
        run(capsys, "export", "--ckpt", ckpt2, "--what", "predicate-schema",
            "--out", str(b))
        assert a.read_text() == b.read_text()


class TestGradcheckCommand:
    def test_fresh_build_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--seed", "0")
        assert code == 0
        assert out.strip().endswith("PASS")
        assert "max_rel_err" in out

    def test_corrupted_gradient_detected(self):
        results = run_gradcheck(seed=0, corrupt=True)
        by_name = {name: passed for name, _, passed in results}
        assert by_name["mul"] is False
        assert any(passed for _, _, passed in results)
