import json
from pathlib import Path

import pytest

from tppkit.cli import main
from tppkit.model import load_checkpoint
from tppkit.streams import load_stream


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def gen_dir(tmp_path):
    out = tmp_path / "gen"
    code = run(["gen-pgem", "--labels", 3, "--streams", 4, "--horizon", 200,
                "--seed", 7, "--out", out])
    assert code == 0
    return out


class TestGenPgem:
    def test_writes_spec_streams_manifest(self, gen_dir):
        assert (gen_dir / "spec.json").exists()
        assert (gen_dir / "streams.csv").exists()
        assert (gen_dir / "streams.meta.json").exists()
        manifest = json.loads((gen_dir / "manifest.json").read_text())
        assert manifest["subcommand"] == "gen-pgem"
        assert manifest["config"]["labels"] == 3
        data = load_stream(gen_dir / "streams.csv")
        assert len(data) == 4
        assert data.label_count == 3

    def test_zero_streams_usage_error(self, tmp_path):
        code = run(["gen-pgem", "--streams", 0, "--out", tmp_path / "x"])
        assert code == 1

    def test_identical_bytes_per_seed(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["gen-pgem", "--labels", 2, "--streams", 3,
                        "--horizon", 100, "--seed", 5, "--out", out]) == 0
        assert (a / "streams.csv").read_bytes() == (b / "streams.csv").read_bytes()
        assert (a / "spec.json").read_bytes() == (b / "spec.json").read_bytes()

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TPPKIT_SEED", "5")
        a = tmp_path / "env"
        assert run(["gen-pgem", "--labels", 2, "--streams", 3,
                    "--horizon", 100, "--out", a]) == 0
        b = tmp_path / "flag"
        assert run(["gen-pgem", "--labels", 2, "--streams", 3,
                    "--horizon", 100, "--seed", 5, "--out", b]) == 0
        assert (a / "streams.csv").read_bytes() == (b / "streams.csv").read_bytes()


class TestSplit:
    def test_stream_split(self, gen_dir, tmp_path):
        out = tmp_path / "split"
        code = run(["split", "--data", gen_dir / "streams.csv", "--mode", "stream",
                    "--fraction", "0.5", "--seed", 1, "--out", out])
        assert code == 0
        train = load_stream(out / "train.csv")
        test = load_stream(out / "test.csv")
        assert len(train) == 2 and len(test) == 2

    def test_time_split(self, gen_dir, tmp_path):
        out = tmp_path / "tsplit"
        code = run(["split", "--data", gen_dir / "streams.csv", "--mode", "time",
                    "--fraction", "0.7", "--out", out])
        assert code == 0
        train = load_stream(out / "train.csv")
        assert train.streams[0].horizon == pytest.approx(140.0)

    def test_missing_data_flag(self, tmp_path):
        assert run(["split", "--out", tmp_path / "s"]) == 1


class TestTrainEvalPipeline:
    @pytest.fixture()
    def pipeline(self, tmp_path):
        gen = tmp_path / "gen"
        assert run(["gen-pgem", "--labels", 2, "--streams", 4, "--horizon", 120,
                    "--seed", 3, "--out", gen]) == 0
        split = tmp_path / "split"
        assert run(["split", "--data", gen / "streams.csv", "--mode", "stream",
                    "--fraction", "0.5", "--seed", 0, "--out", split]) == 0
        trained = tmp_path / "train"
        assert run(["train", "--data", split / "train.csv", "--fakes", 1,
                    "--channels", 2, "--embed", 3, "--memory", 2, "--hidden", 4,
                    "--epochs", 2, "--seed", 1, "--out", trained]) == 0
        return tmp_path

    def test_train_outputs(self, pipeline):
        trained = pipeline / "train"
        assert (trained / "model.ckpt").exists()
        report = (trained / "report.csv").read_text().strip().splitlines()
        assert report[0] == "epoch,objective,train_ll,val_ll,seconds"
        assert len(report) == 3
        cfg, params, steps = load_checkpoint(trained / "model.ckpt")
        assert steps == 2
        assert cfg.label_count == 2
        assert cfg.time_scale == pytest.approx(120.0)  # auto: train horizon

    def test_missing_sidecar_names_expected_file(self, pipeline, tmp_path):
        orphan = tmp_path / "orphan.csv"
        orphan.write_text("stream_id,time,label\ns0,1.0,0\n")
        code = run(["train", "--data", orphan, "--epochs", 1, "--out", tmp_path / "t"])
        assert code == 1

    def test_eval_and_reports(self, pipeline):
        out = pipeline / "eval"
        code = run(["eval", "--ckpt", pipeline / "train" / "model.ckpt",
                    "--data", pipeline / "split" / "test.csv", "--out", out])
        assert code == 0
        lines = (out / "eval.csv").read_text().strip().splitlines()
        assert lines[0] == "stream_id,ll,num_events,horizon"
        assert lines[-1].startswith("total,")

    def test_attn_graph(self, pipeline):
        out = pipeline / "attn"
        code = run(["attn-graph", "--ckpt", pipeline / "train" / "model.ckpt",
                    "--data", pipeline / "split" / "train.csv",
                    "--threshold", "0.01", "--out", out])
        assert code == 0
        assert (out / "attention.dot").read_text().startswith("digraph attention {")
        doc = json.loads((out / "attention.json").read_text())
        assert doc["num_labels"] == 2

    def test_trace(self, pipeline):
        out = pipeline / "trace"
        code = run(["trace", "--ckpt", pipeline / "train" / "model.ckpt",
                    "--data", pipeline / "split" / "test.csv",
                    "--stream", "s0", "--out", out])
        assert code == 0
        lines = (out / "trace_s0.csv").read_text().strip().splitlines()
        assert lines[0] == "time,label,lambda,is_real_event"

    def test_trace_unknown_stream(self, pipeline):
        code = run(["trace", "--ckpt", pipeline / "train" / "model.ckpt",
                    "--data", pipeline / "split" / "test.csv",
                    "--stream", "s99", "--out", pipeline / "tx"])
        assert code == 1

    def test_ckpt_data_label_mismatch(self, pipeline, tmp_path):
        gen5 = tmp_path / "gen5"
        assert run(["gen-pgem", "--labels", 5, "--streams", 2, "--horizon", 50,
                    "--seed", 1, "--out", gen5]) == 0
        code = run(["eval", "--ckpt", pipeline / "train" / "model.ckpt",
                    "--data", gen5 / "streams.csv", "--out", tmp_path / "e"])
        assert code == 1


class TestManifestReplay:
    def test_gen_pgem_replay_byte_identical(self, gen_dir):
        before = {p.name: p.read_bytes() for p in gen_dir.iterdir()}
        code = run(["gen-pgem", "--from-manifest", gen_dir / "manifest.json"])
        assert code == 0
        after = {p.name: p.read_bytes() for p in gen_dir.iterdir()}
        assert before == after

    def test_replay_wrong_subcommand(self, gen_dir):
        code = run(["split", "--from-manifest", gen_dir / "manifest.json"])
        assert code == 1

    def test_config_file_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"labels": 2, "streams": 3, "horizon": 80.0,
                                   "seed": 9}))
        a = tmp_path / "a"
        assert run(["gen-pgem", "--config", cfg, "--out", a]) == 0
        manifest = json.loads((a / "manifest.json").read_text())
        assert manifest["config"]["labels"] == 2
        # flag wins over file
        b = tmp_path / "b"
        assert run(["gen-pgem", "--config", cfg, "--labels", 4, "--out", b]) == 0
        manifest = json.loads((b / "manifest.json").read_text())
        assert manifest["config"]["labels"] == 4

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"labelz": 2}))
        assert run(["gen-pgem", "--config", cfg, "--out", tmp_path / "x"]) == 1


class TestNumericalFailureExitCode:
    def test_divergent_training_exits_2(self, tmp_path):
        gen = tmp_path / "gen"
        assert run(["gen-pgem", "--labels", 1, "--streams", 1, "--horizon", 60,
                    "--seed", 2, "--out", gen]) == 0
        code = run(["train", "--data", gen / "streams.csv", "--epochs", 3,
                    "--lr", "1e8", "--channels", 2, "--embed", 2, "--memory", 1,
                    "--hidden", 3, "--seed", 1, "--out", tmp_path / "t"])
        assert code == 2
