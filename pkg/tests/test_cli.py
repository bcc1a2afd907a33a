"""The command-line client: stage chaining through a work directory and exit codes."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from nextbuy.cli import FILES, build_parser, main
from nextbuy.serving.stores import OnlineStore

SMALL = """\
seed: 5
synthetic:
  n_users: 20
  n_sics: 8
  n_merchants: 120
  txns_per_user: [30, 36]
autoencoder:
  epochs: 2
seqnbt:
  epochs: 2
evaluation:
  L_values: [3, 5]
"""


def run(capsys, *argv) -> tuple[int, str, str]:
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory) -> Path:
    """A work directory taken through every offline stage once."""
    wd = tmp_path_factory.mktemp("cli")
    (wd / "small.yaml").write_text(SMALL, encoding="utf-8")
    base = ["--workdir", str(wd), "--config", str(wd / "small.yaml")]
    for stage in ("generate-data", "ingest", "features", "train-ae", "encode", "train-seqnbt"):
        assert main([stage, *base]) == 0, stage
    return wd


def base_args(wd: Path) -> list[str]:
    return ["--workdir", str(wd), "--config", str(wd / "small.yaml")]


class TestParser:
    def test_every_subcommand_registered(self):
        sub = next(a for a in build_parser()._actions if a.dest == "command")
        assert set(sub.choices) == {
            "generate-data", "ingest", "features", "train-ae", "encode", "train-seqnbt", "evaluate",
            "sweep", "predict", "serve", "simulate-events", "api",
        }

    def test_global_flags_either_side_of_subcommand(self, tmp_path):
        p = build_parser()
        before = p.parse_args(["--workdir", str(tmp_path), "--seed", "3", "ingest"])
        after = p.parse_args(["ingest", "--workdir", str(tmp_path), "--seed", "3"])
        assert (before.workdir, before.seed) == (after.workdir, after.seed) == (str(tmp_path), 3)


class TestExitCodes:
    def test_missing_subcommand(self, capsys):
        code, _, err = run(capsys)
        assert code == 1 and "subcommand" in err

    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "ingest", "--bogus")
        assert code == 1 and "usage" in err

    def test_bad_integer(self, capsys):
        assert run(capsys, "generate-data", "--users", "many")[0] == 1

    def test_missing_input_is_data_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "ingest", "--workdir", tmp_path)
        assert code == 2 and "not found" in err

    def test_stage_out_of_order(self, capsys, tmp_path):
        code, _, err = run(capsys, "train-ae", "--workdir", tmp_path, "--input", tmp_path / "nothing.csv")
        assert code == 2

    def test_unknown_config_section(self, capsys, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("optimizer: {lr: 1}\n", encoding="utf-8")
        code, _, err = run(capsys, "generate-data", "--workdir", tmp_path, "--config", bad)
        assert code == 2 and "optimizer" in err

    def test_wrong_header_is_data_error(self, capsys, tmp_path):
        (tmp_path / FILES["raw"]).write_text("not,a,header\n1,2,3\n", encoding="utf-8")
        code, _, err = run(capsys, "ingest", "--workdir", tmp_path)
        assert code == 2 and "header" in err


class TestPipeline:
    def test_stage_outputs_exist(self, pipeline_dir):
        for name in ("raw", "clean", "merchants", "offline", "ae", "seq", "online"):
            assert (pipeline_dir / FILES[name]).exists(), name

    def test_evaluate_writes_report(self, capsys, pipeline_dir):
        code, out, _ = run(capsys, "evaluate", *base_args(pipeline_dir))
        assert code == 0
        assert out.splitlines()[0].split()[:3] == ["model", "L", "MAP@1"]
        lines = (pipeline_dir / FILES["report"]).read_text(encoding="utf-8").splitlines()
        assert lines[0] == "metric,K,L,value"
        assert any(line.startswith("seqnbt:MAP,1,5,") for line in lines)

    def test_sweep(self, capsys, pipeline_dir):
        code, out, _ = run(capsys, "sweep", *base_args(pipeline_dir), "--L-values", 3, 5, "--epochs", 1)
        assert code == 0
        assert "best L by seqnbt MAP@1" in out
        assert {line.split(",")[2] for line in (pipeline_dir / FILES["sweep"]).read_text().splitlines()[1:]} == {
            "3", "5"}

    def test_predict_known_card(self, capsys, pipeline_dir):
        online = OnlineStore.load(pipeline_dir / FILES["online"])
        card = min(u for u in online.buffers if online.history_len(u) >= 5)
        code, out, _ = run(capsys, "predict", card, *base_args(pipeline_dir), "--top-k", 3)
        assert code == 0
        rec = json.loads(out)
        assert rec["card_id"] == card and len(rec["sics"]) == 3
        assert rec["predicted_amount"] >= 0.01

    def test_predict_unknown_card(self, capsys, pipeline_dir):
        code, _, err = run(capsys, "predict", "no-such-card", *base_args(pipeline_dir))
        assert code == 2 and "fewer than" in err

    def test_simulate_then_serve(self, capsys, pipeline_dir):
        assert run(capsys, "simulate-events", *base_args(pipeline_dir), "-n", 40)[0] == 0
        events = pipeline_dir / FILES["events"]
        assert len(events.read_text().splitlines()) == 40
        out_path = pipeline_dir / "decisions.jsonl"
        code, _, err = run(capsys, "serve", *base_args(pipeline_dir), "--events", events, "--out", out_path)
        assert code == 0 and "events=40" in err
        records = [json.loads(line) for line in out_path.read_text().splitlines()]
        assert [r["event_id"] for r in records] == list(range(1, 41))
        assert all(r["decision"] in ("offer", "no_offer", "error") for r in records)

    def test_empty_stream(self, capsys, pipeline_dir, tmp_path):
        empty = tmp_path / "empty.txt"
        empty.write_text("", encoding="utf-8")
        out_path = tmp_path / "out.jsonl"
        code, _, err = run(capsys, "serve", *base_args(pipeline_dir), "--events", empty, "--out", out_path)
        assert code == 0 and "events=0" in err
        assert out_path.read_text() == ""

    def test_malformed_line_does_not_stop_stream(self, capsys, pipeline_dir, tmp_path):
        stream = tmp_path / "s.txt"
        stream.write_text("{broken\nnot even json\n", encoding="utf-8")
        out_path = tmp_path / "out.jsonl"
        code, _, err = run(capsys, "serve", *base_args(pipeline_dir), "--events", stream, "--out", out_path)
        assert code == 0 and "errors=2" in err
        assert [json.loads(line)["decision"] for line in out_path.read_text().splitlines()] == ["error", "error"]

    def test_unreachable_server(self, capsys, pipeline_dir, tmp_path):
        stream = tmp_path / "s.txt"
        stream.write_text('{"card_id": "x", "latitude": 1, "longitude": 2, "timestamp": "2019-01-01T00:00:00"}\n')
        code, _, err = run(capsys, "serve", *base_args(pipeline_dir), "--events", stream, "--out",
                           tmp_path / "o.jsonl", "--url", "http://127.0.0.1:9")
        assert code == 2 and "cannot reach" in err
