"""End-to-end tests of the command line on the tiny experiment."""

import csv
import json
import logging

import pytest

from src.main import EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_OK, EXIT_VERIFY, build_parser, main, parse_lambdas
from src.numerics import DegenerateInputError
from src.services import synthdata
from src.services.synthdata import DATASET_NAMES, MANIFEST_NAME, GenerationError


def cli(config_file, out, *args: str) -> int:
    command, *rest = args
    return main([command, "--config", str(config_file), "--out", str(out), *rest])


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_parse_lambdas():
    assert parse_lambdas("0.01,0.1,1,10") == [0.01, 0.1, 1.0, 10.0]
    for bad in ("", "a,b", "-1"):
        with pytest.raises(Exception):
            parse_lambdas(bad)


def test_parser_defaults():
    args = build_parser().parse_args(["ablate"])
    assert args.lambdas == [0.01, 0.1, 1.0, 10.0]
    assert not args.no_predistill
    assert build_parser().parse_args(["verify"]).cases == 5


def test_gen_writes_every_dataset(config_file, tmp_path):
    out = tmp_path / "exp"
    assert cli(config_file, out, "gen") == EXIT_OK
    for name in DATASET_NAMES:
        assert (out / "datasets" / name / MANIFEST_NAME).exists()
    assert (out / "config.json").exists()


def test_pipeline_is_reproducible_across_directories(config_file, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert cli(config_file, first, "pipeline", "--gen") == EXIT_OK
    assert cli(config_file, second, "pipeline", "--gen") == EXIT_OK

    rows = read_rows(first / "reports" / "results.csv")
    assert len(rows) == 7
    assert [row["dataset"] for row in rows] == ["finetune"] * 5 + ["degraded"] * 2
    for name in ("results.csv", "summary.json"):
        assert (first / "reports" / name).read_bytes() == (second / "reports" / name).read_bytes()
    for name in ("teacher", "predistill", "vlcd"):
        assert (first / "checkpoints" / f"{name}.ckpt").read_bytes() == \
            (second / "checkpoints" / f"{name}.ckpt").read_bytes()
        assert (first / "logs" / f"{name}.jsonl").read_bytes() == (second / "logs" / f"{name}.jsonl").read_bytes()

    summary = json.loads((first / "reports" / "summary.json").read_text(encoding="utf-8"))
    assert summary["student"]["init"] == "predistill"
    assert json.loads((first / "reports" / "bench.json").read_text(encoding="utf-8"))["models"][0]["model"] == \
        "teacher-mlp"


def test_pipeline_rerun_reuses_artifacts(config_file, tmp_path):
    out = tmp_path / "exp"
    assert cli(config_file, out, "pipeline", "--gen", "--no-predistill") == EXIT_OK
    before = (out / "checkpoints" / "vlcd-fresh.ckpt").stat().st_mtime_ns
    assert cli(config_file, out, "pipeline", "--no-predistill") == EXIT_OK
    assert (out / "checkpoints" / "vlcd-fresh.ckpt").stat().st_mtime_ns == before
    assert cli(config_file, out, "bench") == EXIT_OK


def test_pipeline_compare_writes_every_method(config_file, tmp_path):
    out = tmp_path / "exp"
    assert cli(config_file, out, "pipeline", "--gen", "--compare") == EXIT_OK
    rows = read_rows(out / "reports" / "comparison.csv")
    methods = {row["method"] for row in rows}
    assert {"vlcd", "no-kd", "kd-baseline", "nd-class"} <= methods
    results = read_rows(out / "reports" / "results.csv")
    assert {(row["config_hash"], row["seed"]) for row in rows} == {(results[0]["config_hash"], "7")}
    bench = read_rows(out / "reports" / "bench.csv")
    assert {(row["config_hash"], row["seed"]) for row in bench} == {(results[0]["config_hash"], "7")}


def test_missing_artifacts_exit_code(config_file, tmp_path):
    assert cli(config_file, tmp_path / "empty", "pipeline") == EXIT_MISSING
    assert cli(config_file, tmp_path / "nothing", "bench") == EXIT_MISSING


def test_ablate_writes_one_row_per_arm_and_task(config_file, tmp_path):
    out = tmp_path / "exp"
    assert cli(config_file, out, "ablate", "--lambdas", "0.1,1") == EXIT_OK
    report = out / "reports" / "ablation.csv"
    assert report.read_text(encoding="utf-8").splitlines()[0] == "arm,lambda,predistill,task,mean_auc,std_auc"
    rows = read_rows(report)
    arms = sorted({row["arm"] for row in rows})
    assert arms == sorted(["lambda-0.1-predistill", "lambda-1-predistill", "lambda-0.1-fresh", "lambda-1-fresh"])
    assert len(rows) == 4 * 7
    for arm in arms:
        assert (out / "arms" / arm).is_dir()


def test_parallel_ablation_matches_sequential(config_file, tmp_path):
    sequential, parallel = tmp_path / "seq", tmp_path / "par"
    assert cli(config_file, sequential, "ablate", "--lambdas", "0.1,1", "--jobs", "1") == EXIT_OK
    assert cli(config_file, parallel, "ablate", "--lambdas", "0.1,1", "--jobs", "2") == EXIT_OK
    for name in ("ablation.csv", "ablation_summary.json"):
        assert (sequential / "reports" / name).read_bytes() == (parallel / "reports" / name).read_bytes()
    for arm in ("lambda-0.1-predistill", "lambda-1-predistill", "lambda-0.1-fresh", "lambda-1-fresh"):
        for name in ("student.ckpt", "log.jsonl"):
            assert (sequential / "arms" / arm / name).read_bytes() == (parallel / "arms" / arm / name).read_bytes()


def test_verify_exit_codes():
    assert main(["verify", "--cases", "1"]) == EXIT_OK
    assert main(["verify", "--cases", "1", "--inject-fault", "gnd-sign-flip"]) == EXIT_VERIFY


def test_verify_defaults_pass():
    assert main(["verify"]) == EXIT_OK


def test_bad_config_exit_code(tmp_path):
    malformed = tmp_path / "malformed.json"
    malformed.write_text('{"seed": 1,', encoding="utf-8")
    unknown = tmp_path / "unknown.json"
    unknown.write_text('{"colour": "blue"}', encoding="utf-8")
    assert cli(malformed, tmp_path / "a", "gen") == EXIT_CONFIG
    assert cli(unknown, tmp_path / "b", "gen") == EXIT_CONFIG
    assert cli(tmp_path / "absent.json", tmp_path / "c", "gen") == EXIT_CONFIG


def test_changed_config_needs_force(config_file, tmp_path):
    out = tmp_path / "exp"
    assert cli(config_file, out, "gen") == EXIT_OK
    assert cli(config_file, out, "gen", "--seed", "8") == EXIT_CONFIG
    assert cli(config_file, out, "gen", "--seed", "8", "--force") == EXIT_OK
    snapshot = json.loads((out / "config.json").read_text(encoding="utf-8"))
    assert snapshot["seed"] == 8


def test_single_arm_matches_pipeline_student(config_file, tmp_path):
    out = tmp_path / "exp"
    assert cli(config_file, out, "pipeline", "--gen") == EXIT_OK
    assert cli(config_file, out, "ablate", "--lambdas", "0.1", "--jobs", "1") == EXIT_OK
    arm = out / "arms" / "lambda-0.1-predistill" / "student.ckpt"
    assert arm.read_bytes() == (out / "checkpoints" / "vlcd.ckpt").read_bytes()


@pytest.mark.parametrize("error", [
    GenerationError("finetune: task-1 positive rate 0.95 outside [0.2, 0.8]"),
    DegenerateInputError("unit_rows", 3),
    RuntimeError("worker crashed"),
])
def test_runtime_failures_exit_with_io_code(config_file, tmp_path, monkeypatch, caplog, error):
    def fail(*args, **kwargs):
        raise error

    monkeypatch.setattr(synthdata, "generate", fail)
    with caplog.at_level(logging.ERROR):
        assert cli(config_file, tmp_path / "exp", "gen") == EXIT_IO
    assert "Stage gen failed" in caplog.text
