import json
from pathlib import Path

from svdistill.cli import main

# 5 source speakers, 3 target speakers, 2 epochs per training stage
TINY_CONFIG = {
    "version": 1,
    "corpus": {"n_speakers": 5, "utts_per_speaker": 4, "long_frames": [40, 60], "short_frames": [20, 40]},
    "target": {"train_speakers": 3, "eval_speakers": 3, "utts_per_speaker": 4},
    "trials": {"n_target": 10, "n_nontarget": 30},
    "encoder": {"block_widths": [16, 16], "embedding_dim": 8},
    "teacher": {"epochs": 2, "batch_size": 8},
    "student": {"epochs": 2, "batch_size": 8, "crop_frames": 20},
    "finetune": {"epochs": 2, "batch_size": 8, "crop_frames": 20},
    "backend": {"lda_dim": 2, "crop_frames": 20},
}


def write_config(path: Path, cfg: dict = TINY_CONFIG) -> Path:
    path.write_text(json.dumps(cfg))
    return path


def run_pipeline(root: Path, config: Path, extra=()) -> dict:
    """All five stages; returns the exit codes and the stage directories."""
    root.mkdir(parents=True, exist_ok=True)
    d = {name: root / name for name in ("data", "teacher", "student", "finetuned", "eval")}
    common = ["--config", str(config), *extra]
    codes = [
        main(["gen-data", *common, "--out", str(d["data"])]),
        main(["train-teacher", *common, "--data", str(d["data"]), "--out", str(d["teacher"])]),
        main(["train-student", *common, "--data", str(d["data"]), "--teacher", str(d["teacher"] / "teacher.model"),
              "--out", str(d["student"])]),
        main(["finetune", *common, "--data", str(d["data"]), "--student", str(d["student"] / "student.model"),
              "--out", str(d["finetuned"])]),
        main(["evaluate", *common, "--data", str(d["data"]), "--model", str(d["finetuned"] / "finetuned.model"),
              "--out", str(d["eval"])]),
    ]
    return {"codes": codes, **d}


def artifact_bytes(run: dict) -> dict:
    """Every file written by a pipeline run, keyed by stage/name."""
    out = {}
    for stage in ("data", "teacher", "student", "finetuned", "eval"):
        for f in sorted(run[stage].iterdir()):
            out[f"{stage}/{f.name}"] = f.read_bytes()
    return out


# one "criterion N: PASS/FAIL" line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
