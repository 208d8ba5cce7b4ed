"""Command-line pipeline: gen-data, train-teacher, train-student, finetune, evaluate.

Every subcommand reads a JSON config (``--config``; omitted keys take the
defaults below, unknown keys are an error), echoes the effective config into
its output directory and writes deterministic artifacts.

Exit codes: 0 success, 1 usage or config error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .backend import compute_eer, extract_embeddings, fit_backend, score_trials
from .data import (CorpusSpec, crop_or_whole, generate_corpus, load_corpus, load_trials, make_domain_shift,
                   make_trials, save_corpus, save_trials, summarize)
from .network import EncoderConfig, load_params, save_params
from .numerics import Rng
from .objectives import DistillationConfig
from .training import FineTuneConfig, TrainConfig, finetune, train_student, train_teacher

CONFIG_VERSION = 1

DEFAULT_CONFIG = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "corpus": {
        "n_speakers": 200, "utts_per_speaker": 20, "feature_dim": 30,
        "long_frames": [300, 800], "short_frames": [80, 240],
        "speaker_spread": 1.0, "channel_spread": 0.5, "frame_noise": 1.0, "ar_coeff": 0.5,
    },
    # target speakers are split into disjoint fine-tune and evaluation sets
    "target": {
        "train_speakers": 20, "eval_speakers": 20, "utts_per_speaker": 12,
        "shift_rotation": 3.141592653589793, "shift_scale": 0.9, "shift_bias": 1.0,
    },
    "trials": {"n_target": 1000, "n_nontarget": 4000},
    "encoder": {
        "block_widths": [32, 32, 32], "conv_context": 3, "pooling": "lde", "lde_components": 4,
        "embedding_dim": 32, "embedding_tap": "post",
    },
    "teacher": {
        "batch_size": 64, "epochs": 30, "schedule": "noam", "base_lr": 1e-3,
        "noam_model_size": 32, "noam_warmup": 400, "noam_factor": 1.0,
    },
    "student": {
        "batch_size": 64, "epochs": 30, "schedule": "noam", "base_lr": 1e-3,
        "noam_model_size": 32, "noam_warmup": 400, "noam_factor": 1.0, "crop_frames": 200,
        "class_loss": "softmax", "asoftmax_margin": 2, "use_class": True, "use_kld": True, "use_emd": True,
        "weight_class": 1.0, "weight_kld": 1.0, "weight_emd": 1.0, "temperature": 1.0,
    },
    "finetune": {
        "regularizer": "split_l2sp", "alpha": 0.1, "beta": 0.01, "selection": "last2fc",
        "lr_replaced": 1e-3, "lr_rest": 1e-5, "lr_decay_every": 15, "lr_decay_factor": 0.1,
        "epochs": 45, "batch_size": 32, "crop_frames": 200, "include_biases": True,
        "class_loss": "softmax", "asoftmax_margin": 2,
    },
    # crop_frames null scores whole utterances
    "backend": {"kind": "plda", "lda_dim": 16, "crop_frames": None},
}

TRAIN_KEYS = ("batch_size", "epochs", "schedule", "base_lr", "noam_model_size", "noam_warmup", "noam_factor")
DISTILL_KEYS = ("class_loss", "asoftmax_margin", "use_class", "use_kld", "use_emd", "weight_class",
                "weight_kld", "weight_emd", "temperature")


class UsageError(Exception):
    """Bad invocation or config (exit 1)."""


class RunError(Exception):
    """Missing or unusable data at run time (exit 2)."""


# ---------------------------------------------------------------------------
# config


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where!r} must be an object")
            out[key] = _merge(defaults[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None, seed: int | None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise UsageError("config must be a JSON object")
        if user.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise UsageError(f"unsupported config version {user.get('version')!r}; expected {CONFIG_VERSION}")
    cfg = _merge(DEFAULT_CONFIG, user)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _build(kind, **kw):
    try:
        return kind(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {kind.__name__}: {exc}") from exc


def corpus_spec(cfg: dict, n_speakers: int, utts: int, seed: int, offset: int, shift=None) -> CorpusSpec:
    c = cfg["corpus"]
    spec = _build(CorpusSpec, n_speakers=n_speakers, utts_per_speaker=utts, feature_dim=c["feature_dim"],
                  long_frames=tuple(c["long_frames"]), short_frames=tuple(c["short_frames"]),
                  speaker_spread=c["speaker_spread"], channel_spread=c["channel_spread"],
                  frame_noise=c["frame_noise"], ar_coeff=c["ar_coeff"], domain_shift=shift, seed=seed,
                  speaker_offset=offset)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(f"invalid corpus config: {exc}") from exc
    return spec


def encoder_config(cfg: dict, input_dim: int, num_classes: int) -> EncoderConfig:
    e = cfg["encoder"]
    return _build(EncoderConfig, input_dim=input_dim, block_widths=tuple(e["block_widths"]),
                  conv_context=e["conv_context"], pooling=e["pooling"], lde_components=e["lde_components"],
                  embedding_dim=e["embedding_dim"], num_classes=num_classes, embedding_tap=e["embedding_tap"])


def train_config(section: dict, seed: int, crop) -> TrainConfig:
    return _build(TrainConfig, **{k: section[k] for k in TRAIN_KEYS}, seed=seed, crop_frames=crop)


# ---------------------------------------------------------------------------
# file helpers


def _outputs(out_dir: Path, names, force: bool):
    existing = [n for n in names if (out_dir / n).exists()]
    if existing and not force:
        raise UsageError(f"{out_dir} already contains {', '.join(existing)}; use --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_corpus(path: Path):
    if not path.exists():
        raise RunError(f"missing corpus file {path}")
    try:
        return load_corpus(path)
    except ValueError as exc:
        raise RunError(str(exc)) from exc


def _load_model(path: Path):
    if not path.exists():
        raise RunError(f"missing model file {path}")
    try:
        return load_params(path)
    except ValueError as exc:
        raise RunError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands

SOURCE, TARGET_TRAIN, TARGET_EVAL, TRIALS = "source.corpus", "target_train.corpus", "target_eval.corpus", "trials.tsv"


def cmd_gen_data(cfg: dict, args) -> dict:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    seed, c, t = cfg["seed"], cfg["corpus"], cfg["target"]
    source = generate_corpus(corpus_spec(cfg, c["n_speakers"], c["utts_per_speaker"], seed, 0))
    shift = make_domain_shift(c["feature_dim"], seed + 3, t["shift_rotation"], t["shift_scale"], t["shift_bias"])
    tt = generate_corpus(corpus_spec(cfg, t["train_speakers"], t["utts_per_speaker"], seed + 1, 100_000, shift),
                         "target")
    te = generate_corpus(corpus_spec(cfg, t["eval_speakers"], t["utts_per_speaker"], seed + 2, 200_000, shift),
                         "target")
    try:
        trials = make_trials(te, cfg["trials"]["n_target"], cfg["trials"]["n_nontarget"], Rng(seed + 4))
    except ValueError as exc:
        raise UsageError(f"invalid trial config: {exc}") from exc
    save_corpus(source, out / SOURCE)
    save_corpus(tt, out / TARGET_TRAIN)
    save_corpus(te, out / TARGET_EVAL)
    save_trials(trials, out / TRIALS)
    _write_json(out / "config.json", cfg)
    return {"source": summarize(source), "target_train": summarize(tt), "target_eval": summarize(te),
            "trials": {"n_target": trials.n_target, "n_nontarget": trials.n_nontarget}}


def cmd_train_teacher(cfg: dict, args) -> dict:
    out = Path(args.out)
    _outputs(out, ["teacher.model", "teacher_metrics.tsv"], args.force)
    corpus = _load_corpus(Path(args.data) / SOURCE)
    enc = encoder_config(cfg, corpus.feature_dim, len(corpus.speakers))
    res = train_teacher(corpus, enc, train_config(cfg["teacher"], cfg["seed"], None),
                        metrics_path=out / "teacher_metrics.tsv")
    save_params(res.params, enc, out / "teacher.model")
    _write_json(out / "config.json", cfg)
    return {"model": str(out / "teacher.model"), "final_loss": res.history[-1]["loss"] if res.history else None}


def cmd_train_student(cfg: dict, args) -> dict:
    out = Path(args.out)
    _outputs(out, ["student.model", "student_metrics.tsv"], args.force)
    teacher, enc = _load_model(Path(args.teacher))
    corpus = _load_corpus(Path(args.data) / SOURCE)
    if len(corpus.speakers) != enc.num_classes or corpus.feature_dim != enc.input_dim:
        raise RunError("teacher model does not match the source corpus")
    s = cfg["student"]
    dcfg = _build(DistillationConfig, **{k: s[k] for k in DISTILL_KEYS})
    res = train_student(teacher, enc, corpus, dcfg, train_config(s, cfg["seed"] + 1, s["crop_frames"]),
                        metrics_path=out / "student_metrics.tsv")
    save_params(res.params, enc, out / "student.model")
    _write_json(out / "config.json", cfg)
    return {"model": str(out / "student.model"), "final_loss": res.history[-1]["loss"] if res.history else None}


def cmd_finetune(cfg: dict, args) -> dict:
    out = Path(args.out)
    _outputs(out, ["finetuned.model", "finetune_metrics.tsv"], args.force)
    student, enc = _load_model(Path(args.student))
    corpus = _load_corpus(Path(args.data) / TARGET_TRAIN)
    if corpus.feature_dim != enc.input_dim:
        raise RunError("student model does not match the target corpus feature dim")
    ft = _build(FineTuneConfig, **cfg["finetune"], seed=cfg["seed"] + 2)
    res = finetune(student, enc, corpus, ft, metrics_path=out / "finetune_metrics.tsv")
    save_params(res.params, res.cfg, out / "finetuned.model")
    _write_json(out / "config.json", cfg)
    return {"model": str(out / "finetuned.model"), "final_loss": res.history[-1]["loss"] if res.history else None}


def cmd_evaluate(cfg: dict, args) -> dict:
    out = Path(args.out)
    _outputs(out, ["scores.tsv", "report.json"], args.force)
    params, enc = _load_model(Path(args.model))
    data = Path(args.data)
    fit_corpus, eval_corpus = _load_corpus(data / TARGET_TRAIN), _load_corpus(data / TARGET_EVAL)
    if not (data / TRIALS).exists():
        raise RunError(f"missing trial list {data / TRIALS}")
    try:
        trials = load_trials(data / TRIALS)
    except ValueError as exc:
        raise RunError(str(exc)) from exc
    if len(trials) and max(trials.enroll.max(), trials.test.max()) >= len(eval_corpus):
        raise RunError("trial list refers to utterances beyond the evaluation corpus")
    b = cfg["backend"]
    kind = args.backend or b["kind"]
    lda_dim = None if args.skip_lda else b["lda_dim"]
    crop = b["crop_frames"]
    rng = Rng(cfg["seed"] + 3)

    def inputs(corpus):
        if crop is None:
            return [u.features for u in corpus.utterances]
        return [crop_or_whole(u, crop, rng) for u in corpus.utterances]

    try:
        backend = fit_backend(extract_embeddings(params, enc, inputs(fit_corpus)), fit_corpus.speaker_ids, lda_dim)
        emb = extract_embeddings(params, enc, inputs(eval_corpus))
        scores = score_trials(backend, emb, trials, kind)
        eer, threshold = compute_eer(scores, trials.is_target)
    except ValueError as exc:
        raise RunError(str(exc)) from exc
    with open(out / "scores.tsv", "w") as fh:
        for e, t, s in zip(trials.enroll, trials.test, scores):
            fh.write(f"{e}\t{t}\t{float(s):.17g}\n")
    report = {"eer": eer, "threshold": threshold, "n_target": trials.n_target,
              "n_nontarget": trials.n_nontarget, "backend": kind, "lda_dim": lda_dim}
    _write_json(out / "report.json", report)
    _write_json(out / "config.json", cfg)
    return report


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="svdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults fill omitted keys)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--threads", type=int, help="cap on linear-algebra worker threads")
        if name != "gen-data":
            p.add_argument("--data", required=True, help="directory written by gen-data")
        if name == "train-student":
            p.add_argument("--teacher", required=True, help="teacher model file")
        if name == "finetune":
            p.add_argument("--student", required=True, help="student model file")
        if name == "evaluate":
            p.add_argument("--model", required=True, help="model file to evaluate")
            p.add_argument("--backend", choices=("cosine", "plda"), help="scoring back-end")
            p.add_argument("--skip-lda", action="store_true", help="score without LDA projection")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config, args.seed)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=args.threads)
        else:
            limiter = nullcontext()
        with limiter:
            result = COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RunError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"config": cfg, "result": result}, indent=2, sort_keys=True, default=_jsonable))
    return 0


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


if __name__ == "__main__":
    sys.exit(main())
