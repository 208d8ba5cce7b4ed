"""Directional experiments on synthetic data.

``run_distillation`` trains a long-utterance teacher, a short-crop baseline
and three students and scores all of them on short crops of held-out source
speakers. ``run_finetuning`` adapts a source model to a shifted target domain
under every regularizer / layer-selection pair and scores held-out target
speakers. Both return plain dicts of EERs (fractions, not percent).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backend import compute_eer, extract_embeddings, fit_backend, score_trials
from .data import Corpus, CorpusSpec, crop_or_whole, generate_corpus, make_domain_shift, make_trials
from .network import EncoderConfig, ParameterSet, forward
from .numerics import Rng
from .objectives import DistillationConfig, composite_loss, head_outputs
from .training import (FineTuneConfig, TrainConfig, class_index, finetune, start_point_distance,
                       train_classifier, train_student, train_teacher)

STUDENTS = {
    "student_kld": DistillationConfig(use_kld=True),
    "student_emd": DistillationConfig(use_emd=True),
    "student_all": DistillationConfig(use_kld=True, use_emd=True),
}


def band_profiles(dim: int, noise_scale: float = 1.5):
    """Per-dimension speaker / channel / noise multipliers in three bands.

    Band 1 carries strong speaker variation, band 2 weaker speaker variation
    with little frame noise, band 3 is nearly speaker-free nuisance. Speaker
    to frame-noise ratios of bands 1 and 2 are equal.
    """
    a, b = dim // 3, 2 * dim // 3
    sp, ch, nz = np.ones(dim), np.ones(dim), np.ones(dim)
    sp[:a], nz[:a], ch[:a] = 1.0, 0.7, 0.2
    sp[a:b], nz[a:b], ch[a:b] = 0.6, 0.42, 0.3
    sp[b:], nz[b:], ch[b:] = 0.1, 1.0, 0.3
    return sp, ch, nz * noise_scale


@dataclass(frozen=True)
class World:
    """Synthetic source and target populations plus the evaluation protocol."""
    feature_dim: int = 30
    spread: float = 0.4
    noise_scale: float = 1.5
    ar_coeff: float = 0.7
    train_speakers: int = 400
    utts_per_speaker: int = 10
    long_frames: tuple[int, int] = (100, 200)
    eval_speakers: int = 120
    eval_utts: int = 10
    crop_frames: int = 15
    trials_per_speaker: tuple[int, int] = (45, 150)
    # target domain
    target_train_speakers: int = 40
    target_train_utts: int = 6
    target_eval_speakers: int = 120
    target_frames: tuple[int, int] = (40, 80)
    shift_rotation: float = 0.3
    shift_scale: float = 0.9
    shift_bias: float = 2.0

    def corpus_spec(self, seed: int, n_speakers: int, utts: int, offset: int, **kw) -> CorpusSpec:
        sp, ch, nz = band_profiles(self.feature_dim, self.noise_scale)
        return CorpusSpec(n_speakers=n_speakers, utts_per_speaker=utts, feature_dim=self.feature_dim,
                          long_frames=self.long_frames, short_frames=self.target_frames,
                          speaker_spread=self.spread, channel_spread=self.spread, frame_noise=self.spread,
                          ar_coeff=self.ar_coeff, seed=seed, speaker_profile=sp, channel_profile=ch,
                          noise_profile=nz, speaker_offset=offset, **kw)

    def source(self, seed: int) -> tuple[Corpus, Corpus]:
        train = generate_corpus(self.corpus_spec(seed, self.train_speakers, self.utts_per_speaker, 0))
        held = generate_corpus(self.corpus_spec(seed + 1000, self.eval_speakers, self.eval_utts, 10_000))
        return train, held

    def target(self, seed: int) -> tuple[Corpus, Corpus]:
        shift = make_domain_shift(self.feature_dim, seed + 3000, self.shift_rotation, self.shift_scale,
                                  self.shift_bias)
        train = generate_corpus(self.corpus_spec(seed + 2000, self.target_train_speakers,
                                                 self.target_train_utts, 20_000, domain_shift=shift), "target")
        held = generate_corpus(self.corpus_spec(seed + 2500, self.target_eval_speakers, self.eval_utts,
                                                30_000, domain_shift=shift), "target")
        return train, held


@dataclass(frozen=True)
class Protocol:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        block_widths=(64, 64), conv_context=1, pooling="mean", embedding_dim=64, num_classes=400))
    epochs: int = 8
    batch_size: int = 32
    noam_warmup: int = 200
    noam_factor: float = 0.3
    lda_dim: int = 16
    backend: str = "plda"

    def train_config(self, seed: int, crop: int | None) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, noam_warmup=self.noam_warmup,
                           noam_factor=self.noam_factor, seed=seed, crop_frames=crop)


def evaluate_short(params: ParameterSet, cfg: EncoderConfig, backend_corpus: Corpus, held: Corpus,
                   crop: int, seed: int, lda_dim: int = 16, kind: str = "plda",
                   trials_per_speaker=(45, 150)) -> float:
    """EER on ``crop``-frame crops of ``held``; the back-end is fitted on crops of ``backend_corpus``."""
    rng = Rng(seed).spawn(7)
    held_x = [crop_or_whole(u, crop, rng) for u in held.utterances]
    fit_x = [crop_or_whole(u, crop, rng) for u in backend_corpus.utterances]
    be = fit_backend(extract_embeddings(params, cfg, fit_x), backend_corpus.speaker_ids, lda_dim)
    n_spk = len(held.speakers)
    trials = make_trials(held, trials_per_speaker[0] * n_spk, trials_per_speaker[1] * n_spk, Rng(seed).spawn(8))
    scores = score_trials(be, extract_embeddings(params, cfg, held_x), trials, kind)
    return compute_eer(scores, trials.is_target)[0]


def run_distillation(seed: int, world: World = World(), protocol: Protocol = Protocol(),
                     keep_models: bool = False) -> dict:
    """Teacher, short-crop baseline and the three students for one seed."""
    train, held = world.source(seed)
    cfg = replace(protocol.encoder, input_dim=world.feature_dim, num_classes=len(train.speakers))
    crop = world.crop_frames

    def score(p):
        return evaluate_short(p, cfg, train, held, crop, seed, protocol.lda_dim, protocol.backend,
                              world.trials_per_speaker)

    teacher = train_teacher(train, cfg, protocol.train_config(seed, None)).params
    short = protocol.train_config(seed, crop)
    models = {"teacher": teacher, "baseline": train_classifier(train, cfg, short).params}
    for name, dcfg in STUDENTS.items():
        models[name] = train_student(teacher, cfg, train, dcfg, short).params
    out = {"eer": {name: score(p) for name, p in models.items()}, "cfg": cfg}
    if keep_models:
        out["models"] = models
    return out


FINETUNE_ROWS = ("none", "l2", "l2sp", "l1sp")


@dataclass(frozen=True)
class FineTuneProtocol:
    epochs: int = 30
    batch_size: int = 32
    lr_replaced: float = 1e-2
    lr_rest: float = 1e-3
    lr_decay_every: int = 15
    # one strength for every penalty, so rows differ only in where they pull
    alpha: float = 0.01
    beta: float = 0.01
    weight_decay: float = 0.01
    selections: tuple[str, ...] = ("last2fc", "last2fc+pool+lastblock", "all")
    rows: tuple[str, ...] = FINETUNE_ROWS

    def config(self, row: str, selection: str, seed: int, crop: int) -> FineTuneConfig:
        kind = {"none": "none", "l2": "l2", "l2sp": "split_l2sp", "l1sp": "l1sp"}[row]
        alpha = self.weight_decay if row == "l2" else self.alpha
        return FineTuneConfig(regularizer=kind, alpha=alpha, beta=self.beta, selection=selection,
                              lr_replaced=self.lr_replaced, lr_rest=self.lr_rest,
                              lr_decay_every=self.lr_decay_every, epochs=self.epochs,
                              batch_size=self.batch_size, crop_frames=crop, seed=seed)


def task_loss(params: ParameterSet, cfg: EncoderConfig, corpus: Corpus, crop: int, seed: int) -> float:
    """Mean classification loss on one fixed set of crops."""
    rng = Rng(seed).spawn(9)
    x = [crop_or_whole(u, crop, rng) for u in corpus.utterances]
    idx = class_index(corpus)
    labels = np.array([idx[s] for s in corpus.speaker_ids])
    rep, _ = composite_loss(DistillationConfig(), head_outputs(forward(params, cfg, x)), labels,
                            reduction="mean")
    return rep.total


def run_finetuning(seed: int, source: ParameterSet, cfg: EncoderConfig, world: World = World(),
                   protocol: Protocol = Protocol(), ft: FineTuneProtocol = FineTuneProtocol()) -> dict:
    """Fine-tune ``source`` on the target domain under every (row, selection) pair.

    Returns EERs keyed by ``(row, selection)`` plus the unadapted source EER,
    the start-point distance and the final task loss of every run.
    """
    train, held = world.target(seed)
    crop = world.crop_frames

    def score(p, c):
        return evaluate_short(p, c, train, held, crop, seed, protocol.lda_dim, protocol.backend,
                              world.trials_per_speaker)

    out = {"eer": {"source": score(source, cfg)}, "distance": {}, "task_loss": {}}
    for selection in ft.selections:
        for row in ft.rows:
            res = finetune(source, cfg, train, ft.config(row, selection, seed, crop))
            key = (row, selection)
            out["eer"][key] = score(res.params, res.cfg)
            out["distance"][key] = start_point_distance(res.params, res.reference)
            out["task_loss"][key] = task_loss(res.params, res.cfg, train, crop, seed)
    return out


def source_model(seed: int, world: World = World(), protocol: Protocol = Protocol()):
    """The full-objective student used as the fine-tuning start point."""
    train, _ = world.source(seed)
    cfg = replace(protocol.encoder, input_dim=world.feature_dim, num_classes=len(train.speakers))
    teacher = train_teacher(train, cfg, protocol.train_config(seed, None)).params
    student = train_student(teacher, cfg, train, STUDENTS["student_all"],
                            protocol.train_config(seed, world.crop_frames)).params
    return student, cfg


def matched_distance(seed: int, source: ParameterSet, cfg: EncoderConfig, world: World = World(),
                     ft: FineTuneProtocol = FineTuneProtocol(), selection: str = "all", tolerance: float = 0.05,
                     max_iter: int = 30) -> dict:
    """Start-point distance of L2-SP vs L2-norm fine-tuning at matched final task loss.

    L2-SP runs at ``ft.alpha``; the L2-norm strength is bisected on a log scale
    until its task loss is within ``tolerance`` (relative) of the L2-SP one.
    """
    train, _ = world.target(seed)
    crop = world.crop_frames

    def run(row, alpha):
        res = finetune(source, cfg, train, replace(ft.config(row, selection, seed, crop), alpha=alpha))
        return task_loss(res.params, res.cfg, train, crop, seed), start_point_distance(res.params, res.reference)

    sp_loss, sp_dist = run("l2sp", ft.alpha)
    lo, hi = -8.0, 1.0  # log10 of the L2 strength
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        loss, dist = run("l2", 10 ** mid)
        if abs(loss - sp_loss) <= tolerance * sp_loss:
            return {"l2sp_loss": sp_loss, "l2sp_distance": sp_dist, "l2_loss": loss, "l2_distance": dist,
                    "l2_alpha": 10 ** mid, "matched": True}
        lo, hi = (mid, hi) if loss < sp_loss else (lo, mid)
    return {"l2sp_loss": sp_loss, "l2sp_distance": sp_dist, "l2_loss": loss, "l2_distance": dist,
            "l2_alpha": 10 ** mid, "matched": False}
