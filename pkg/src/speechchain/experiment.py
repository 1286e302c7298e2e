"""Seed runner for the method grid: pretrained, conventional, proposed and the two ablations."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .asr import ASRConfig, ASRModel, ASRPretrainConfig, decode_utterances, perplexity, pretrain_asr
from .corpus import CorpusSplit, Utterance
from .metrics import MetricsReport, PerplexityCurve, corpus_per, f0_rmse, mcd, perplexity_curve
from .nn import pad_sequences
from .speaker import SpeakerConfig, SpeakerEmbedder, SpeakerPretrainConfig, cosine, embed_many, pretrain_speaker
from .training import Models, TrainConfig, reference_embeddings, run_phase_a, run_phase_b, validation_references
from .tts import FREE, TEACHER, TTSConfig, TTSModel, TTSPretrainConfig, pretrain_tts

log = logging.getLogger(__name__)

# method -> (use_speaker_consistency, use_stepwise); None marks the untouched pretrained models
METHODS: dict[str, tuple[bool, bool] | None] = {
    "pretrained": None,
    "conventional": (False, False),
    "proposed": (True, True),
    "no_speaker_consistency": (False, True),
    "no_stepwise": (True, False),
}


@dataclass
class ModelDims:
    asr: ASRConfig = field(default_factory=ASRConfig)
    tts: TTSConfig = field(default_factory=TTSConfig)
    speaker: SpeakerConfig = field(default_factory=SpeakerConfig)


@dataclass
class PretrainSettings:
    asr: ASRPretrainConfig = field(default_factory=ASRPretrainConfig)
    tts: TTSPretrainConfig = field(default_factory=TTSPretrainConfig)
    speaker: SpeakerPretrainConfig = field(default_factory=SpeakerPretrainConfig)


def pretrain_models(corpus: CorpusSplit, dims: ModelDims, settings: PretrainSettings, seed: int) -> tuple[Models, dict]:
    """Speaker embedder first (it conditions the TTS), then ASR and TTS, all on paired data."""
    n_spk = len(corpus.speakers)
    speaker = SpeakerEmbedder(dims.speaker, n_spk, seed=seed)
    hist = {"speaker": pretrain_speaker(speaker, corpus, replace(settings.speaker, seed=seed))}
    asr = ASRModel(dims.asr, seed=seed + 1)
    hist["asr"] = pretrain_asr(asr, corpus, replace(settings.asr, seed=seed))
    tts = TTSModel(dims.tts, seed=seed + 2)
    hist["tts"] = pretrain_tts(tts, speaker, corpus, replace(settings.tts, seed=seed))
    return Models(asr, tts, speaker), hist


# ---------------------------------------------------------------- evaluation
def synthesize_validation(models: Models, corpus: CorpusSplit, batch_size: int = 40) -> tuple[list[np.ndarray], np.ndarray]:
    """Free-mode synthesis of validation texts with fixed same-speaker references.

    Returns the per-utterance features and the reference embeddings.
    """
    refs = validation_references(corpus)
    feats_out, embs = [], []
    with ad.no_grad():
        for i in range(0, len(corpus.validation), batch_size):
            chunk = corpus.validation[i : i + batch_size]
            emb = reference_embeddings(models.speaker, refs[i : i + batch_size])
            out = models.tts([u.tokens for u in chunk], emb, FREE)
            feats_out.extend(out.utterance(k) for k in range(len(chunk)))
            embs.append(emb)
    return feats_out, np.concatenate(embs)


def mean_perplexity(asr: ASRModel, features, token_seqs, batch_size: int = 40) -> float:
    vals = []
    with ad.no_grad():
        for i in range(0, len(features), batch_size):
            feats, lens = pad_sequences(list(features[i : i + batch_size]))
            vals.append(perplexity(asr, feats, lens, token_seqs[i : i + batch_size]))
    return float(np.mean(np.concatenate(vals)))


def human_baseline(pre_asr: ASRModel, corpus: CorpusSplit) -> float:
    return mean_perplexity(pre_asr, [u.features for u in corpus.validation], [u.tokens for u in corpus.validation])


def synthesized_perplexity(pre_asr: ASRModel, models: Models, corpus: CorpusSplit) -> float:
    feats, _ = synthesize_validation(models, corpus)
    return mean_perplexity(pre_asr, feats, [u.tokens for u in corpus.validation])


def validation_cosine(models: Models, corpus: CorpusSplit) -> float:
    feats, ref_emb = synthesize_validation(models, corpus)
    return float(np.mean(cosine(embed_many(models.speaker, feats), ref_emb)))


def _heldout_reference(corpus: CorpusSplit, speaker: int, k: int) -> Utterance:
    pool = [u for u in corpus.validation if u.speaker == speaker]
    return pool[k % len(pool)]


def resynthesis_scores(models: Models, corpus: CorpusSplit, other_speaker: bool) -> tuple[float, float]:
    """Teacher-mode resynthesis of test items; MCD and F0 RMSE against the human rendering."""
    n_spk = len(corpus.speakers)
    refs = []
    for k, u in enumerate(corpus.test):
        spk = (u.speaker + 1) % n_spk if other_speaker else u.speaker
        refs.append(_heldout_reference(corpus, spk, k).features)
    mcds, f0s = [], []
    with ad.no_grad():
        for i in range(0, len(corpus.test), 40):
            chunk = corpus.test[i : i + 40]
            emb = reference_embeddings(models.speaker, refs[i : i + 40])
            out = models.tts([u.tokens for u in chunk], emb, TEACHER, [u.prosody for u in chunk])
            for k, u in enumerate(chunk):
                x_hat = out.utterance(k)
                mcds.append(mcd(u.features, x_hat))
                f0s.append(f0_rmse(u.features, x_hat))
    return float(np.mean(mcds)), float(np.mean(f0s))


def evaluate(models: Models, corpus: CorpusSplit, pre_asr: ASRModel | None = None, split: str = "test") -> MetricsReport:
    utts = getattr(corpus, split)
    hyps = decode_utterances(models.asr, [u.features for u in utts])
    score = corpus_per([u.tokens for u in utts], hyps)
    m_same, f_same = resynthesis_scores(models, corpus, other_speaker=False)
    m_other, f_other = resynthesis_scores(models, corpus, other_speaker=True)
    ppl = synthesized_perplexity(pre_asr, models, corpus) if pre_asr is not None else float("nan")
    return MetricsReport(
        per_percent=score,
        mcd_db=m_same,
        f0_rmse=f_same,
        perplexity=ppl,
        mcd_db_other_speaker=m_other,
        f0_rmse_other_speaker=f_other,
        counts={split: len(utts), "test_resynthesis": len(corpus.test)},
    )


# ------------------------------------------------------------------- runner
@dataclass
class MethodResult:
    report: MetricsReport
    cosine: float
    curve: PerplexityCurve | None = None
    history: list = field(default_factory=list)
    models: Models | None = None


@dataclass
class SeedResult:
    seed: int
    methods: dict[str, MethodResult]
    baseline: float
    seconds: float


def run_seed(
    corpus: CorpusSplit,
    train: TrainConfig,
    dims: ModelDims,
    settings: PretrainSettings,
    seed: int,
    methods=tuple(METHODS),
    keep_models: bool = False,
) -> SeedResult:
    """Pretrain once, share phase A between the step-wise runs, then run phase B per method."""
    t0 = time.perf_counter()
    pre, _ = pretrain_models(corpus, dims, settings, seed)
    pre_asr = pre.clone().asr
    baseline = human_baseline(pre_asr, corpus)
    log.info("seed %d pretrained in %.1fs; human baseline perplexity %.4f", seed, time.perf_counter() - t0, baseline)
    results: dict[str, MethodResult] = {}
    after_a: Models | None = None
    phase_a_hist: list = []
    for name in methods:
        flags = METHODS[name]
        if flags is None:
            results[name] = MethodResult(evaluate(pre, corpus, pre_asr), validation_cosine(pre, corpus), models=pre.clone() if keep_models else None)
            continue
        use_sc, stepwise = flags
        cfg = replace(train, seed=seed, use_speaker_consistency=use_sc, use_stepwise=stepwise)
        if stepwise:
            if after_a is None:
                after_a = pre.clone()
                phase_a_hist = run_phase_a(after_a, corpus, cfg, np.random.default_rng([seed, 1])).history
            models = after_a.clone()
        else:
            models = pre.clone()
        points = [(0, synthesized_perplexity(pre_asr, models, corpus))]

        def track(phase, position, m, points=points):
            if phase == "B":
                points.append((position, synthesized_perplexity(pre_asr, m, corpus)))

        hist = run_phase_b(models, corpus, cfg, np.random.default_rng([seed, 2, int(use_sc), int(stepwise)]), track).history
        results[name] = MethodResult(
            evaluate(models, corpus, pre_asr),
            validation_cosine(models, corpus),
            perplexity_curve(points, baseline),
            (phase_a_hist if stepwise else []) + hist,
            models if keep_models else None,
        )
        r = results[name]
        log.info("seed %d %s: PER %.2f cos %.4f curve %s", seed, name, r.report.per_percent, r.cosine, np.round(r.curve.values, 3).tolist())
    return SeedResult(seed, results, baseline, time.perf_counter() - t0)


def seed_average(results: list[SeedResult]) -> dict[str, dict[str, float]]:
    out = {}
    for name in results[0].methods:
        rows = [r.methods[name] for r in results]
        out[name] = {
            "per_percent": float(np.mean([m.report.per_percent for m in rows])),
            "mcd_db": float(np.mean([m.report.mcd_db for m in rows])),
            "f0_rmse": float(np.mean([m.report.f0_rmse for m in rows])),
            "cosine": float(np.mean([m.cosine for m in rows])),
        }
    return out


def mean_curve(results: list[SeedResult], method: str) -> PerplexityCurve:
    curves = [r.methods[method].curve for r in results]
    vals = np.mean([c.values for c in curves], axis=0)
    return PerplexityCurve(curves[0].epochs, vals.tolist(), float(np.mean([r.baseline for r in results])))
