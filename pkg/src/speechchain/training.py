"""Semi-supervised joint training of the TTS and ASR models through the TTS -> ASR cycle.

Unpaired text is synthesized by the TTS (free mode, random paired-set
reference speaker), optionally SpecAugment-masked, and scored by the ASR:
the cycle loss is the mean per-token NLL of the source text.  The speaker
consistency loss is the negative cosine between the speaker embeddings of the
synthesized speech and of the reference speech.

Step-wise optimization runs in two phases: phase A trains only the ASR with
the TTS frozen; phase B trains both (duration predictor and speaker model
stay frozen).  Paired items in the mixed stream use the supervised losses.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .asr import ASRModel, hybrid_loss
from .augment import SpecAugmentPolicy, specaugment
from .autodiff import Tensor
from .corpus import CorpusSplit, Utterance
from .errors import ContractError
from .nn import pad_sequences
from .optim import Adam, EarlyStopping, bucketed_batches, make_optimizer, restore, snapshot
from .speaker import SpeakerEmbedder
from .tts import FREE, TEACHER, SynthesisOutput, TTSModel, tts_loss_terms

log = logging.getLogger(__name__)

DURATION_PARTITION = "tts.va.duration"


@dataclass
class TrainConfig:
    alpha: float = 0.1
    asr_lr: float = 1e-4
    tts_lr: float = 1e-4
    batch_size: int = 16
    patience: int = 5
    phase_a_max_epochs: int = 10
    phase_b_epochs: int = 6
    optimizer: str = "adam"
    max_grad_norm: float | None = 5.0
    specaugment: SpecAugmentPolicy = field(default_factory=SpecAugmentPolicy)
    augment_synthesized: bool = True
    augment_paired: bool = True
    tts_loss_reduction: str = "mean"
    # CTC share of every ASR loss (cycle and paired); 0 gives the pure attention NLL
    ctc_weight: float = 0.5
    use_speaker_consistency: bool = True
    use_stepwise: bool = True
    # phase-B progress callbacks per epoch (the perplexity curve's resolution)
    curve_points_per_epoch: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError("TrainConfig: alpha must be >= 0")
        if self.patience < 1:
            raise ContractError("TrainConfig: patience must be >= 1")
        if not 0.0 <= self.ctc_weight < 1.0:
            raise ContractError("TrainConfig: ctc_weight must lie in [0, 1)")
        if self.tts_loss_reduction not in ("sum", "mean"):
            raise ContractError("TrainConfig: tts_loss_reduction must be 'sum' or 'mean'")
        if self.curve_points_per_epoch < 1:
            raise ContractError("TrainConfig: curve_points_per_epoch must be >= 1")


@dataclass
class Models:
    asr: ASRModel
    tts: TTSModel
    speaker: SpeakerEmbedder

    def clone(self) -> "Models":
        return copy.deepcopy(self)


@dataclass
class LossBreakdown:
    total: Tensor
    cycle: float
    speaker_consistency: float
    alpha: float

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), "cycle": self.cycle, "speaker_consistency": self.speaker_consistency, "alpha": self.alpha}


# ------------------------------------------------------------------- losses
def reference_embeddings(speaker: SpeakerEmbedder, references: Sequence[np.ndarray]) -> np.ndarray:
    feats, lens = pad_sequences(list(references))
    with ad.no_grad():
        return speaker(feats, lens).data


def sample_references(corpus: CorpusSplit, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Reference speech drawn uniformly (with replacement) from the paired utterances."""
    idx = rng.integers(0, len(corpus.paired), size=count)
    return [corpus.paired[i].features for i in idx]


def synthesize_cycle(models: Models, token_seqs, ref_emb: np.ndarray) -> SynthesisOutput:
    return models.tts(list(token_seqs), ref_emb, FREE)


def cycle_loss_from(
    models: Models, out: SynthesisOutput, token_seqs, rng=None, policy: SpecAugmentPolicy | None = None, ctc_weight: float = 0.0
) -> Tensor:
    """Mean per-token NLL of the source text under the ASR given the (optionally masked) synthesized speech.

    A positive ``ctc_weight`` mixes in the per-token CTC NLL, matching the ASR's own training objective.
    """
    feats = out.features
    if policy is not None:
        feats = specaugment(feats, policy, rng, out.frame_lengths)
    return hybrid_loss(models.asr, feats, out.frame_lengths, token_seqs, ctc_weight=ctc_weight)


def cycle_loss(models: Models, token_seqs, references, rng=None, policy: SpecAugmentPolicy | None = None, ctc_weight: float = 0.0) -> Tensor:
    out = synthesize_cycle(models, token_seqs, reference_embeddings(models.speaker, references))
    return cycle_loss_from(models, out, token_seqs, rng, policy, ctc_weight)


def cosine_tensor(a: Tensor, b) -> Tensor:
    """Row-wise cosine; the denominator is floored at 1e-8 so zero embeddings give 0, not NaN."""
    b = ad.as_tensor(b)
    return ad.dot(a, b) / ad.clamp_min(ad.l2_norm(a) * ad.l2_norm(b), 1e-8)


def speaker_consistency_from(speaker: SpeakerEmbedder, feats: Tensor, lengths, ref_emb) -> Tensor:
    """-cos(embed(synthesized), reference embedding), averaged over the batch."""
    return -cosine_tensor(speaker(feats, lengths), ref_emb).mean()


def speaker_consistency_loss(speaker: SpeakerEmbedder, synthesized, reference) -> Tensor:
    """Single-utterance form: ``synthesized`` (T, F) array or Tensor, ``reference`` (T', F) array."""
    ref = reference_embeddings(speaker, [np.asarray(reference)])
    syn = ad.as_tensor(synthesized)
    return speaker_consistency_from(speaker, syn.reshape(1, *syn.shape), [syn.shape[0]], ref)


def combine(cycle: Tensor, sc: Tensor | None, alpha: float) -> LossBreakdown:
    if sc is None:
        return LossBreakdown(cycle, cycle.item(), float("nan"), alpha)
    return LossBreakdown(cycle + sc * alpha, cycle.item(), sc.item(), alpha)


def joint_loss(models: Models, token_seqs, references, alpha: float = 0.1, rng=None, policy=None, ctc_weight: float = 0.0) -> LossBreakdown:
    """Cycle loss plus ``alpha`` times the speaker-consistency loss, with the components reported."""
    ref_emb = reference_embeddings(models.speaker, references)
    out = synthesize_cycle(models, token_seqs, ref_emb)
    cyc = cycle_loss_from(models, out, token_seqs, rng, policy, ctc_weight)
    sc = speaker_consistency_from(models.speaker, out.features, out.frame_lengths, ref_emb)
    return combine(cyc, sc, alpha)


# --------------------------------------------------------------- partitions
def partition_parameters(model) -> dict[str, list[tuple[str, Tensor]]]:
    parts: dict[str, list[tuple[str, Tensor]]] = {}
    for attr, part in model.PARTITIONS.items():
        for name, p in getattr(model, attr).named_parameters(f"{attr}."):
            parts.setdefault(part, []).append((name, p))
    return parts


def all_partitions(models: Models) -> dict[str, list[tuple[str, Tensor]]]:
    out = {}
    for m in (models.asr, models.tts, models.speaker):
        out.update(partition_parameters(m))
    return out


def trainable(model) -> list[tuple[str, Tensor]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


# ------------------------------------------------------------- mixed stream
@dataclass
class StreamItem:
    kind: str  # "paired" | "unpaired"
    index: int


def mixed_batches(corpus: CorpusSplit, batch_size: int, rng: np.random.Generator) -> list[list[StreamItem]]:
    """Paired and unpaired items shuffled together (length-bucketed) into minibatches."""
    items = [StreamItem("paired", i) for i in range(len(corpus.paired))] + [StreamItem("unpaired", j) for j in range(len(corpus.unpaired))]
    lengths = [len(corpus.paired[it.index].tokens) if it.kind == "paired" else len(corpus.unpaired[it.index]) for it in items]
    return [[items[k] for k in b] for b in bucketed_batches(lengths, batch_size, rng)]


@dataclass
class StepLog:
    total: float
    cycle: float = float("nan")
    speaker_consistency: float = float("nan")
    asr_ce: float = float("nan")
    tts: float = float("nan")
    n_paired: int = 0
    n_unpaired: int = 0


def _tts_supervised(models: Models, utts: Sequence[Utterance], reduction: str) -> Tensor:
    ref_emb = reference_embeddings(models.speaker, [u.features for u in utts])
    out = models.tts([u.tokens for u in utts], ref_emb, TEACHER, [u.prosody for u in utts])
    terms = tts_loss_terms(out, [u.features for u in utts], [u.prosody for u in utts])
    if reduction == "mean":
        frames = float(out.frame_lengths.sum()) * out.features.shape[-1] / len(utts)
        tokens = float(out.token_lengths.sum()) / len(utts)
        scale = {"post_l1": frames, "dec_l1": frames, "pitch_l2": tokens, "energy_l2": tokens, "duration_l2": tokens}
        terms = {k: v * (1.0 / scale[k]) for k, v in terms.items()}
    total = terms["post_l1"]
    for k in ("dec_l1", "pitch_l2", "energy_l2", "duration_l2"):
        total = total + terms[k]
    return total


def train_step(
    models: Models,
    corpus: CorpusSplit,
    batch: list[StreamItem],
    cfg: TrainConfig,
    rng: np.random.Generator,
    train_tts: bool,
) -> tuple[Tensor, StepLog]:
    """Loss for one mixed minibatch; each item weighs 1/len(batch)."""
    paired = [corpus.paired[it.index] for it in batch if it.kind == "paired"]
    texts = [corpus.unpaired[it.index] for it in batch if it.kind == "unpaired"]
    n = len(batch)
    total: Tensor | None = None
    rec = StepLog(0.0, n_paired=len(paired), n_unpaired=len(texts))
    if texts:
        refs = sample_references(corpus, len(texts), rng)
        ref_emb = reference_embeddings(models.speaker, refs)
        if train_tts:
            out = synthesize_cycle(models, texts, ref_emb)
        else:
            with ad.no_grad():
                out = synthesize_cycle(models, texts, ref_emb)
        policy = cfg.specaugment if cfg.augment_synthesized else None
        cyc = cycle_loss_from(models, out, texts, rng, policy, cfg.ctc_weight)
        sc = None
        if train_tts and cfg.use_speaker_consistency:
            sc = speaker_consistency_from(models.speaker, out.features, out.frame_lengths, ref_emb)
        parts = combine(cyc, sc, cfg.alpha)
        rec.cycle, rec.speaker_consistency = parts.cycle, parts.speaker_consistency
        total = parts.total * (len(texts) / n)
    if paired:
        feats, lens = pad_sequences([u.features for u in paired])
        if cfg.augment_paired:
            feats = specaugment(feats, cfg.specaugment, rng, lens)
        sup = hybrid_loss(models.asr, feats, lens, [u.tokens for u in paired], ctc_weight=cfg.ctc_weight)
        rec.asr_ce = sup.item()
        if train_tts:
            t_loss = _tts_supervised(models, paired, cfg.tts_loss_reduction)
            rec.tts = t_loss.item()
            sup = sup + t_loss
        sup = sup * (len(paired) / n)
        total = sup if total is None else total + sup
    rec.total = total.item()
    return total, rec


def validation_cycle_loss(
    models: Models, corpus: CorpusSplit, references: Sequence[np.ndarray], batch_size: int = 32, ctc_weight: float = 0.0
) -> float:
    """Cycle loss on validation texts with fixed references and no masking."""
    utts = corpus.validation
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(utts), batch_size):
            chunk = utts[i : i + batch_size]
            loss = cycle_loss(models, [u.tokens for u in chunk], references[i : i + batch_size], ctc_weight=ctc_weight)
            total += loss.item() * len(chunk)
    return total / len(utts)


def validation_references(corpus: CorpusSplit) -> list[np.ndarray]:
    """A fixed paired-set reference utterance of the same speaker for every validation item."""
    by_spk: dict[int, list[Utterance]] = {}
    for u in corpus.paired:
        by_spk.setdefault(u.speaker, []).append(u)
    return [by_spk[u.speaker][i % len(by_spk[u.speaker])].features for i, u in enumerate(corpus.validation)]


# ------------------------------------------------------------------- phases
@dataclass
class PhaseResult:
    history: list[dict]
    asr_optimizer: Adam | None = None
    tts_optimizer: Adam | None = None
    epochs: int = 0


def _freeze_for_phase(models: Models, phase: str) -> None:
    models.speaker.set_trainable(False)
    models.asr.set_trainable(True)
    if phase == "A":
        models.tts.freeze()
    else:
        models.tts.unfreeze()
        models.tts.freeze(DURATION_PARTITION)


def run_phase_a(models: Models, corpus: CorpusSplit, cfg: TrainConfig, rng: np.random.Generator | None = None, callback=None) -> PhaseResult:
    """ASR-only training against the frozen TTS until validation cycle loss stops improving."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    _freeze_for_phase(models, "A")
    named = trainable(models.asr)
    params = [p for _, p in named]
    opt = make_optimizer(cfg.optimizer, named, cfg.asr_lr, cfg.max_grad_norm)
    refs = validation_references(corpus)
    stopper = EarlyStopping(cfg.patience)
    best = snapshot(params)
    history = []
    for epoch in range(cfg.phase_a_max_epochs):
        logs = []
        for batch in mixed_batches(corpus, cfg.batch_size, rng):
            loss, rec = train_step(models, corpus, batch, cfg, rng, train_tts=False)
            opt.zero_grad()
            loss.backward()
            opt.step()
            logs.append(rec)
        val = validation_cycle_loss(models, corpus, refs, ctc_weight=cfg.ctc_weight)
        if stopper.update(val):
            best = snapshot(params)
        entry = _summarize("A", epoch, logs, val)
        history.append(entry)
        log.info("phase A epoch %d train %.4f val_cycle %.4f", epoch, entry["total"], val)
        if callback is not None:
            callback("A", epoch + 1, models)
        if stopper.should_stop:
            break
    restore(params, best)
    return PhaseResult(history, asr_optimizer=opt, epochs=len(history))


def run_phase_b(models: Models, corpus: CorpusSplit, cfg: TrainConfig, rng: np.random.Generator | None = None, callback=None) -> PhaseResult:
    """Joint training of ASR and TTS for ``cfg.phase_b_epochs`` epochs.

    ``callback(phase, position, models)`` runs ``cfg.curve_points_per_epoch`` times per epoch
    at evenly spaced steps; ``position`` counts epochs completed, so the last call of an epoch
    reports ``epoch + 1``.  Used for the perplexity curve.
    """
    rng = np.random.default_rng(cfg.seed + 1) if rng is None else rng
    _freeze_for_phase(models, "B")
    asr_named = trainable(models.asr)
    tts_named = trainable(models.tts)
    asr_opt = make_optimizer(cfg.optimizer, asr_named, cfg.asr_lr, cfg.max_grad_norm)
    tts_opt = make_optimizer(cfg.optimizer, tts_named, cfg.tts_lr, cfg.max_grad_norm)
    refs = validation_references(corpus)
    history = []
    for epoch in range(cfg.phase_b_epochs):
        logs = []
        batches = mixed_batches(corpus, cfg.batch_size, rng)
        marks = {round(k * len(batches) / cfg.curve_points_per_epoch): k for k in range(1, cfg.curve_points_per_epoch + 1)}
        for i, batch in enumerate(batches, 1):
            loss, rec = train_step(models, corpus, batch, cfg, rng, train_tts=True)
            asr_opt.zero_grad()
            tts_opt.zero_grad()
            loss.backward()
            asr_opt.step()
            tts_opt.step()
            logs.append(rec)
            if callback is not None and i in marks and marks[i] < cfg.curve_points_per_epoch:
                callback("B", epoch + marks[i] / cfg.curve_points_per_epoch, models)
        val = validation_cycle_loss(models, corpus, refs, ctc_weight=cfg.ctc_weight)
        entry = _summarize("B", epoch, logs, val)
        history.append(entry)
        log.info("phase B epoch %d train %.4f val_cycle %.4f", epoch, entry["total"], val)
        if callback is not None:
            callback("B", epoch + 1, models)
    return PhaseResult(history, asr_opt, tts_opt, epochs=len(history))


def _summarize(phase: str, epoch: int, logs: list[StepLog], val: float) -> dict:
    def avg(key):
        vals = [getattr(r, key) for r in logs if np.isfinite(getattr(r, key))]
        return float(np.mean(vals)) if vals else float("nan")

    return {
        "phase": phase,
        "epoch": epoch,
        "total": avg("total"),
        "cycle": avg("cycle"),
        "speaker_consistency": avg("speaker_consistency"),
        "asr_ce": avg("asr_ce"),
        "tts": avg("tts"),
        "val_cycle": val,
    }


def joint_train(models: Models, corpus: CorpusSplit, cfg: TrainConfig, callback=None) -> dict[str, PhaseResult | None]:
    """Phase A (unless ``use_stepwise`` is off) followed by phase B."""
    rng = np.random.default_rng(cfg.seed)
    phase_a = run_phase_a(models, corpus, cfg, rng, callback) if cfg.use_stepwise else None
    phase_b = run_phase_b(models, corpus, cfg, rng, callback)
    return {"A": phase_a, "B": phase_b}
