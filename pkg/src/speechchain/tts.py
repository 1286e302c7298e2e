"""Non-autoregressive multi-speaker acoustic model with a variance adaptor.

encoder -> (+ speaker projection) -> pitch / energy / duration predictors ->
length regulator -> decoder -> post-net.  Pitch and energy are predicted per
phoneme, projected to the model width and added to the phoneme states before
expansion.  Predicted durations are rounded and clamped to >= 1 and carry no
gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import FEAT_DIM, PAD, VOCAB_SIZE, CorpusSplit, Utterance
from .errors import ContractError, ShapeError
from .nn import (
    BlockConfig,
    Conv1d,
    EncoderBlock,
    LayerNorm,
    Linear,
    Module,
    attention_mask,
    clamp_durations,
    length_regulate,
    lengths_to_mask,
    pad_sequences,
    positional_encoding,
)
from .optim import EarlyStopping, bucketed_batches, make_optimizer, restore, snapshot

log = logging.getLogger(__name__)

TEACHER = "teacher"
FREE = "free"


@dataclass(frozen=True)
class TTSConfig:
    vocab_size: int = VOCAB_SIZE
    feat_dim: int = FEAT_DIM
    speaker_dim: int = 16
    model_dim: int = 64
    head_count: int = 2
    ff_dim: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    predictor_dim: int = 64
    postnet_layers: int = 2
    postnet_channels: int = 32
    postnet_kernel: int = 5


class TextEncoder(Module):
    def __init__(self, cfg: TTSConfig, rng):
        block = BlockConfig(cfg.model_dim, cfg.head_count, cfg.ff_dim, cfg.enc_layers)
        self._dim = cfg.model_dim
        self.embed = ad.parameter(rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.model_dim)))
        self.blocks = [EncoderBlock(block, rng) for _ in range(cfg.enc_layers)]
        self.norm = LayerNorm(cfg.model_dim)

    def __call__(self, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
        length = tokens.shape[1]
        x = ad.embedding(self.embed, tokens) + positional_encoding(length, self._dim)
        attn = attention_mask(mask, length)
        for blk in self.blocks:
            x = blk(x, attn)
        return self.norm(x)


class ScalarPredictor(Module):
    """Per-phoneme scalar regressor (two-layer MLP)."""

    def __init__(self, dim: int, hidden: int, rng):
        self.hidden = Linear(dim, hidden, rng)
        self.out = Linear(hidden, 1, rng)

    def __call__(self, states: Tensor) -> Tensor:
        b, n, _ = states.shape
        return self.out(ad.relu(self.hidden(states))).reshape(b, n)


class VarianceAdaptor(Module):
    def __init__(self, cfg: TTSConfig, rng):
        self.speaker_proj = Linear(cfg.speaker_dim, cfg.model_dim, rng)
        self.pitch = ScalarPredictor(cfg.model_dim, cfg.predictor_dim, rng)
        self.energy = ScalarPredictor(cfg.model_dim, cfg.predictor_dim, rng)
        self.pitch_proj = Linear(1, cfg.model_dim, rng)
        self.energy_proj = Linear(1, cfg.model_dim, rng)


class AcousticDecoder(Module):
    def __init__(self, cfg: TTSConfig, rng):
        block = BlockConfig(cfg.model_dim, cfg.head_count, cfg.ff_dim, cfg.dec_layers)
        self._dim = cfg.model_dim
        self.blocks = [EncoderBlock(block, rng) for _ in range(cfg.dec_layers)]
        self.norm = LayerNorm(cfg.model_dim)
        self.out = Linear(cfg.model_dim, cfg.feat_dim, rng)

    def __call__(self, frames: Tensor, mask: np.ndarray) -> Tensor:
        t = frames.shape[1]
        x = frames + positional_encoding(t, self._dim)
        attn = attention_mask(mask, t)
        for blk in self.blocks:
            x = blk(x, attn)
        return self.out(self.norm(x)) * mask[:, :, None]


class PostNet(Module):
    def __init__(self, cfg: TTSConfig, rng):
        dims = [cfg.feat_dim] + [cfg.postnet_channels] * (cfg.postnet_layers - 1) + [cfg.feat_dim]
        self.convs = [Conv1d(dims[i], dims[i + 1], cfg.postnet_kernel, rng) for i in range(cfg.postnet_layers)]

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        keep = mask[:, :, None]
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = ad.tanh(h)
            h = h * keep
        return x + h


@dataclass
class SynthesisOutput:
    features: Tensor  # post-net output, (B, T, F)
    decoder_features: Tensor  # decoder output before the post-net
    pitch: Tensor  # (B, L)
    energy: Tensor
    duration: Tensor
    frame_lengths: np.ndarray
    token_lengths: np.ndarray
    used_durations: np.ndarray  # (B, L) integer durations fed to the length regulator

    def utterance(self, i: int) -> np.ndarray:
        return self.features.data[i, : self.frame_lengths[i]].copy()


class TTSModel(Module):
    PARTITIONS = {
        "encoder": "tts.enc",
        "variance": "tts.va",
        "duration": "tts.va.duration",
        "decoder": "tts.dec",
        "postnet": "tts.post",
    }

    def __init__(self, cfg: TTSConfig = TTSConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = TextEncoder(cfg, rng)
        self.variance = VarianceAdaptor(cfg, rng)
        self.duration = ScalarPredictor(cfg.model_dim, cfg.predictor_dim, rng)
        self.decoder = AcousticDecoder(cfg, rng)
        self.postnet = PostNet(cfg, rng)

    def __call__(
        self,
        token_seqs: Sequence[np.ndarray],
        speaker_embeddings,
        mode: str = FREE,
        prosody: Sequence | None = None,
    ) -> SynthesisOutput:
        """Synthesize a batch.  ``prosody`` (list of ProsodyTrack) is required in teacher mode."""
        if mode not in (TEACHER, FREE):
            raise ContractError(f"unknown synthesis mode {mode!r}")
        if any(len(t) == 0 for t in token_seqs):
            raise ContractError("synthesize: empty token sequence")
        tokens, tlens = pad_sequences(list(token_seqs), PAD, np.int64)
        tmask = lengths_to_mask(tlens, tokens.shape[1])
        spk = ad.as_tensor(speaker_embeddings)
        if spk.shape != (len(token_seqs), self.cfg.speaker_dim):
            raise ShapeError("synthesize speaker embeddings", spk.shape, (len(token_seqs), self.cfg.speaker_dim))

        va = self.variance
        b, n = tokens.shape
        states = self.encoder(tokens, tmask) + va.speaker_proj(spk).reshape(b, 1, self.cfg.model_dim)
        p_hat = va.pitch(states)
        e_hat = va.energy(states)
        d_hat = self.duration(states)
        if mode == TEACHER:
            if prosody is None or len(prosody) != b:
                raise ContractError("teacher mode needs one prosody track per utterance")
            p_in = ad.Tensor(pad_sequences([pr.pitch for pr in prosody])[0])
            e_in = ad.Tensor(pad_sequences([pr.energy for pr in prosody])[0])
            durations = pad_sequences([pr.durations for pr in prosody], 1, np.int64)[0]
            if p_in.shape != (b, n):
                raise ShapeError("teacher prosody", p_in.shape, (b, n))
        else:
            p_in, e_in = p_hat, e_hat
            durations = clamp_durations(d_hat.data)
        durations = np.where(tmask, durations, 1)
        varied = states + va.pitch_proj(p_in.reshape(b, n, 1)) + va.energy_proj(e_in.reshape(b, n, 1))
        frames, flens = length_regulate(varied, durations, tlens)
        fmask = lengths_to_mask(flens, frames.shape[1])
        dec = self.decoder(frames, fmask)
        post = self.postnet(dec, fmask)
        return SynthesisOutput(post, dec, p_hat, e_hat, d_hat, flens, tlens, durations)

    def freeze(self, partition: str | None = None) -> None:
        self._set(partition, False)

    def unfreeze(self, partition: str | None = None) -> None:
        self._set(partition, True)

    def _set(self, partition, flag):
        for attr, part in self.PARTITIONS.items():
            if partition is None or part == partition:
                getattr(self, attr).set_trainable(flag)


def synthesize(tts: TTSModel, speaker_model, token_seqs, references: Sequence[np.ndarray], mode: str = FREE, prosody=None) -> SynthesisOutput:
    """Embed the reference speech with the (frozen) speaker model, then run the TTS."""
    if any(len(r) == 0 for r in references):
        raise ContractError("synthesize: empty reference speech")
    feats, lens = pad_sequences(list(references))
    with ad.no_grad():
        spk = speaker_model(feats, lens).data
    return tts(token_seqs, spk, mode, prosody)


def tts_loss_terms(out: SynthesisOutput, targets: Sequence[np.ndarray], prosody: Sequence) -> dict[str, Tensor]:
    """The five terms of the supervised loss, each summed within an utterance and averaged over the batch."""
    feats, flens = pad_sequences(list(targets))
    if feats.shape != out.features.shape or not np.array_equal(flens, out.frame_lengths):
        raise ShapeError("tts_loss features", feats.shape, out.features.shape)
    b = feats.shape[0]
    pitch = pad_sequences([p.pitch for p in prosody])[0]
    energy = pad_sequences([p.energy for p in prosody])[0]
    dur = pad_sequences([p.durations for p in prosody])[0]
    if pitch.shape != out.pitch.shape:
        raise ShapeError("tts_loss prosody", pitch.shape, out.pitch.shape)
    fkeep = lengths_to_mask(flens, feats.shape[1])[:, :, None]
    tkeep = lengths_to_mask(out.token_lengths, pitch.shape[1])
    scale = 1.0 / b
    return {
        "post_l1": ad.abs_((out.features - feats) * fkeep).sum() * scale,
        "dec_l1": ad.abs_((out.decoder_features - feats) * fkeep).sum() * scale,
        "pitch_l2": (((out.pitch - pitch) * tkeep) ** 2).sum() * scale,
        "energy_l2": (((out.energy - energy) * tkeep) ** 2).sum() * scale,
        "duration_l2": (((out.duration - dur) * tkeep) ** 2).sum() * scale,
    }


def tts_loss(out: SynthesisOutput, targets, prosody) -> Tensor:
    terms = tts_loss_terms(out, targets, prosody)
    total = terms["post_l1"]
    for key in ("dec_l1", "pitch_l2", "energy_l2", "duration_l2"):
        total = total + terms[key]
    return total


# ----------------------------------------------------------------- pretraining
@dataclass
class TTSPretrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 60
    patience: int = 5
    optimizer: str = "adam"
    max_grad_norm: float | None = None
    seed: int = 0


def teacher_forward(tts: TTSModel, speaker_model, utts: Sequence[Utterance], references=None) -> tuple[SynthesisOutput, Tensor]:
    refs = [u.features for u in utts] if references is None else references
    out = synthesize(tts, speaker_model, [u.tokens for u in utts], refs, TEACHER, [u.prosody for u in utts])
    return out, tts_loss(out, [u.features for u in utts], [u.prosody for u in utts])


def evaluate_tts_loss(tts: TTSModel, speaker_model, utts, batch_size: int = 32) -> float:
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(utts), batch_size):
            chunk = utts[i : i + batch_size]
            total += teacher_forward(tts, speaker_model, chunk)[1].item() * len(chunk)
    return total / len(utts)


def pretrain_tts(tts: TTSModel, speaker_model, corpus: CorpusSplit, cfg: TTSPretrainConfig = TTSPretrainConfig()) -> list[dict]:
    """Teacher-mode training on paired data with the supervised loss, early-stopped on validation loss.

    The speaker embedding of each utterance comes from the utterance itself.
    """
    rng = np.random.default_rng(cfg.seed)
    named = [(n, p) for n, p in tts.named_parameters() if p.requires_grad]
    params = [p for _, p in named]
    opt = make_optimizer(cfg.optimizer, named, cfg.lr, cfg.max_grad_norm)
    stopper = EarlyStopping(cfg.patience)
    best = snapshot(params)
    history = []
    for epoch in range(cfg.max_epochs):
        losses = []
        for idx in bucketed_batches([len(u.features) for u in corpus.paired], cfg.batch_size, rng):
            _, loss = teacher_forward(tts, speaker_model, [corpus.paired[i] for i in idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val = evaluate_tts_loss(tts, speaker_model, corpus.validation)
        if stopper.update(val):
            best = snapshot(params)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val})
        log.info("tts epoch %d train %.3f val %.3f", epoch, history[-1]["train_loss"], val)
        if stopper.should_stop:
            break
    restore(params, best)
    return history
