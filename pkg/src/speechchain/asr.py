"""Transformer encoder-decoder recognizer over phoneme tokens."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import SpecAugmentPolicy, specaugment
from .autodiff import Tensor
from .corpus import BOS, EOS, FEAT_DIM, PAD, VOCAB_SIZE, CorpusSplit
from .errors import ContractError
from .nn import (
    BlockConfig,
    Conv1d,
    DecoderBlock,
    EncoderBlock,
    LayerNorm,
    Linear,
    Module,
    attention_mask,
    lengths_to_mask,
    pad_sequences,
    positional_encoding,
)
from .optim import EarlyStopping, bucketed_batches, make_optimizer, restore, snapshot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ASRConfig:
    feat_dim: int = FEAT_DIM
    vocab_size: int = VOCAB_SIZE
    model_dim: int = 64
    head_count: int = 2
    ff_dim: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    subsample: int = 2
    conv_layers: int = 2
    conv_kernel: int = 5
    max_decode_len: int = 96
    # weight of the CTC prefix score during greedy decoding (0 = attention only)
    decode_ctc_weight: float = 0.5


class ASREncoder(Module):
    def __init__(self, cfg: ASRConfig, rng: np.random.Generator):
        block = BlockConfig(cfg.model_dim, cfg.head_count, cfg.ff_dim, cfg.enc_layers)
        self._sub = cfg.subsample
        self._dim = cfg.model_dim
        self.frontend = Linear(cfg.feat_dim * cfg.subsample, cfg.model_dim, rng)
        # residual convolutions give every step its local phonetic context
        self.convs = [Conv1d(cfg.model_dim, cfg.model_dim, cfg.conv_kernel, rng) for _ in range(cfg.conv_layers)]
        self.blocks = [EncoderBlock(block, rng) for _ in range(cfg.enc_layers)]
        self.norm = LayerNorm(cfg.model_dim)

    def __call__(self, feats: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        b, t, f = feats.shape
        s = self._sub
        extra = (-t) % s
        if extra:
            feats = ad.pad_time(feats, 0, extra, axis=1)
        steps = (t + extra) // s
        mask = lengths_to_mask(-(-np.asarray(lengths) // s), steps)
        keep = mask[..., None].astype(np.float64)
        x = self.frontend(feats.reshape(b, steps, s * f))
        for conv in self.convs:
            x = x + ad.relu(conv(x * keep))
        x = x + positional_encoding(steps, self._dim)
        attn = attention_mask(mask, steps)
        for blk in self.blocks:
            x = blk(x, attn)
        return self.norm(x), mask


class ASRDecoder(Module):
    def __init__(self, cfg: ASRConfig, rng: np.random.Generator):
        block = BlockConfig(cfg.model_dim, cfg.head_count, cfg.ff_dim, cfg.dec_layers)
        self._dim = cfg.model_dim
        self.embed = ad.parameter(rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.model_dim)))
        self.blocks = [DecoderBlock(block, rng) for _ in range(cfg.dec_layers)]
        self.norm = LayerNorm(cfg.model_dim)

    def __call__(self, inputs: np.ndarray, in_mask: np.ndarray, memory: Tensor, mem_mask: np.ndarray) -> Tensor:
        length = inputs.shape[1]
        x = ad.embedding(self.embed, inputs) + positional_encoding(length, self._dim)
        self_mask = attention_mask(in_mask, length, causal=True)
        cross_mask = attention_mask(mem_mask, length)
        for blk in self.blocks:
            x = blk(x, memory, self_mask, cross_mask)
        return self.norm(x)


class ASRModel(Module):
    PARTITIONS = {"encoder": "asr.enc", "decoder": "asr.dec", "output": "asr.linear", "ctc": "asr.ctc"}

    def __init__(self, cfg: ASRConfig = ASRConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = ASREncoder(cfg, rng)
        self.decoder = ASRDecoder(cfg, rng)
        # small output weights: an untrained model starts near the uniform posterior
        self.output = Linear(cfg.model_dim, cfg.vocab_size, rng, scale=0.02)
        # frame-level head for the auxiliary CTC objective (blank = PAD)
        self.ctc = Linear(cfg.model_dim, cfg.vocab_size, rng, scale=0.02)

    def encode(self, feats, lengths) -> tuple[Tensor, np.ndarray]:
        feats = ad.as_tensor(feats)
        lengths = np.asarray(lengths)
        if feats.ndim != 3 or feats.shape[1] == 0 or np.any(lengths < 1):
            raise ContractError("asr.encode: need at least one frame per utterance")
        return self.encoder(feats, lengths)

    def logits(self, memory: Tensor, mem_mask: np.ndarray, inputs: np.ndarray, in_lengths: np.ndarray) -> Tensor:
        in_mask = lengths_to_mask(in_lengths, inputs.shape[1])
        return self.output(self.decoder(inputs, in_mask, memory, mem_mask))

    def step_posterior(self, features: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
        """P(y_l | y_1..y_{l-1}, X) for one utterance; ``prefix`` excludes BOS."""
        with ad.no_grad():
            memory, mem_mask = self.encode(np.asarray(features)[None], [len(features)])
            inputs = np.array([[BOS, *prefix]], dtype=np.int64)
            logits = self.logits(memory, mem_mask, inputs, np.array([inputs.shape[1]]))
            return ad.softmax(logits[:, -1, :]).data[0]


class IncrementalDecoder:
    """Left-to-right decoding with cached keys/values; inference only (call under ``no_grad``)."""

    def __init__(self, model: ASRModel, memory: Tensor, mem_mask: np.ndarray, max_len: int):
        self.model = model
        blocks = model.decoder.blocks
        self.memory_kv = [blk.cross_attn.project_kv(memory, memory) for blk in blocks]
        self.caches: list[dict] = [{} for _ in blocks]
        self.cross_mask = mem_mask[:, None, None, :]
        self.table = positional_encoding(max_len + 1, model.cfg.model_dim)
        self.pos = 0

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed one token per utterance; return next-token logits (B, V)."""
        dec = self.model.decoder
        x = ad.embedding(dec.embed, np.asarray(tokens)[:, None]) + self.table[self.pos]
        for blk, cache, kv in zip(dec.blocks, self.caches, self.memory_kv):
            x = blk.step(x, cache, kv, self.cross_mask)
        self.pos += 1
        return self.model.output(dec.norm(x)).data[:, 0, :]


def teacher_batch(token_seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decoder inputs ``[BOS] + y`` and targets ``y + [EOS]``, both padded, plus lengths L = |y| + 1."""
    if any(len(t) == 0 for t in token_seqs):
        raise ContractError("target token sequence must be non-empty")
    inputs, lengths = pad_sequences([np.concatenate([[BOS], t]) for t in token_seqs], PAD, np.int64)
    targets, _ = pad_sequences([np.concatenate([t, [EOS]]) for t in token_seqs], PAD, np.int64)
    return inputs, targets, lengths


def token_log_probs(model: ASRModel, feats, lengths, token_seqs, inputs: np.ndarray | None = None, encoded=None) -> tuple[Tensor, np.ndarray]:
    """log P(y_l | y_<l, X) at every target position, (B, L) with zeros at padding; plus target lengths.

    ``encoded`` may carry a precomputed ``(memory, mem_mask)``.
    """
    teacher_inputs, targets, tlens = teacher_batch(token_seqs)
    if inputs is None:
        inputs = teacher_inputs
    memory, mem_mask = model.encode(feats, lengths) if encoded is None else encoded
    logp = ad.log_softmax(model.logits(memory, mem_mask, inputs, tlens))
    onehot = np.zeros(logp.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    onehot *= lengths_to_mask(tlens, targets.shape[1])[..., None]
    return (logp * onehot).sum(axis=-1), tlens


def sequence_nll(model: ASRModel, feats, lengths, token_seqs, inputs=None, encoded=None) -> Tensor:
    """Per-utterance mean negative log-likelihood, shape (B,)."""
    lp, tlens = token_log_probs(model, feats, lengths, token_seqs, inputs, encoded)
    return -(lp.sum(axis=-1) * (1.0 / tlens))


def ce_loss(model: ASRModel, feats, lengths, token_seqs, inputs=None) -> Tensor:
    """Cross-entropy averaged over tokens of each utterance, then over the batch."""
    return sequence_nll(model, feats, lengths, token_seqs, inputs).mean()


def ctc_loss(model: ASRModel, memory: Tensor, mem_mask: np.ndarray, token_seqs) -> Tensor:
    """CTC NLL of ``y`` from the encoder states, divided by |y| per utterance, averaged over the batch."""
    logp = ad.log_softmax(model.ctc(memory))
    nll = ad.ctc_nll(logp, mem_mask.sum(axis=1), token_seqs, blank=PAD)
    return (nll * (1.0 / np.array([len(t) for t in token_seqs], dtype=np.float64))).mean()


def diagonal_penalty(target_lengths, memory_lengths, width: float = 0.2) -> np.ndarray:
    """(B, L, T') penalty 1 - exp(-(l/L - t/T')^2 / (2 width^2)); zero outside the valid region."""
    tl = np.asarray(target_lengths)
    ml = np.asarray(memory_lengths)
    l_idx = np.arange(tl.max())[None, :, None] / tl[:, None, None]
    t_idx = np.arange(ml.max())[None, None, :] / ml[:, None, None]
    pen = 1.0 - np.exp(-((l_idx - t_idx) ** 2) / (2.0 * width**2))
    valid = (np.arange(tl.max())[None, :, None] < tl[:, None, None]) & (np.arange(ml.max())[None, None, :] < ml[:, None, None])
    return np.where(valid, pen, 0.0)


def hybrid_loss(model: ASRModel, feats, lengths, token_seqs, inputs=None, ctc_weight: float = 0.0, guide_weight: float = 0.0) -> Tensor:
    """(1 - w) * attention CE + w * CTC, plus an optional diagonal guided-attention penalty.

    With both weights at zero this is exactly ``ce_loss``.
    """
    encoded = model.encode(feats, lengths)
    attns = [blk.cross_attn for blk in model.decoder.blocks]
    for a in attns:
        a._record = guide_weight > 0
    try:
        ce = sequence_nll(model, feats, lengths, token_seqs, inputs, encoded).mean()
        weights = [a._weights_tensor for a in attns]
    finally:
        for a in attns:
            a._record = False
            a._weights_tensor = None
    loss = ce
    if ctc_weight > 0:
        loss = ce * (1.0 - ctc_weight) + ctc_loss(model, *encoded, token_seqs) * ctc_weight
    if guide_weight > 0:
        tlens = np.array([len(t) + 1 for t in token_seqs])
        pen = diagonal_penalty(tlens, encoded[1].sum(axis=1))[:, None]  # broadcast over heads
        count = float(tlens.sum()) * len(weights) * weights[0].shape[1]
        guide = ad.sum_(weights[0] * pen)
        for w in weights[1:]:
            guide = guide + ad.sum_(w * pen)
        loss = loss + guide * (guide_weight / count)
    return loss


def perplexity(model: ASRModel, feats, lengths, token_seqs) -> np.ndarray:
    """exp of the per-utterance mean NLL, one value per utterance."""
    with ad.no_grad():
        return np.exp(sequence_nll(model, feats, lengths, token_seqs).data)


def sampling_schedule(epoch: float, ramp_epochs: int = 20, final_prob: float = 0.4) -> float:
    """Linear ramp of the scheduled-sampling probability from 0 at epoch 0 to ``final_prob``."""
    if ramp_epochs <= 0:
        return final_prob
    return final_prob * min(max(epoch, 0.0) / ramp_epochs, 1.0)


def scheduled_sampling_inputs(model, feats, lengths, token_seqs, sampling_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Decoder inputs where each previous token is, with probability ``sampling_prob``, drawn from the model.

    Runs left to right: the sample at step l comes from the posterior given the
    already-mixed prefix, so the result matches sequential scheduled sampling.
    """
    inputs, targets, tlens = teacher_batch(token_seqs)
    if sampling_prob <= 0:
        return inputs
    inputs = inputs.copy()
    b, length = inputs.shape
    with ad.no_grad():
        memory, mem_mask = model.encode(feats, lengths)
        stepper = IncrementalDecoder(model, memory, mem_mask, length)
        for pos in range(1, length):
            probs = ad.softmax(stepper.step(inputs[:, pos - 1])).data
            cum = np.cumsum(probs, axis=-1)
            draws = rng.random(b)
            sampled = np.minimum((cum < draws[:, None] * cum[:, -1:]).sum(axis=-1), probs.shape[-1] - 1)
            flip = rng.random(b) < sampling_prob
            live = pos < tlens
            inputs[:, pos] = np.where(flip & live, sampled, inputs[:, pos])
    return inputs


def scheduled_sampling_loss(
    model, feats, lengths, token_seqs, sampling_prob: float, rng: np.random.Generator, ctc_weight: float = 0.0, guide_weight: float = 0.0
) -> Tensor:
    if not 0.0 <= sampling_prob <= 1.0:
        raise ContractError("sampling_prob must lie in [0, 1]")
    inputs = scheduled_sampling_inputs(model, feats, lengths, token_seqs, sampling_prob, rng)
    return hybrid_loss(model, feats, lengths, token_seqs, inputs, ctc_weight, guide_weight)


class CTCPrefixScorer:
    """Prefix probabilities log P_ctc(g...) for one running hypothesis per utterance.

    ``extend`` scores every possible next token at once; ``advance`` commits one.
    """

    def __init__(self, log_probs: np.ndarray, lengths: np.ndarray):
        b, t, v = log_probs.shape
        valid = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
        self.x = np.where(valid[..., None], log_probs, -np.inf).transpose(1, 0, 2)  # (T, B, V)
        self.last = np.asarray(lengths) - 1
        self.r_n = np.full((t, b), -np.inf)
        self.r_b = np.cumsum(self.x[:, :, PAD], axis=0)
        self.prev = np.full(b, -1)
        self.score = np.zeros(b)
        self._pending: tuple | None = None

    def extend(self) -> np.ndarray:
        """(B, V) log prefix scores of g + c for every token c."""
        x = self.x
        t_len, b, v = x.shape
        phi = np.logaddexp(self.r_n, self.r_b)[..., None].repeat(v, axis=-1)  # (T, B, V)
        rows = np.arange(b)
        same = self.prev >= 0
        phi[:, rows[same], self.prev[same]] = self.r_b[:, same]
        r_n = np.full((t_len, b, v), -np.inf)
        r_b = np.full((t_len, b, v), -np.inf)
        r_n[0] = np.where(self.prev[:, None] < 0, x[0], -np.inf)
        psi = r_n[0].copy()
        with np.errstate(invalid="ignore"):
            for t in range(1, t_len):
                r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + x[t]
                r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + x[t, :, PAD : PAD + 1]
                psi = np.logaddexp(psi, phi[t - 1] + x[t])
        psi[:, EOS] = np.logaddexp(self.r_n[self.last, rows], self.r_b[self.last, rows])
        psi[:, [PAD, BOS]] = -np.inf
        self._pending = (r_n, r_b, psi)
        return psi

    def advance(self, tokens: np.ndarray) -> None:
        r_n, r_b, psi = self._pending
        rows = np.arange(len(tokens))
        self.r_n = r_n[:, rows, tokens]
        self.r_b = r_b[:, rows, tokens]
        self.score = psi[rows, tokens]
        self.prev = np.asarray(tokens).copy()
        self._pending = None


def greedy_decode(model: ASRModel, feats, lengths, max_len: int | None = None, ctc_weight: float | None = None) -> list[np.ndarray]:
    """Argmax decoding until EOS or ``max_len`` tokens; returned sequences exclude EOS.

    With a positive ``ctc_weight`` (default: the model config) each step maximizes
    (1 - w) log p_att + w * (CTC prefix score gain), i.e. one-best joint decoding.
    """
    max_len = model.cfg.max_decode_len if max_len is None else max_len
    w = model.cfg.decode_ctc_weight if ctc_weight is None else ctc_weight
    if max_len < 1:
        raise ContractError("greedy_decode: max_len must be >= 1")
    if not 0.0 <= w <= 1.0:
        raise ContractError("greedy_decode: ctc_weight must lie in [0, 1]")
    with ad.no_grad():
        memory, mem_mask = model.encode(feats, lengths)
        b = memory.shape[0]
        scorer = None
        if w > 0:
            ctc_lp = ad.log_softmax(model.ctc(memory)).data
            scorer = CTCPrefixScorer(ctc_lp, mem_mask.sum(axis=1))
        seqs = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        ends = np.full(b, max_len)
        stepper = IncrementalDecoder(model, memory, mem_mask, max_len)
        for step in range(max_len):
            logits = stepper.step(seqs[:, -1])
            if scorer is None:
                nxt = np.argmax(logits, axis=-1)
            else:
                att = ad.log_softmax(logits).data
                ext, base = scorer.extend(), scorer.score[:, None]
                # once a prefix is CTC-impossible the attention term decides alone
                gain = np.where(np.isfinite(base), ext - np.where(np.isfinite(base), base, 0.0), 0.0)
                joint = (1.0 - w) * att + w * gain
                stuck = ~np.isfinite(joint).any(axis=-1)
                joint[stuck] = att[stuck]
                nxt = np.argmax(joint, axis=-1)
                scorer.advance(nxt)
            newly = (~done) & (nxt == EOS)
            ends[newly] = step
            done |= newly
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            if done.all():
                break
    return [seqs[i, 1 : 1 + ends[i]].copy() for i in range(b)]


def decode_utterances(model: ASRModel, features: Sequence[np.ndarray], batch_size: int = 32, max_len=None, ctc_weight=None) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for i in range(0, len(features), batch_size):
        feats, lens = pad_sequences(features[i : i + batch_size])
        out.extend(greedy_decode(model, feats, lens, max_len, ctc_weight))
    return out


# ----------------------------------------------------------------- pretraining
@dataclass
class ASRPretrainConfig:
    lr: float = 3e-3
    batch_size: int = 16
    max_epochs: int = 60
    patience: int = 8
    optimizer: str = "adam"
    ramp_epochs: int = 20
    final_sampling_prob: float = 0.4
    specaugment: SpecAugmentPolicy = field(default_factory=SpecAugmentPolicy)
    max_grad_norm: float | None = 5.0
    ctc_weight: float = 0.5
    guide_weight: float = 1.0
    seed: int = 0


def evaluate_ce(model: ASRModel, utterances, batch_size: int = 32, ctc_weight: float = 0.0) -> float:
    """Mean per-utterance loss on ``utterances``: the attention CE, or the hybrid loss for ``ctc_weight`` > 0."""
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(utterances), batch_size):
            chunk = utterances[i : i + batch_size]
            feats, lens = pad_sequences([u.features for u in chunk])
            loss = hybrid_loss(model, feats, lens, [u.tokens for u in chunk], ctc_weight=ctc_weight)
            total += loss.item() * len(chunk)
            count += len(chunk)
    return total / count


def pretrain_asr(model: ASRModel, corpus: CorpusSplit, cfg: ASRPretrainConfig = ASRPretrainConfig()) -> list[dict]:
    """Supervised training on the paired split with SpecAugment and scheduled sampling.

    Early-stops on the validation loss (same CTC share as training) and restores the best parameters.
    """
    rng = np.random.default_rng(cfg.seed)
    named = list(model.named_parameters())
    params = [p for _, p in named]
    opt = make_optimizer(cfg.optimizer, named, cfg.lr, cfg.max_grad_norm)
    stopper = EarlyStopping(cfg.patience)
    best = snapshot(params)
    history = []
    data = corpus.paired
    for epoch in range(cfg.max_epochs):
        prob = sampling_schedule(epoch, cfg.ramp_epochs, cfg.final_sampling_prob)
        losses = []
        for idx in bucketed_batches([len(u.features) for u in data], cfg.batch_size, rng):
            chunk = [data[i] for i in idx]
            feats, lens = pad_sequences([u.features for u in chunk])
            feats = specaugment(feats, cfg.specaugment, rng, lens)
            loss = scheduled_sampling_loss(model, feats, lens, [u.tokens for u in chunk], prob, rng, cfg.ctc_weight, cfg.guide_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val = evaluate_ce(model, corpus.validation, ctc_weight=cfg.ctc_weight)
        improved = stopper.update(val)
        if improved:
            best = snapshot(params)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val, "sampling_prob": prob})
        log.info("asr epoch %d train %.4f val %.4f p_ss %.3f", epoch, history[-1]["train_loss"], val, prob)
        if stopper.should_stop:
            break
    restore(params, best)
    return history
