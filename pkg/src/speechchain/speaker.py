"""Speaker embedder: frame encoder followed by attentive pooling.

The frame encoder is a single self-attention block over projected frames
with sinusoidal positions.  Pooling scores each frame with a one-hidden-layer
additive scorer, normalizes the scores with a softmax over the real frames and
takes the weighted mean, which is then projected to the embedding size.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import FEAT_DIM, CorpusSplit
from .errors import ContractError
from .nn import BlockConfig, EncoderBlock, LayerNorm, Linear, Module, attention_mask, lengths_to_mask, pad_sequences, positional_encoding
from .optim import EarlyStopping, make_optimizer, minibatches, restore, snapshot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpeakerConfig:
    feat_dim: int = FEAT_DIM
    hidden_dim: int = 32
    head_count: int = 2
    ff_dim: int = 64
    attention_dim: int = 16
    embed_dim: int = 16


class AttentivePooling(Module):
    def __init__(self, dim: int, attention_dim: int, rng: np.random.Generator):
        self.hidden = Linear(dim, attention_dim, rng)
        self.score = Linear(attention_dim, 1, rng)

    def weights(self, frames: Tensor, mask: np.ndarray) -> Tensor:
        scores = self.score(ad.tanh(self.hidden(frames)))  # (B, T, 1)
        b, t, _ = scores.shape
        return ad.softmax(scores.reshape(b, t), mask)

    def __call__(self, frames: Tensor, mask: np.ndarray) -> Tensor:
        w = self.weights(frames, mask)
        b, t = w.shape
        return (w.reshape(b, 1, t) @ frames).reshape(b, frames.shape[-1])


class SpeakerEmbedder(Module):
    PARTITIONS = {"frontend": "speaker", "encoder": "speaker", "norm": "speaker", "pooling": "speaker", "project": "speaker"}

    def __init__(self, cfg: SpeakerConfig = SpeakerConfig(), n_speakers: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.frontend = Linear(cfg.feat_dim, cfg.hidden_dim, rng)
        self.encoder = EncoderBlock(BlockConfig(cfg.hidden_dim, cfg.head_count, cfg.ff_dim, 1), rng)
        self.norm = LayerNorm(cfg.hidden_dim)
        self.pooling = AttentivePooling(cfg.hidden_dim, cfg.attention_dim, rng)
        self.project = Linear(cfg.hidden_dim, cfg.embed_dim, rng)
        # classification head, used only while pretraining; not a checkpoint partition
        self._classifier = Linear(cfg.embed_dim, n_speakers, rng)
        self.frozen = False

    def frame_states(self, feats, lengths) -> tuple[Tensor, np.ndarray]:
        feats = ad.as_tensor(feats)
        lengths = np.asarray(lengths)
        if feats.ndim != 3 or feats.shape[1] == 0 or np.any(lengths < 1):
            raise ContractError("speaker.embed: need at least one frame per utterance")
        t = feats.shape[1]
        mask = lengths_to_mask(lengths, t)
        x = self.frontend(feats) + positional_encoding(t, self.cfg.hidden_dim)
        x = self.encoder(x, attention_mask(mask, t))
        return self.norm(x), mask

    def pooling_weights(self, feats, lengths) -> np.ndarray:
        with ad.no_grad():
            h, mask = self.frame_states(feats, lengths)
            return self.pooling.weights(h, mask).data

    def __call__(self, feats, lengths) -> Tensor:
        h, mask = self.frame_states(feats, lengths)
        return self.project(self.pooling(h, mask))

    def freeze(self) -> None:
        self.set_trainable(False)
        self.frozen = True


def embed(model: SpeakerEmbedder, features: np.ndarray) -> np.ndarray:
    """Embedding of a single (T, F) utterance."""
    features = np.asarray(features)
    if features.ndim != 2 or len(features) == 0:
        raise ContractError("embed: expected a non-empty (T, F) feature matrix")
    with ad.no_grad():
        return model(features[None], [len(features)]).data[0]


def embed_many(model: SpeakerEmbedder, features, batch_size: int = 64) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(features), batch_size):
            feats, lens = pad_sequences(features[i : i + batch_size])
            out.append(model(feats, lens).data)
    return np.concatenate(out, axis=0)


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    return (a * b).sum(-1) / np.maximum(np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1), 1e-8)


@dataclass
class SpeakerPretrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    optimizer: str = "adam"
    seed: int = 0


def _class_loss(model: SpeakerEmbedder, utts) -> Tensor:
    feats, lens = pad_sequences([u.features for u in utts])
    logits = model._classifier(model(feats, lens))
    labels = np.array([u.speaker for u in utts])
    onehot = np.eye(logits.shape[-1])[labels]
    return -(ad.log_softmax(logits) * onehot).sum(axis=-1).mean()


def classification_accuracy(model: SpeakerEmbedder, utts) -> float:
    with ad.no_grad():
        emb = embed_many(model, [u.features for u in utts])
        logits = model._classifier(ad.Tensor(emb)).data
    return float(np.mean(np.argmax(logits, axis=-1) == np.array([u.speaker for u in utts])))


def pretrain_speaker(model: SpeakerEmbedder, corpus: CorpusSplit, cfg: SpeakerPretrainConfig = SpeakerPretrainConfig()) -> list[dict]:
    """Train the embedder as a speaker classifier on paired data, then freeze it.

    Held-out loss on the validation split drives early stopping.
    """
    labels = {u.speaker for u in corpus.paired}
    if len(labels) < 2:
        raise ContractError("pretrain_speaker: need at least 2 speakers")
    rng = np.random.default_rng(cfg.seed)
    named = list(model.named_parameters()) + [(f"classifier.{n}", p) for n, p in model._classifier.named_parameters()]
    params = [p for _, p in named]
    opt = make_optimizer(cfg.optimizer, named, cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    best = snapshot(params)
    history = []
    for epoch in range(cfg.max_epochs):
        losses = []
        for idx in minibatches(len(corpus.paired), cfg.batch_size, rng):
            loss = _class_loss(model, [corpus.paired[i] for i in idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        with ad.no_grad():
            val = _class_loss(model, corpus.validation).item()
        if stopper.update(val):
            best = snapshot(params)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val})
        log.info("speaker epoch %d train %.4f val %.4f", epoch, history[-1]["train_loss"], val)
        if stopper.should_stop:
            break
    restore(params, best)
    model.freeze()
    return history
