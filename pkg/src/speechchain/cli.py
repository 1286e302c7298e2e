"""Command-line entry point: ``speechchain [--config FILE] <command> ...``.

Every artifact lives under the experiment's ``output_dir``::

    corpus/                     gen-corpus
    checkpoints/<kind>.ckpt     pretrain {speaker,asr,tts}, plus <kind>_curve.csv
    runs/<method>/              joint-train: model.ckpt, train_log.csv, perplexity.csv, summary.json
    eval/<label>_<split>.json   eval
    figures/perplexity.{svg,csv}  plot-perplexity

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import fcntl
import json
import logging
import math
import shutil
import sys
import warnings
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from .asr import ASRModel, pretrain_asr
from .checkpoint import checkpoint_from, config_hash, load_checkpoint, load_partitions, save_checkpoint
from .config import ExperimentConfig, load_config
from .corpus import CorpusSplit, load_corpus, save_corpus
from .errors import ConfigError, MissingArtifactError
from .experiment import METHODS, evaluate, human_baseline, synthesized_perplexity, validation_cosine
from .metrics import TABLE_HEADER, perplexity_curve
from .speaker import SpeakerEmbedder, classification_accuracy, pretrain_speaker
from .training import Models, run_phase_a, run_phase_b
from .tts import TTSModel, pretrain_tts

log = logging.getLogger("speechchain.cli")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
KINDS = ("speaker", "asr", "tts")
STEPWISE_SERIES = ("proposed", "with step-wise")
NO_STEPWISE_SERIES = ("no_stepwise", "without step-wise")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="speechchain", description="Semi-supervised joint TTS/ASR training on a synthetic corpus.")
    p.add_argument("--config", type=Path, help="JSON experiment config (defaults are used when omitted)")
    p.add_argument("--print-config", action="store_true", help="print the effective config as JSON and exit")
    p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("gen-corpus", help="render the synthetic corpus")
    pre = sub.add_parser("pretrain", help="pretrain one model on paired data")
    pre.add_argument("kind", choices=KINDS)
    jt = sub.add_parser("joint-train", help="semi-supervised joint training from the pretrained checkpoints")
    jt.add_argument("--no-speaker-consistency", action="store_true")
    jt.add_argument("--no-stepwise", action="store_true")
    ev = sub.add_parser("eval", help="PER, MCD and F0 RMSE of a checkpoint")
    ev.add_argument("--checkpoint", type=Path, help="joint-training model.ckpt; the pretrained checkpoints when omitted")
    ev.add_argument("--split", default="test", choices=("validation", "test"))
    sub.add_parser("plot-perplexity", help="perplexity curves of the step-wise and non-step-wise runs")
    return p


# ------------------------------------------------------------------ helpers
def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


@contextmanager
def experiment_lock(directory: Path):
    """Advisory lock: one command per experiment directory at a time."""
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / ".lock", "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise RuntimeError(f"{directory} is locked by another command") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def write_csv(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _corpus(cfg: ExperimentConfig) -> CorpusSplit:
    return load_corpus(_out(cfg) / "corpus")


def _section_hash(cfg: ExperimentConfig, kind: str) -> str:
    d = cfg.to_dict()
    return config_hash({"corpus": d["corpus"], "model": d["model"][kind], "pretrain": d["pretrain"][kind]})


def _ckpt_path(cfg: ExperimentConfig, kind: str) -> Path:
    return _out(cfg) / "checkpoints" / f"{kind}.ckpt"


def _new_model(cfg: ExperimentConfig, kind: str, n_speakers: int):
    seed = cfg.train.seed
    # same seed offsets as the in-process seed runner
    if kind == "speaker":
        return SpeakerEmbedder(cfg.model.speaker, n_speakers, seed=seed)
    if kind == "asr":
        return ASRModel(cfg.model.asr, seed=seed + 1)
    return TTSModel(cfg.model.tts, seed=seed + 2)


def _load_pretrained(cfg: ExperimentConfig, kind: str, n_speakers: int):
    path = _ckpt_path(cfg, kind)
    if not path.exists():
        raise MissingArtifactError(f"pretrained {kind} checkpoint missing: {path} (run `pretrain {kind}` first)")
    ckpt = load_checkpoint(path, _section_hash(cfg, kind))
    model = _new_model(cfg, kind, n_speakers)
    load_partitions(model, ckpt.partitions)
    if kind == "speaker":
        model.freeze()
    return model


def load_models(cfg: ExperimentConfig, path: Path, n_speakers: int) -> Models:
    ckpt = load_checkpoint(path)
    models = Models(*(_new_model(cfg, k, n_speakers) for k in ("asr", "tts", "speaker")))
    for m in (models.asr, models.tts, models.speaker):
        load_partitions(m, ckpt.partitions)
    models.speaker.freeze()
    return models


def method_name(use_sc: bool, stepwise: bool) -> str:
    return next(k for k, v in METHODS.items() if v == (use_sc, stepwise))


# ----------------------------------------------------------------- commands
def cmd_gen_corpus(cfg: ExperimentConfig, args) -> int:
    target = _out(cfg) / "corpus"
    if target.exists() and any(target.iterdir()):
        if not args.force:
            raise RuntimeError(f"{target} is not empty; pass --force to overwrite")
        shutil.rmtree(target)
    corpus = cfg.corpus.build()
    save_corpus(corpus, target)
    log.info("corpus written to %s: %d paired, %d unpaired, %d validation, %d test",
             target, len(corpus.paired), len(corpus.unpaired), len(corpus.validation), len(corpus.test))
    return EXIT_OK


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    kind = args.kind
    path = _ckpt_path(cfg, kind)
    if path.exists() and not args.force:
        raise RuntimeError(f"{path} exists; pass --force to overwrite")
    corpus = _corpus(cfg)
    n_spk = len(corpus.speakers)
    seed = cfg.train.seed
    model = _new_model(cfg, kind, n_spk)
    meta: dict = {"kind": kind, "n_speakers": n_spk}
    if kind == "speaker":
        hist = pretrain_speaker(model, corpus, replace(cfg.pretrain.speaker, seed=seed))
        meta["test_accuracy"] = classification_accuracy(model, corpus.test)
        log.info("speaker test accuracy %.3f", meta["test_accuracy"])
    elif kind == "asr":
        hist = pretrain_asr(model, corpus, replace(cfg.pretrain.asr, seed=seed))
    else:
        speaker = _load_pretrained(cfg, "speaker", n_spk)
        hist = pretrain_tts(model, speaker, corpus, replace(cfg.pretrain.tts, seed=seed))
    best = math.inf
    for h in hist:
        best = min(best, h["val_loss"])
        h["best_val_loss"] = best
    ckpt = checkpoint_from({kind: model}, epoch=len(hist), meta=meta)
    # only the sections this model depends on, so editing e.g. train settings keeps it valid
    ckpt.config_hash = _section_hash(cfg, kind)
    save_checkpoint(path, ckpt)
    write_csv(path.with_name(f"{kind}_curve.csv"), hist)
    log.info("%s checkpoint written to %s after %d epochs (best val %.4f)", kind, path, len(hist), best)
    return EXIT_OK


def cmd_joint_train(cfg: ExperimentConfig, args) -> int:
    use_sc, stepwise = not args.no_speaker_consistency, not args.no_stepwise
    name = method_name(use_sc, stepwise)
    run_dir = _out(cfg) / "runs" / name
    if (run_dir / "model.ckpt").exists() and not args.force:
        raise RuntimeError(f"{run_dir} already holds a finished run; pass --force to overwrite")
    corpus = _corpus(cfg)
    n_spk = len(corpus.speakers)
    pre = Models(*(_load_pretrained(cfg, k, n_spk) for k in ("asr", "tts", "speaker")))
    pre_asr = pre.clone().asr
    baseline = human_baseline(pre_asr, corpus)
    seed = cfg.train.seed
    train = replace(cfg.train, use_speaker_consistency=use_sc, use_stepwise=stepwise)
    models = pre.clone()
    history: list[dict] = []
    phase_a_epochs = 0
    if stepwise:
        res_a = run_phase_a(models, corpus, train, np.random.default_rng([seed, 1]))
        history += res_a.history
        phase_a_epochs = res_a.epochs
    log.info("%s: phase A ran %d epochs", name, phase_a_epochs)
    points = [(0, synthesized_perplexity(pre_asr, models, corpus))]

    def track(phase, position, m):
        points.append((position, synthesized_perplexity(pre_asr, m, corpus)))

    res_b = run_phase_b(models, corpus, train, np.random.default_rng([seed, 2, int(use_sc), int(stepwise)]), track)
    history += res_b.history
    curve = perplexity_curve(points, baseline)
    report = evaluate(models, corpus, pre_asr, "test")
    cos = validation_cosine(models, corpus)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        run_dir / "model.ckpt",
        checkpoint_from(
            {"asr": models.asr, "tts": models.tts, "speaker": models.speaker},
            {"asr": res_b.asr_optimizer, "tts": res_b.tts_optimizer},
            epoch=len(history),
            config=cfg.to_dict(),
            meta={"method": name, "n_speakers": n_spk, "phase_a_epochs": phase_a_epochs},
        ),
    )
    write_csv(run_dir / "train_log.csv", history)
    write_csv(run_dir / "perplexity.csv", [{"epoch": e, "perplexity": v, "baseline": baseline} for e, v in zip(curve.epochs, curve.values)])
    summary = {
        "method": name,
        "phase_a_epochs": phase_a_epochs,
        "phase_b_epochs": res_b.epochs,
        "human_baseline_perplexity": baseline,
        "first_crossing": curve.first_crossing(),
        "validation_cosine": cos,
        "test": report.as_dict(),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(TABLE_HEADER)
    print(report.table_row(name))
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    corpus = _corpus(cfg)
    n_spk = len(corpus.speakers)
    try:
        pre_asr = _load_pretrained(cfg, "asr", n_spk)
    except MissingArtifactError:
        pre_asr = None
        log.warning("no pretrained ASR checkpoint; synthesized-speech perplexity is not reported")
    if args.checkpoint is None:
        models = Models(*(_load_pretrained(cfg, k, n_spk) for k in ("asr", "tts", "speaker")))
        label = "pretrained"
    else:
        models = load_models(cfg, args.checkpoint, n_spk)
        label = load_checkpoint(args.checkpoint).meta.get("method", args.checkpoint.stem)
    report = evaluate(models, corpus, pre_asr, args.split)
    report.config_hash = config_hash(cfg.to_dict())
    path = _out(cfg) / "eval" / f"{label}_{args.split}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    print(TABLE_HEADER)
    print(report.table_row(label))
    return EXIT_OK


def cmd_plot_perplexity(cfg: ExperimentConfig, args) -> int:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    runs = _out(cfg) / "runs"
    series: dict[str, list[dict]] = {}
    for method, label in (STEPWISE_SERIES, NO_STEPWISE_SERIES):
        path = runs / method / "perplexity.csv"
        if path.exists():
            series[label] = read_csv(path)
        else:
            msg = f"missing perplexity series {label!r} ({path}); plotting the remaining series"
            warnings.warn(msg, stacklevel=1)
            log.warning(msg)
    if not series:
        raise MissingArtifactError(f"no perplexity series under {runs}")
    baseline = float(next(iter(series.values()))[0]["baseline"])
    longest = max(series.values(), key=len)
    rows = [{"series": label, "epoch": float(r["epoch"]), "perplexity": float(r["perplexity"])} for label, rs in series.items() for r in rs]
    rows += [{"series": "human speech", "epoch": float(r["epoch"]), "perplexity": baseline} for r in longest]
    fig_dir = _out(cfg) / "figures"
    write_csv(fig_dir / "perplexity.csv", rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    colors = {STEPWISE_SERIES[1]: "tab:blue", NO_STEPWISE_SERIES[1]: "tab:orange"}
    for label, rs in series.items():
        ax.plot([float(r["epoch"]) for r in rs], [float(r["perplexity"]) for r in rs], marker="o", color=colors[label], label=label)
    ax.axhline(baseline, color="black", label="human speech")
    ax.set_xlabel("joint-training epoch")
    ax.set_ylabel("perplexity (pretrained ASR)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(fig_dir / "perplexity.svg")
    plt.close(fig)
    for label, rs in series.items():
        below = [float(r["epoch"]) for r in rs if float(r["perplexity"]) < baseline]
        print(f"{label}: first epoch below human baseline = {below[0] if below else 'never'}")
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "joint-train": cmd_joint_train,
    "eval": cmd_eval,
    "plot-perplexity": cmd_plot_perplexity,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.print_config:
            print(cfg.dumps())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("speechchain: error: a command is required", file=sys.stderr)
            return EXIT_CONFIG
        with experiment_lock(_out(cfg)):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
