import csv
import json

import pytest

from speechchain.checkpoint import load_checkpoint
from speechchain.cli import main
from speechchain.config import ExperimentConfig, config_from_dict, load_config
from speechchain.errors import ConfigError

TINY = {
    "corpus": {"n_speakers": 2, "n_paired": 8, "n_unpaired": 8, "n_validation": 4, "n_test": 4,
               "n_base_words": 6, "n_extra_words": 6, "min_words": 1, "max_words": 2},
    "model": {
        "asr": {"model_dim": 8, "head_count": 2, "ff_dim": 16, "enc_layers": 1, "dec_layers": 1, "conv_layers": 1, "max_decode_len": 12},
        "tts": {"model_dim": 8, "head_count": 2, "ff_dim": 16, "enc_layers": 1, "dec_layers": 1, "predictor_dim": 8,
                "postnet_channels": 4, "postnet_kernel": 3, "speaker_dim": 6},
        "speaker": {"hidden_dim": 8, "ff_dim": 16, "attention_dim": 4, "embed_dim": 6},
    },
    "pretrain": {"asr": {"max_epochs": 2}, "tts": {"max_epochs": 2}, "speaker": {"max_epochs": 2}},
    "train": {"phase_a_max_epochs": 2, "phase_b_epochs": 2, "batch_size": 8},
}


def _write(tmp_path, name="tiny", **overrides):
    cfg = {"name": name, "output_dir": str(tmp_path / name), **json.loads(json.dumps(TINY)), **overrides}
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _write(tmp)
    c = ["--config", str(cfg)]
    assert main(c + ["gen-corpus"]) == 0
    for kind in ("speaker", "asr", "tts"):
        assert main(c + ["pretrain", kind]) == 0
    assert main(c + ["joint-train"]) == 0
    assert main(c + ["joint-train", "--no-stepwise"]) == 0
    return cfg, load_config(cfg)


def test_default_config_and_print(capsys):
    assert main(["--print-config"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["corpus"]["n_paired"] == 200 and shown["corpus"]["n_unpaired"] == 800
    assert shown["train"]["alpha"] == 0.1
    assert config_from_dict(shown) == ExperimentConfig()


def test_unknown_and_missing_keys_exit_2(tmp_path, capsys):
    bad = _write(tmp_path, "bad", train={"alpah": 0.1})
    assert main(["--config", str(bad), "gen-corpus"]) == 2
    assert "train.alpah" in capsys.readouterr().err
    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps({"name": "x"}))
    assert main(["--config", str(missing), "gen-corpus"]) == 2
    assert "output_dir" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        config_from_dict({"name": "x", "output_dir": "y", "corpus": {"n_paired": "many"}})
    with pytest.raises(ConfigError):
        config_from_dict({"name": "x", "output_dir": "y", "model": {"tts": {"speaker_dim": 3}}})


def test_bad_arguments_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "vocoder"])
    assert exc.value.code == 2


def test_gen_corpus_is_idempotent_and_guarded(tmp_path):
    a, b = _write(tmp_path, "a"), _write(tmp_path, "b")
    assert main(["--config", str(a), "gen-corpus"]) == 0
    assert main(["--config", str(b), "gen-corpus"]) == 0
    ma = (tmp_path / "a" / "corpus" / "manifest.json").read_bytes()
    assert ma == (tmp_path / "b" / "corpus" / "manifest.json").read_bytes()
    assert main(["--config", str(a), "gen-corpus"]) == 4
    assert main(["--config", str(a), "--force", "gen-corpus"]) == 0
    assert (tmp_path / "a" / "corpus" / "manifest.json").read_bytes() == ma


def test_missing_artifacts_exit_3(tmp_path):
    cfg = _write(tmp_path, "empty")
    assert main(["--config", str(cfg), "pretrain", "asr"]) == 3
    assert main(["--config", str(cfg), "gen-corpus"]) == 0
    assert main(["--config", str(cfg), "pretrain", "tts"]) == 3
    assert main(["--config", str(cfg), "joint-train"]) == 3
    with pytest.warns(UserWarning, match="missing perplexity series"):
        assert main(["--config", str(cfg), "plot-perplexity"]) == 3


def test_lock_blocks_concurrent_command(tmp_path):
    import fcntl

    cfg = _write(tmp_path, "locked")
    out = tmp_path / "locked"
    out.mkdir()
    with open(out / ".lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        assert main(["--config", str(cfg), "gen-corpus"]) == 4


def test_pretrain_outputs(experiment):
    _, cfg = experiment
    ck = cfg.output_dir + "/checkpoints"
    for kind in ("speaker", "asr", "tts"):
        ckpt = load_checkpoint(f"{ck}/{kind}.ckpt")
        assert ckpt.meta["kind"] == kind and all(p.startswith(kind) for p in ckpt.partitions)
        rows = _rows(f"{ck}/{kind}_curve.csv")
        best = [float(r["best_val_loss"]) for r in rows]
        vals = [float(r["val_loss"]) for r in rows]
        assert best == [min(vals[: i + 1]) for i in range(len(vals))]


def test_joint_train_runs_and_flags(experiment):
    _, cfg = experiment
    runs = cfg.output_dir + "/runs"
    proposed = json.loads(open(f"{runs}/proposed/summary.json").read())
    plain = json.loads(open(f"{runs}/no_stepwise/summary.json").read())
    assert proposed["phase_a_epochs"] >= 1 and plain["phase_a_epochs"] == 0
    assert {r["phase"] for r in _rows(f"{runs}/no_stepwise/train_log.csv")} == {"B"}
    assert len(_rows(f"{runs}/proposed/perplexity.csv")) == cfg.train.phase_b_epochs + 1
    assert load_checkpoint(f"{runs}/proposed/model.ckpt").meta["method"] == "proposed"


def test_joint_train_refuses_to_overwrite(experiment):
    path, _ = experiment
    assert main(["--config", str(path), "joint-train"]) == 4


def test_eval_report_twice_identical(experiment, capsys):
    path, cfg = experiment
    ck = cfg.output_dir + "/runs/proposed/model.ckpt"
    capsys.readouterr()
    assert main(["--config", str(path), "eval", "--checkpoint", ck]) == 0
    first = capsys.readouterr().out
    report = json.loads(open(cfg.output_dir + "/eval/proposed_test.json").read())
    assert main(["--config", str(path), "eval", "--checkpoint", ck]) == 0
    assert capsys.readouterr().out == first
    assert json.loads(open(cfg.output_dir + "/eval/proposed_test.json").read()) == report
    assert {"per_percent", "mcd_db", "f0_rmse", "mcd_db_other_speaker", "f0_rmse_other_speaker"} <= report.keys()
    assert "| Method | PER (%) | MCD (dB) | F0 RMSE |" in first and "| proposed |" in first
    assert main(["--config", str(path), "eval", "--split", "validation"]) == 0
    assert "| pretrained |" in capsys.readouterr().out


def test_plot_perplexity(experiment, capsys):
    path, cfg = experiment
    assert main(["--config", str(path), "plot-perplexity"]) == 0
    fig = cfg.output_dir + "/figures"
    assert open(f"{fig}/perplexity.svg").read().lstrip().startswith("<?xml")
    rows = _rows(f"{fig}/perplexity.csv")
    by = {}
    for r in rows:
        by.setdefault(r["series"], []).append(float(r["perplexity"]))
    assert set(by) == {"with step-wise", "without step-wise", "human speech"}
    assert all(len(v) == cfg.train.phase_b_epochs + 1 for v in by.values())
    assert len(set(by["human speech"])) == 1


def test_plot_with_missing_series_warns(experiment, tmp_path):
    import shutil

    path, cfg = experiment
    other = _write(tmp_path, "partial")
    shutil.copytree(cfg.output_dir + "/runs/proposed", tmp_path / "partial" / "runs" / "proposed")
    with pytest.warns(UserWarning, match="without step-wise"):
        assert main(["--config", str(other), "plot-perplexity"]) == 0
    rows = _rows(tmp_path / "partial" / "figures" / "perplexity.csv")
    assert {r["series"] for r in rows} == {"with step-wise", "human speech"}
