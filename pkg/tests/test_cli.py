import json
from types import SimpleNamespace

import numpy as np
import pytest
import yaml

from ftrnn import cli
from ftrnn.dsp import Waveform
from ftrnn.wavio import read_wav, write_wav

TINY = {
    "gen": {"sample_rate": 8000, "utterances_per_speaker": [1, 1], "gap_range": [0.1, 0.3],
            "utterance_s_range": [0.4, 0.6], "fixed_length_s": 1.5, "rir_max_order": 2},
    "model": {"D": 4, "N": 1, "H_full": 4, "H_sub": 4},
    "stft": {"n_fft": 64, "hop": 32},
    "train": {"batch_size": 2, "max_epochs": 2, "segment_s": 1.0},
    "data": {"train": 2, "val": 1, "test": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert cli.run(["gen-data", "--config", str(cfg), "--out", str(root / "data"), "--seed", "3"]) == 0
    assert cli.run(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root, cfg


def test_gen_data_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert cli.run(["gen-data", "--config", str(cfg), "--out", str(tmp_path), "--seed", "3"]) == 0
    for split in ("train", "val", "test"):
        a = (root / "data" / split / "manifest.jsonl").read_bytes()
        assert a == (tmp_path / split / "manifest.jsonl").read_bytes()
    assert len((tmp_path / "train" / "manifest.jsonl").read_text().splitlines()) == 2
    assert (root / "data" / "train" / "manifest.jsonl").read_bytes() != (root / "data" / "test" / "manifest.jsonl").read_bytes()


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    assert (run / "best.ckpt").exists() and (run / "final.ckpt").exists()
    assert len((run / "history.jsonl").read_text().splitlines()) == 2
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["model"]["D"] == 4 and resolved["train"]["seed"] == 1


def test_separate(workspace, tmp_path):
    root, cfg = workspace
    x = 0.1 * np.random.default_rng(0).standard_normal(12345)
    write_wav(tmp_path / "mix.wav", Waveform(x, 8000))
    code = cli.run(["separate", "--config", str(cfg), "--model", str(root / "run" / "best.ckpt"),
                    "--in", str(tmp_path / "mix.wav"), "--out", str(tmp_path / "out")])
    assert code == 0
    for c in range(2):
        assert len(read_wav(tmp_path / "out" / f"spk{c}.wav")) == 12345


def test_stitch_eval(workspace, tmp_path):
    root, cfg = workspace
    code = cli.run(["stitch-eval", "--config", str(cfg), "--model", str(root / "run" / "best.ckpt"),
                    "--data", str(root / "data" / "test"), "--out", str(tmp_path), "--segment-s", "0.5",
                    "--overlap", "0.2"])
    assert code == 0
    rows = json.loads((tmp_path / "stitch_report.json").read_text())
    diags = [json.loads(line) for line in (tmp_path / "segments.jsonl").read_text().splitlines()]
    assert len(rows) == 2
    for row in rows:
        segs = [d for d in diags if d["id"] == row["id"]]
        # 1.5 s at 0.5 s segments with a 0.4 s hop: starts 0, 0.4, 0.8, 1.2
        assert len(segs) == row["segments"] == 4
        assert all(sorted(d["permutation"]) == [0, 1] for d in segs)


def test_evaluate(workspace, tmp_path, capsys):
    root, cfg = workspace
    code = cli.run(["evaluate", "--config", str(cfg), "--model", str(root / "run" / "best.ckpt"),
                    "--data", str(root / "data" / "test"), "--out", str(tmp_path), "--collar", "0.1"])
    assert code == 0
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["corpus"]["n"] == 2 and "params" in (tmp_path / "report.txt").read_text()
    assert data["by_gap_range_s"] == {"0.1-0.3": data["corpus"]}
    assert "# config" in capsys.readouterr().out


def test_report_rules():
    with pytest.raises(ValueError, match="empty"):
        cli.report([])
    row = {"id": "a", "si_sdr": 3.5, "der": 0.25, "gap_range_s": [1, 3], "utterances_per_speaker": [4, 5]}
    text, data = cli.report([row])
    assert data["corpus"] == {"si_sdr": 3.5, "der": 0.25, "n": 1}
    assert "3.50" in text and "25.0" in text


def test_report_groups_match_metadata():
    rng = np.random.default_rng(0)
    rows = []
    for i in range(30):
        gap = [[1, 3], [0, 1], [2, 4]][i % 3]
        utt = [[4, 5], [2, 3]][i % 2]
        rows.append({"id": f"r{i:02d}", "si_sdr": float(rng.normal()), "der": float(rng.uniform()),
                     "gap_range_s": gap, "utterances_per_speaker": utt})
    _, data = cli.report(rows)
    for key, group in data["by_gap_range_s"].items():
        members = [r for r in rows if f"{r['gap_range_s'][0]:g}-{r['gap_range_s'][1]:g}" == key]
        assert group["n"] == len(members)
        assert group["si_sdr"] == pytest.approx(np.mean([r["si_sdr"] for r in members]))
    assert sum(g["n"] for g in data["by_utterances_per_speaker"].values()) == 30


def test_exit_codes(workspace, tmp_path):
    root, cfg = workspace
    assert cli.run([]) == cli.EXIT_USAGE
    assert cli.run(["fly"]) == cli.EXIT_USAGE
    assert cli.run(["gen-data", "--out", str(tmp_path), "gen.bogus=1"]) == cli.EXIT_CONFIG
    assert cli.run(["gen-data", "--out", str(tmp_path), "nosection=1"]) == cli.EXIT_CONFIG
    assert cli.run(["gen-data", "--out", str(tmp_path), "gen.gap_range=[3,1]"]) == cli.EXIT_CONFIG
    assert cli.run(["gen-data", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path)]) == cli.EXIT_MISSING
    assert cli.run(["separate", "--model", str(tmp_path / "no.ckpt"), "--in", "x.wav", "--out", str(tmp_path)]) \
        == cli.EXIT_MISSING
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "manifest.jsonl").write_text("{oops\n")
    assert cli.run(["evaluate", "--config", str(cfg), "--model", str(root / "run" / "best.ckpt"),
                    "--data", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_MALFORMED
    (tmp_path / "junk.ckpt").write_bytes(b"JUNK")
    write_wav(tmp_path / "m.wav", Waveform(np.zeros(800), 8000))
    assert cli.run(["separate", "--model", str(tmp_path / "junk.ckpt"), "--in", str(tmp_path / "m.wav"),
                    "--out", str(tmp_path)]) == cli.EXIT_MALFORMED
    (tmp_path / "bad.yaml").write_text("gen: [1, 2\n")
    assert cli.run(["selftest", "--config", str(tmp_path / "bad.yaml")]) == cli.EXIT_CONFIG


def test_overrides_and_precision():
    args = SimpleNamespace(seed=5, loss="sa-sdr")
    r = cli.resolve(cli.load_config(None, ["gen.snr_range_db=[5, 5]", "stft.n_fft=256", "stft.hop=128",
                                           "train.lr=0.01"]), args)
    assert r["gen"].snr_range_db == (5, 5) and r["model"].n_fft == 256
    assert r["train"].lr == 0.01 and r["train"].loss == "sa-sdr" and r["train"].seed == 6
    with pytest.raises(cli.ConfigError, match="sample_rate"):
        cli.resolve(cli.load_config(None, ["model.sample_rate=8000"]), SimpleNamespace())


def test_selftest_command(capsys):
    assert cli.run(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("ok  ") >= 8
