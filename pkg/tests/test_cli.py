import csv
import json
import struct
from pathlib import Path

import numpy as np
import pytest

from ap_oracle import oracle_class_cap
from ien.cli import main
from ien.datagen import LabeledStream, read_features, write_features
from ien.network import IenConfig, IenModel, load_checkpoint, save_checkpoint

GOLDEN = Path(__file__).parent / "golden" / "tiny.ienf"
GOLDEN_LABELS = [0, 0, 1, 1, 1, 0, 2, 2, 0, 0, 1, 2]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def gen(capsys, out_dir, *extra):
    args = ["gen-data", "--mode", "separable", "--k", 3, "--dv", 8, "--len", 120, "--seed", 7,
            "--out-dir", out_dir, *extra]
    code, out, err = run(capsys, *args)
    assert code == 0, err
    return out


def test_gen_data_is_rerunnable_bit_identically(tmp_path, capsys):
    out = gen(capsys, tmp_path / "a")
    gen(capsys, tmp_path / "b")
    assert "seed=7" in out
    for name in ("train.ienf", "test.ienf"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "train.ienf").read_bytes() != (tmp_path / "a" / "test.ienf").read_bytes()


def test_gen_data_missing_flag_names_it(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--mode", "early_only", "--k", 3, "--dv", 16, "--out-dir", tmp_path)
    assert code != 0
    assert err.startswith("ERROR UsageError:") and "--len" in err
    assert err.count("\n") == 1


def test_gen_data_too_short_fails_before_writing(tmp_path, capsys):
    out_dir = tmp_path / "short"
    code, _, err = run(capsys, "gen-data", "--mode", "early_only", "--k", 3, "--dv", 16, "--len", 4,
                       "--out-dir", out_dir)
    assert code != 0 and "ERROR UsageError" in err
    assert not out_dir.exists()


def test_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"mode": "persistent", "K": 2, "d_v": 4, "stream_len": 30, "seed": 1}))
    code, _, err = run(capsys, "gen-data", "--config", cfg, "--k", 5, "--out-dir", tmp_path)
    assert code == 0, err
    stream = read_features(tmp_path / "train.ienf")
    assert (stream.K, stream.d_v, len(stream)) == (5, 4, 30)


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"colour": "blue"}))
    code, _, err = run(capsys, "gen-data", "--config", cfg)
    assert code != 0 and err.startswith("ERROR ConfigError:")


def test_unknown_verb_and_bad_flag_type(capsys):
    assert run(capsys, "frob")[0] != 0
    code, _, err = run(capsys, "train", "--epochs", "many")
    assert code != 0 and err.startswith("ERROR UsageError:")


def test_missing_file_is_io_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--train", tmp_path / "absent.ienf")
    assert code != 0 and err.startswith("ERROR FileNotFoundError:")


def test_train_with_default_widths_reduces_loss(tmp_path, capsys):
    gen(capsys, tmp_path)
    code, _, err = run(capsys, "train", "--train", tmp_path / "train.ienf", "--epochs", 2, "--out-dir", tmp_path)
    assert code == 0, err
    with open(tmp_path / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert float(rows[-1]["mean_loss"]) < float(rows[0]["mean_loss"])
    model = load_checkpoint(tmp_path / "model.ienm")
    assert (model.config.d_e, model.config.d_h, model.config.K, model.config.d_v) == (512, 512, 3, 8)


def _train_small(capsys, data_dir, out_dir, *extra):
    code, _, err = run(capsys, "train", "--train", data_dir / "train.ienf", "--d-e", 6, "--d-h", 5,
                       "--window", 4, "--out-dir", out_dir, *extra)
    assert code == 0, err
    return (out_dir / "model.ienm").read_bytes()


def test_zero_epochs_saves_initialization(tmp_path, capsys):
    gen(capsys, tmp_path)
    saved = _train_small(capsys, tmp_path, tmp_path / "m", "--epochs", 0, "--seed", 3)
    init = IenModel.init(IenConfig(4, 8, 6, 5, 3), rng=3)
    save_checkpoint(init, tmp_path / "init.ienm")
    assert saved == (tmp_path / "init.ienm").read_bytes()


def test_train_is_deterministic_under_seed(tmp_path, capsys):
    gen(capsys, tmp_path)
    a = _train_small(capsys, tmp_path, tmp_path / "a", "--epochs", 2)
    b = _train_small(capsys, tmp_path, tmp_path / "b", "--epochs", 2)
    c = _train_small(capsys, tmp_path, tmp_path / "c", "--epochs", 2, "--seed", 1)
    assert a == b and a != c


def test_train_width_mismatch_is_config_error(tmp_path, capsys):
    gen(capsys, tmp_path)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"d_v": 9}))
    code, _, err = run(capsys, "train", "--config", cfg, "--train", tmp_path / "train.ienf")
    assert code != 0 and err.startswith("ERROR ConfigError:")


def _write_model(path, K, d_v, T_plus_1=3, scheme="zeros"):
    save_checkpoint(IenModel.init(IenConfig(T_plus_1, d_v, 3, 3, K), scheme=scheme), path)


def test_eval_uniform_predictions_match_oracle(tmp_path, capsys):
    # Zero weights give uniform rows, so every frame ties and the ranking is by index.
    labels = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    write_features(tmp_path / "bal.ienf", LabeledStream(np.ones((8, 2)), labels, 1))
    _write_model(tmp_path / "zero.ienm", K=1, d_v=2)
    code, _, err = run(capsys, "eval", "--model", tmp_path / "zero.ienm", "--data", tmp_path / "bal.ienf",
                       "--out-dir", tmp_path)
    assert code == 0, err
    report = json.loads((tmp_path / "report.json").read_text())
    probs = [[0.5, 0.5]] * 8
    expected = float(oracle_class_cap(probs, labels.tolist(), 1))
    assert report["per_class_cap"]["1"] == pytest.approx(expected, abs=1e-12)
    assert report["mean_cross_entropy"] == pytest.approx(np.log(2), abs=1e-12)


def test_eval_perfect_timeline_scores_one(tmp_path, capsys):
    labels = [0, 2, 1, 1, 0, 2, 3]
    path = tmp_path / "perfect.csv"
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["chunk_index", "label", "p_0", "p_1", "p_2", "p_3"])
        for n, label in enumerate(labels):
            out.writerow([n, label] + [1.0 if k == label else 0.0 for k in range(4)])
    code, _, err = run(capsys, "eval", "--timeline", path, "--out-dir", tmp_path)
    assert code == 0, err
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["mAP"] == 1.0 and report["mcAP"] == 1.0


def test_eval_timeline_and_report_layout(tmp_path, capsys):
    gen(capsys, tmp_path)
    _train_small(capsys, tmp_path, tmp_path, "--epochs", 1)
    args = ["eval", "--model", tmp_path / "model.ienm", "--data", tmp_path / "test.ienf"]
    assert run(capsys, *args, "--out-dir", tmp_path / "e1")[0] == 0
    assert run(capsys, *args, "--out-dir", tmp_path / "e2")[0] == 0
    with open(tmp_path / "e1" / "timeline.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["chunk_index", "label", "p_0", "p_1", "p_2", "p_3"]
    assert len(rows) - 1 == 120
    assert [int(r[1]) for r in rows[1:]] == read_features(tmp_path / "test.ienf").labels.tolist()
    r1 = json.loads((tmp_path / "e1" / "report.json").read_text())
    r2 = json.loads((tmp_path / "e2" / "report.json").read_text())
    assert list(r1) == ["mAP", "mcAP", "per_class_ap", "per_class_cap", "skipped_classes", "n_chunks",
                        "mean_cross_entropy", "config", "timings"]
    r1.pop("timings"), r2.pop("timings")
    r1["config"].pop("out_dir"), r2["config"].pop("out_dir")
    assert r1 == r2
    # Re-scoring the written timeline reproduces the metrics.
    assert run(capsys, "eval", "--timeline", tmp_path / "e1" / "timeline.csv", "--out-dir", tmp_path / "e3")[0] == 0
    r3 = json.loads((tmp_path / "e3" / "report.json").read_text())
    assert (r3["mAP"], r3["mcAP"]) == (r1["mAP"], r1["mcAP"])


def test_eval_k_mismatch_is_config_error(tmp_path, capsys):
    _write_model(tmp_path / "k4.ienm", K=4, d_v=3)
    code, _, err = run(capsys, "eval", "--model", tmp_path / "k4.ienm", "--data", GOLDEN, "--out-dir", tmp_path)
    assert code != 0 and err.startswith("ERROR ConfigError:") and "K=2" in err
    assert not (tmp_path / "timeline.csv").exists()


def test_golden_ienf_contents():
    stream = read_features(GOLDEN)
    assert (stream.K, stream.d_v, len(stream)) == (2, 3, 12)
    assert stream.labels.tolist() == GOLDEN_LABELS
    expected = [[0.5 * (n % 5) - 1.0, 0.25 * (n % 3), -0.125 * n] for n in range(12)]
    assert stream.feats.tolist() == expected


def test_golden_ienf_rewrites_identically(tmp_path):
    write_features(tmp_path / "copy.ienf", read_features(GOLDEN))
    assert (tmp_path / "copy.ienf").read_bytes() == GOLDEN.read_bytes()
    assert GOLDEN.read_bytes()[:20] == b"IENF" + struct.pack("<4I", 1, 12, 3, 2)


def test_golden_ienf_train_and_eval_end_to_end(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--train", GOLDEN, "--d-e", 4, "--d-h", 4, "--window", 3,
                       "--epochs", 2, "--out-dir", tmp_path)
    assert code == 0, err
    code, out, err = run(capsys, "eval", "--model", tmp_path / "model.ienm", "--data", GOLDEN, "--out-dir", tmp_path)
    assert code == 0, err
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["n_chunks"] == 12 and set(report["per_class_ap"]) == {"1", "2"}
    assert 0.0 <= report["mAP"] <= 1.0 and "mAP=" in out


def test_ablate_small_run_is_reproducible(tmp_path, capsys):
    args = ["ablate", "--k", 2, "--dv", 6, "--d-e", 4, "--d-h", 4, "--window", 4, "--len", 200, "--test-len", 80,
            "--val-len", 60, "--epochs", 2, "--seeds", 2, "--variants", "lstm_plain", "ieu"]
    code, out, err = run(capsys, *args, "--out-dir", tmp_path / "a")
    assert code == 0, err
    assert run(capsys, *args, "--out-dir", tmp_path / "b")[0] == 0
    a, b = (tmp_path / d / "ablation.json" for d in "ab")
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "ablation.csv").read_bytes() == (tmp_path / "b" / "ablation.csv").read_bytes()
    report = json.loads(a.read_text())
    assert list(report["map_by_seed"]) == ["lstm_plain", "ieu"]
    assert all(len(v) == 2 for v in report["map_by_seed"].values())
    assert report["reference_thumos14_map_pct"]["ieu"] == 60.4
    assert "reference mAP" in out
    with open(tmp_path / "a" / "ablation.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 2 * 2


def test_ablate_on_files(tmp_path, capsys):
    gen(capsys, tmp_path)
    code, _, err = run(capsys, "ablate", "--train", tmp_path / "train.ienf", "--test", tmp_path / "test.ienf",
                       "--d-e", 4, "--d-h", 4, "--window", 4, "--epochs", 1, "--seeds", 1, "--val-len", 0,
                       "--out-dir", tmp_path)
    assert code == 0, err
    report = json.loads((tmp_path / "ablation.json").read_text())
    assert list(report["mean_map"]) == ["lstm_plain", "lstm_bundle", "lstm_sophisticated", "ieu"]
    assert report["config"]["K"] == 3


def test_ablate_rejects_unknown_variant(tmp_path, capsys):
    code, _, err = run(capsys, "ablate", "--variants", "gru", "--out-dir", tmp_path)
    assert code != 0 and err.startswith("ERROR UsageError:")


def test_bench_report(tmp_path, capsys):
    code, out, err = run(capsys, "bench", "--d-e", 8, "--d-h", 8, "--duration", 0.2, "--out-dir", tmp_path)
    assert code == 0, err
    report = json.loads((tmp_path / "bench.json").read_text())
    assert set(report["chunks_per_second"]) == {"lstm_plain", "ieu"}
    assert report["reference_delta_pct"] == -12.57
    assert "-12.57%" in out
