import io

import numpy as np
import pytest

from segmini import cost, model
from segmini.cli import run
from segmini.data import decode_pgm, load_ppm, save_ppm


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


def kv(text):
    pairs = {}
    for line in text.splitlines():
        for tok in line.split():
            k, sep, v = tok.partition("=")
            if sep:
                pairs[k] = v
    return pairs


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code, _, err = call("synth", "--kind", "ball", "--n", 10, "--size", "32x32", "--seed", 7, "--out", root / "d")
    assert code == 0, err
    code, out, err = call("train", "--data", root / "d", "--epochs", 2, "--seed", 3, "--holdout", 0.2,
                          "--class-weights", "1,10", "--out", root / "m.bin")
    assert code == 0, err
    return root, out


def test_synth_writes_pairs_and_manifest(workspace):
    root, _ = workspace
    names = sorted(p.name for p in (root / "d").iterdir())
    assert names[0] == "dataset.txt" and len(names) == 21
    assert "count=10" in (root / "d" / "dataset.txt").read_text()


def test_synth_is_byte_deterministic(workspace, tmp_path):
    root, _ = workspace
    assert call("synth", "--kind", "ball", "--n", 10, "--size", "32x32", "--seed", 7, "--out", tmp_path)[0] == 0
    for p in (root / "d").iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_train_is_byte_deterministic(workspace, tmp_path):
    root, out = workspace
    code, out2, _ = call("train", "--data", root / "d", "--epochs", 2, "--seed", 3, "--holdout", 0.2,
                         "--class-weights", "1,10", "--out", tmp_path / "m.bin")
    assert code == 0
    assert (tmp_path / "m.bin").read_bytes() == (root / "m.bin").read_bytes()
    strip = lambda s: [l for l in s.splitlines() if not l.startswith(("seconds=", "model="))]
    assert strip(out) == strip(out2)


def test_eval_on_holdout_reproduces_train_report(workspace):
    root, train_out = workspace
    last = [l for l in train_out.splitlines() if l.startswith("epoch=2 ")][0]
    report = kv(last)
    code, out, _ = call("eval", "--model", root / "m.bin", "--data", root / "d", "--split", "holdout",
                        "--seed", 3, "--holdout", 0.2)
    assert code == 0
    res = kv(out)
    assert res["pixel_accuracy"] == report["pixel_accuracy"]
    assert [res["iou.background"], res["iou.ball"]] == report["iou"].split(",")


def test_eval_threads_do_not_change_output(workspace, monkeypatch):
    root, _ = workspace
    args = ("eval", "--model", root / "m.bin", "--data", root / "d")
    single = call(*args)
    monkeypatch.setenv("SEGMINI_THREADS", "3")
    assert call(*args) == single


def test_bad_thread_setting_is_usage_error(workspace, monkeypatch):
    root, _ = workspace
    monkeypatch.setenv("SEGMINI_THREADS", "many")
    code, _, err = call("eval", "--model", root / "m.bin", "--data", root / "d")
    assert code == 1 and err.startswith("error: usage:")


def test_infer_writes_mask_and_overlay(workspace, tmp_path):
    root, _ = workspace
    code, out, _ = call("infer", "--model", root / "m.bin", "--image", root / "d" / "img_00000.ppm",
                        "--out-mask", tmp_path / "m.pgm", "--out-overlay", tmp_path / "o.ppm")
    assert code == 0
    mask = decode_pgm((tmp_path / "m.pgm").read_bytes())
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 1}
    image = load_ppm(root / "d" / "img_00000.ppm")
    ov = load_ppm(tmp_path / "o.ppm")
    assert np.array_equal(ov[0][:, mask == 0], image[0][:, mask == 0])
    if mask.any():
        assert not np.array_equal(ov[0][:, mask == 1], image[0][:, mask == 1])
    assert int(kv(out)["class.1"]) == int(mask.sum())


def test_infer_indivisible_image(workspace, tmp_path):
    root, _ = workspace
    save_ppm(np.zeros((1, 3, 30, 30), np.float32), tmp_path / "odd.ppm")
    code, _, err = call("infer", "--model", root / "m.bin", "--image", tmp_path / "odd.ppm",
                        "--out-mask", tmp_path / "m.pgm")
    assert code == 2
    assert err.startswith("error: shape:") and "8" in err and len(err.strip().splitlines()) == 1


def test_cost_report_satisfies_identities():
    code, out, _ = call("cost", "--config", "default", "--size", "64x64")
    assert code == 0
    values = kv(out)
    r = cost.model_cost(model.default_config(2), (64, 64))
    assert int(values["total.macs"]) == r.total_macs
    assert int(values["total.macs"]) < 0.3 * int(values["total.full_macs"])
    assert int(values["total.params"]) == model.init_model(model.default_config(2)).param_count()
    # pooling quarters what the next stage sees: layer costs match the closed forms at each resolution
    sep2 = next(i for i in range(len(r.layers)) if values[f"layer.{i}.name"] == "sepconv_relu2")
    assert int(values[f"layer.{sep2}.macs"]) == cost.conv_macs((8, 32, 32), 16, 3, variant="separable")


def test_cost_strided_config(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("class_count=2\ndownsample_mode=strided_conv\n")
    code, out, _ = call("cost", "--config", cfg, "--size", "64x64")
    pooled = kv(call("cost", "--config", "default", "--size", "64x64")[1])
    assert code == 0 and int(kv(out)["total.macs"]) < int(pooled["total.macs"])


def test_bench_reports_timings(workspace):
    root, _ = workspace
    code, out, _ = call("bench", "--model", root / "m.bin", "--size", "32x48", "--iters", 3)
    values = kv(out)
    assert code == 0 and float(values["ms_mean"]) > 0 and float(values["ms_p95"]) > 0
    assert values["backend"] in ("compiled", "numpy")


def test_lut_command(workspace, tmp_path):
    root, _ = workspace
    (tmp_path / "t.txt").write_text("class 1 field h=90:150 s=0.3:1 v=0.2:1\n")
    code, out, _ = call("lut", "--thresholds", tmp_path / "t.txt", "--image", root / "d" / "img_00000.ppm",
                        "--out-mask", tmp_path / "l.pgm")
    assert code == 0
    mask = decode_pgm((tmp_path / "l.pgm").read_bytes())
    assert mask.shape == (32, 32) and int(kv(out)["class.1"]) == int((mask == 1).sum()) > 0


def test_lut_bad_threshold_file(workspace, tmp_path):
    root, _ = workspace
    (tmp_path / "t.txt").write_text("class one field\n")
    code, _, err = call("lut", "--thresholds", tmp_path / "t.txt", "--image", root / "d" / "img_00000.ppm",
                        "--out-mask", tmp_path / "l.pgm")
    assert code == 2 and err.startswith("error: format:")


@pytest.mark.parametrize("argv", [
    ("frobnicate",),
    ("cost", "--size", "64x64", "--bogus"),
    ("cost", "--config", "default"),
    ("cost", "--size", "sixty"),
    ("synth", "--kind", "net", "--n", "1", "--size", "8x8", "--seed", "0", "--out", "x"),
    ("bench", "--model", "m", "--size", "8x8", "--iters", "0"),
])
def test_usage_errors(argv):
    code, _, err = call(*argv)
    assert code == 1 and err.startswith("error: usage:")


def test_train_negative_lr_is_usage_error(workspace, tmp_path):
    root, _ = workspace
    code, _, _ = call("train", "--data", root / "d", "--lr", -1, "--out", tmp_path / "m.bin")
    assert code == 1


def test_missing_inputs_are_data_errors(tmp_path):
    code, _, err = call("eval", "--model", tmp_path / "absent.bin", "--data", tmp_path)
    assert code == 2 and err.startswith("error: ")
    code, _, err = call("train", "--data", tmp_path, "--out", tmp_path / "m.bin")
    assert code == 2 and err.startswith("error: format:")


def test_corrupt_model_is_format_error(tmp_path):
    (tmp_path / "m.bin").write_bytes(b"NOTAMODEL")
    code, _, err = call("bench", "--model", tmp_path / "m.bin", "--size", "8x8")
    assert code == 2 and err.startswith("error: format:")


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "synth" in capsys.readouterr().out
