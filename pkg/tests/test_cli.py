import json

import pytest
from PIL import Image

from freestyle.cli import main

TINY_TOML = """
[data]
samples_per_cell = 2
image_size = 16

[unet]
base_channels = 8
channel_mults = [1, 2]
time_embed_dim = 16
groupnorm_groups = 4

[train]
max_steps = 30
batch_size = 8
log_interval = 5

[classifier]
epochs = 2

[stylize]
num_steps = 4
"""


def run(capsys, *args):
    code = main(list(args))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.toml").write_text(TINY_TOML)
    cfg = str(root / "tiny.toml")
    assert main(["--config", cfg, "generate-data", str(root / "data")]) == 0
    assert main(["--config", cfg, "train", str(root / "data"), str(root / "m" / "model.fsty")]) == 0
    assert main(["--config", cfg, "train-classifier", str(root / "data"), str(root / "m" / "cls.fsty")]) == 0
    return root, cfg


def test_generate_counts(work):
    root, _ = work
    rows = (root / "data" / "manifest.jsonl").read_text().splitlines()
    assert len(rows) == 4 * 4 * 2
    assert (root / "data" / "effective_config.json").exists()


def test_train_descends_and_logs(work):
    root, _ = work
    log = [json.loads(line) for line in (root / "m" / "model.log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [5, 10, 15, 20, 25, 30]
    assert log[-1]["loss"] < log[0]["loss"]


def test_invalid_key_exit_2(tmp_path, capsys):
    (tmp_path / "bad.toml").write_text("[modulation]\nbogus = 3\n")
    code, _, err = run(capsys, "--config", str(tmp_path / "bad.toml"), "generate-data", str(tmp_path / "d"))
    assert code == 2
    line = json.loads(err.strip())
    assert "modulation.bogus" in line["message"] and "\n" not in err.strip()


def test_stylize_byte_identical_and_metrics(work, capsys):
    root, cfg = work
    img = str(root / "data" / "images" / "000000.png")
    outs = []
    for name in ("a.png", "b.png"):
        code, out, _ = run(capsys, "--config", cfg, "stylize", str(root / "m" / "model.fsty"), img,
                           str(root / "s" / name), "--style", "checker", "--reference", str(root / "m" / "cls.fsty"))
        assert code == 0
        outs.append(json.loads(out))
    assert (root / "s" / "a.png").read_bytes() == (root / "s" / "b.png").read_bytes()
    assert outs[0] == outs[1] and set(outs[0]) >= {"psnr_content", "style_accuracy", "gram_distance"}


def test_stylize_flag_overrides_change_output(work, capsys):
    root, cfg = work
    img = str(root / "data" / "images" / "000001.png")
    base = [str(root / "m" / "model.fsty"), img]
    assert run(capsys, "--config", cfg, "stylize", *base, str(root / "s" / "c.png"), "--style", "1")[0] == 0
    assert run(capsys, "--config", cfg, "stylize", *base, str(root / "s" / "d.png"), "--style", "1",
               "--b", "1.0", "--s", "0.5")[0] == 0
    assert (root / "s" / "c.png").read_bytes() != (root / "s" / "d.png").read_bytes()


@pytest.mark.parametrize("flags,code,kind", [
    (["--steps", "0"], 2, "PlanError"),
    (["--style", "nope"], 2, "RequestError"),
    (["--sigma", "5000"], 2, "RequestError"),
])
def test_stylize_rejections(work, capsys, flags, code, kind):
    root, cfg = work
    args = ["--config", cfg, "stylize", str(root / "m" / "model.fsty"), str(root / "data" / "images" / "000000.png"),
            str(root / "s" / "x.png")]
    if "--style" not in flags:
        args += ["--style", "0"]
    got, _, err = run(capsys, *args, *flags)
    assert got == code and json.loads(err)["error"] == kind


def test_corrupt_checkpoint_exit_3(work, capsys, tmp_path):
    root, cfg = work
    buf = bytearray((root / "m" / "model.fsty").read_bytes())
    buf[len(buf) // 2] ^= 0xFF
    (tmp_path / "bad.fsty").write_bytes(bytes(buf))
    code, _, err = run(capsys, "--config", cfg, "stylize", str(tmp_path / "bad.fsty"),
                       str(root / "data" / "images" / "000000.png"), str(tmp_path / "o.png"), "--style", "0")
    assert code == 3 and json.loads(err)["error"] == "ChecksumError"


def test_size_mismatch_rejected(work, capsys, tmp_path):
    root, cfg = work
    Image.new("RGB", (7, 7)).save(tmp_path / "odd.png")
    code, _, err = run(capsys, "--config", cfg, "stylize", str(root / "m" / "model.fsty"), str(tmp_path / "odd.png"),
                       str(tmp_path / "o.png"), "--style", "0")
    assert code == 2 and "divisible" in json.loads(err)["message"]


@pytest.mark.parametrize("axis,values,n", [("sigma", "300,600,850,958", 4), ("rho", "0,300,600,999", 4),
                                           ("levels", "0,1,0+1", 3), ("b", "1.0,2.5", 2)])
def test_ablate_outputs(work, capsys, axis, values, n):
    root, cfg = work
    out = root / f"abl_{axis}"
    code, _, _ = run(capsys, "--config", cfg, "ablate", str(root / "m" / "model.fsty"),
                     str(root / "data" / "images" / "000002.png"), str(out), "--axis", axis, "--values", values,
                     "--style", "2", "--reference", str(root / "m" / "cls.fsty"))
    assert code == 0
    assert len(list(out.glob(f"{axis}_*.png"))) == n
    assert Image.open(out / "grid.png").size == (n * 16, 16)
    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["col"] for r in rows] == list(range(n)) and all("path" in r for r in rows)
    assert (out / "effective_config.json").exists()


def test_ablate_empty_values(work, capsys):
    root, cfg = work
    code, _, err = run(capsys, "--config", cfg, "ablate", str(root / "m" / "model.fsty"),
                       str(root / "data" / "images" / "000000.png"), str(root / "e"), "--axis", "b", "--values", ",",
                       "--style", "0")
    assert code == 2 and json.loads(err)["error"] == "RequestError"


def test_eval_records_and_summary(work, capsys):
    root, cfg = work
    summaries = []
    for name in ("ev1", "ev2"):
        code, out, _ = run(capsys, "--config", cfg, "eval", str(root / "m" / "model.fsty"),
                           str(root / "m" / "cls.fsty"), str(root / "data"), str(root / name), "--num-contents", "3")
        assert code == 0
        summaries.append(json.loads(out))
    rows = [json.loads(line) for line in (root / "ev1" / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 3 * 4 == summaries[0]["records"]
    for key in ("psnr_content", "style_accuracy", "gram_distance"):
        assert abs(summaries[0][key] - sum(r[key] for r in rows) / len(rows)) < 1e-9
    assert summaries[0] == summaries[1]


def test_default_flags_documented():
    from freestyle.config import load_config
    cfg = load_config(None)
    assert (cfg.modulation.b, cfg.modulation.s, cfg.modulation.n_fraction) == (2.5, 1.0, 0.25)
    assert (cfg.stylize.sigma_fraction, cfg.stylize.num_steps) == (0.958, 30)
