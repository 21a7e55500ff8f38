import json

import numpy as np
import pytest
from PIL import Image

from fpaenet import cli, config
from fpaenet.tensor import Tensor

TINY = """\
backbone.input_size=64
backbone.stem_stride=2
backbone.stem_channels=4
backbone.channels=8
backbone.blocks_per_stage=1
head.depth=1
optim.lr=0.001
optim.max_steps=3
data.count=8
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


@pytest.fixture
def trained_run(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", tiny_cfg, "--out", str(out)]) == 0
    return out


def run(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--bogus"])
    assert exc.value.code == 1


def test_train_writes_artifacts_and_echoes_protocol(trained_run, capsys):
    for name in ("checkpoint.fpae", "run_record.json", "manifest.json"):
        assert (trained_run / name).exists()
    record = json.loads((trained_run / "run_record.json").read_text())
    assert len(record["losses"]) == 3 and all(np.isfinite(record["losses"]))
    assert record["config"]["optim.batch_size"] == "2" and record["config"]["optim.epochs"] == "10"
    assert record["eval_report"]["iou_threshold"] == 0.5
    manifest = json.loads((trained_run / "manifest.json").read_text())
    assert len(manifest["splits"]["test"]) == round(8 * 1019 / 6012)


def test_invalid_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("neck.attention=true\nneck.enhancement=false\n")
    code, _, err = run(["train", "--config", str(bad), "--out", str(tmp_path / "o")], capsys)
    assert code == 2 and "requires" in err
    code, _, _ = run(["train", "--config", str(tmp_path / "missing.cfg")], capsys)
    assert code == 2


def test_non_finite_loss_exit_3(tmp_path, tiny_cfg, monkeypatch, capsys):
    import fpaenet.train as train_mod

    monkeypatch.setattr(train_mod, "total_loss",
                        lambda *a, **k: (Tensor(np.nan, requires_grad=True), {"cls": np.nan, "box": 0.0}))
    code, _, err = run(["train", "--config", tiny_cfg, "--out", str(tmp_path / "o")], capsys)
    assert code == 3 and "non-finite" in err


def test_eval_persists_report_and_rejects_mismatch(trained_run, tiny_cfg, tmp_path, capsys):
    report_path = tmp_path / "report.json"
    ck = str(trained_run / "checkpoint.fpae")
    code, out, _ = run(["eval", "--checkpoint", ck, "--config", tiny_cfg, "--out", str(report_path)], capsys)
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report == json.loads(out)
    assert report["map"] == sum(report["ap"]) / len(report["ap"])
    code, _, err = run(["eval", "--checkpoint", ck, "--config", "preset:default"], capsys)
    assert code == 2 and "backbone.channels: checkpoint=8 config=32" in err


def test_eval_is_repeatable_after_reload(trained_run, capsys):
    ck = str(trained_run / "checkpoint.fpae")
    _, first, _ = run(["eval", "--checkpoint", ck, "--split", "all"], capsys)
    _, second, _ = run(["eval", "--checkpoint", ck, "--split", "all"], capsys)
    assert first == second


def test_eval_on_empty_dataset_is_an_error(trained_run, tmp_path, capsys):
    data = tmp_path / "empty"
    data.mkdir()
    (data / "annotations.csv").write_text("patientId,x,y,width,height,Target\n")
    code, _, err = run(["eval", "--checkpoint", str(trained_run / "checkpoint.fpae"), "--dataset", str(data)],
                       capsys)
    assert code == 2 and "split" in err


def test_train_on_directory_dataset(tmp_path, tiny_cfg, capsys):
    data = tmp_path / "rsna"
    data.mkdir()
    rows = []
    for i in range(4):
        Image.fromarray(np.full((128, 128), 40 * i, np.uint8)).save(data / f"p{i}.png")
        rows.append(f"p{i},{10 + i},20,30,40,1" if i % 2 else f"p{i},,,,,0")
    (data / "annotations.csv").write_text("patientId,x,y,width,height,Target\n" + "\n".join(rows) + "\n")
    code, out, _ = run(["train", "--config", tiny_cfg, "--dataset", str(data), "--split", "all",
                        "--out", str(tmp_path / "o")], capsys)
    assert code == 0 and json.loads(out)["steps"] == 3


def test_detect_blank_image(trained_run, tmp_path, capsys):
    img = tmp_path / "blank.png"
    Image.fromarray(np.zeros((64, 64), np.uint8)).save(img)
    overlay = tmp_path / "overlay.png"
    argv = ["detect", str(img), "--checkpoint", str(trained_run / "checkpoint.fpae"), "--out", str(overlay)]
    code, out, _ = run(argv, capsys)
    assert code == 0
    payload = json.loads(out)
    assert payload["count"] == len(payload["detections"]) == 0
    assert overlay.exists() and Image.open(overlay).size == (64, 64)
    assert run(argv, capsys)[1] == out


def test_detect_unreadable_image(trained_run, tmp_path, capsys):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    code, _, err = run(["detect", str(tmp_path / "junk.png"), "--checkpoint",
                        str(trained_run / "checkpoint.fpae")], capsys)
    assert code == 2 and "cannot read image" in err


def test_draw_overlay_burns_boxes(tmp_path):
    from fpaenet.boxes import Detection

    path = tmp_path / "o.png"
    cli.draw_overlay(np.zeros((32, 32), np.uint8), [Detection((4, 4, 10, 10), 0.9)], 1.0, 1.0, path)
    arr = np.asarray(Image.open(path))
    assert tuple(arr[4, 8]) == (255, 0, 0) and tuple(arr[20, 20]) == (0, 0, 0)


def test_gradcheck_command_and_fault(capsys):
    code, out, _ = run(["gradcheck"], capsys)
    assert code == 0 and "FAIL" not in out and "runtime" in out
    code, out, _ = run(["gradcheck", "--inject-fault", "relu"], capsys)
    assert code == 3 and "FAIL" in out


def test_ablate_rows(tmp_path, tiny_cfg, capsys):
    code, out, _ = run(["ablate", "--config", tiny_cfg, "--out", str(tmp_path / "ab")], capsys)
    assert code == 0
    rows = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert [(r["new_channels"], r["enhancement"], r["attention"]) for r in rows] == list(cli.ABLATION_ROWS)
    params = [r["parameters"] for r in rows]
    assert params[0] < params[1] < params[2]
    assert len(out.strip().splitlines()) == 4
    assert cli.ablation_configs(config.load(tiny_cfg))[2] == config.load(tiny_cfg)
