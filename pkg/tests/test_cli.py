import json

import numpy as np
import pytest
from click.testing import CliRunner

from compact_tracker.cli import main, normalize_block, read_boxes, write_boxes
from compact_tracker.imaging import read_ppm

TINY = {"d_model": 16, "dec_dim": 16, "box_hidden": 16, "score_hidden": 16, "batch_size": 2, "stage2_steps": 1}


@pytest.fixture
def run(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    runner = CliRunner()

    def _run(*args, out="out", config=True):
        pre = ["--out-dir", str(tmp_path / out)] + (["--config", str(cfg)] if config else [])
        return runner.invoke(main, [*pre, *args], catch_exceptions=False)

    return _run


@pytest.fixture
def trained(run, tmp_path):
    r = run("train", "--steps", "0", out="init")
    assert r.exit_code == 0, r.output
    return tmp_path / "init" / "model.ckpt"


def test_verify_attention_pass_and_negative_control(run, tmp_path):
    r = run("verify-attention", "--trials", "1", "--no-grad")
    assert r.exit_code == 0, r.output
    rep = json.loads((tmp_path / "out" / "verify_attention.json").read_text())
    assert rep["passed"]
    assert run("verify-attention", "--trials", "2", "--tol", "1e-30", "--no-grad").exit_code == 1


def test_usage_errors_exit_2(run, tmp_path):
    assert run("track", "--checkpoint", str(tmp_path / "missing.ckpt"), "--frames", str(tmp_path)).exit_code == 2
    assert run("eval", "--results", str(tmp_path / "a.txt"), "--gt", str(tmp_path / "b.txt")).exit_code == 2
    assert CliRunner().invoke(main, ["--preset", "huge", "model-stats"]).exit_code == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    assert CliRunner().invoke(main, ["--config", str(bad), "model-stats"]).exit_code == 2


def test_config_is_echoed(tmp_path):
    r = CliRunner().invoke(main, ["--out-dir", str(tmp_path / "o"), "--seed", "5", "model-stats"])
    assert r.exit_code == 0
    echoed = json.loads((tmp_path / "o" / "config.json").read_text())
    assert echoed["seed"] == 5 and echoed["preset"] == "desk"


def test_train_zero_steps_then_track(run, trained, tmp_path):
    assert run("make-sequence", "--length", "5", out="seq").exit_code == 0
    seq = tmp_path / "seq"
    assert len(list((seq / "frames").glob("*.ppm"))) == 5
    r = run("track", "--checkpoint", str(trained), "--frames", str(seq / "frames"), "--gt", str(seq / "groundtruth.txt"), out="trk")
    assert r.exit_code == 0, r.output
    res = read_boxes(tmp_path / "trk" / "results.txt")
    assert res.shape == (5, 4)
    m = json.loads((tmp_path / "trk" / "metrics.json").read_text())
    assert m["frames"] == 4 and 0 <= m["auc"] <= 1
    # bit-identical on a second run
    run("track", "--checkpoint", str(trained), "--frames", str(seq / "frames"), "--gt", str(seq / "groundtruth.txt"), out="trk2")
    for f in ("results.txt", "scores.txt", "metrics.json"):
        assert (tmp_path / "trk" / f).read_bytes() == (tmp_path / "trk2" / f).read_bytes()


def test_track_needs_an_initial_box(run, trained, tmp_path):
    run("make-sequence", "--length", "3", out="seq")
    r = run("track", "--checkpoint", str(trained), "--frames", str(tmp_path / "seq" / "frames"))
    assert r.exit_code == 2
    r = run("track", "--checkpoint", str(trained), "--frames", str(tmp_path / "seq" / "frames"), "--init", "10 10 12 12", out="t")
    assert r.exit_code == 0 and json.loads((tmp_path / "t" / "metrics.json").read_text())["frames"] == 3


def test_eval_perfect_boxes(run, tmp_path):
    gt = np.array([[10, 10, 20, 20], [12, 11, 20, 21], [14, 12, 19, 22.5]])
    write_boxes(tmp_path / "gt.txt", gt)
    r = run("eval", "--results", str(tmp_path / "gt.txt"), "--gt", str(tmp_path / "gt.txt"))
    assert r.exit_code == 0
    m = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert m["auc"] == 1.0 and m["precision"] == 1.0 and m["mean_iou"] == 1.0 and m["frames"] == 2


def test_box_file_round_trip(tmp_path):
    b = np.array([[1.5, 2.25, 3.0, 4.125], [0.1, 0.2, 0.3, 0.4]])
    write_boxes(tmp_path / "b.txt", b)
    assert np.array_equal(read_boxes(tmp_path / "b.txt"), b)
    (tmp_path / "c.txt").write_text("1,2,3,4\n\n5 6 7 8\n")
    assert read_boxes(tmp_path / "c.txt").tolist() == [[1, 2, 3, 4], [5, 6, 7, 8]]
    (tmp_path / "d.txt").write_text("1 2 3\n")
    with pytest.raises(ValueError):
        read_boxes(tmp_path / "d.txt")


def _pgm(path):
    buf = path.read_bytes()
    parts = buf.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def test_render_attn_files(run, trained, tmp_path):
    r = run("render-attn", "--checkpoint", str(trained), out="attn")
    assert r.exit_code == 0, r.output
    files = sorted((tmp_path / "attn").glob("*.pgm"))
    assert len(files) == 2 * 3
    shapes = {f.name.split("_")[1]: _pgm(f).shape for f in files if f.name.startswith("layer0")}
    assert shapes == {"s2s.pgm": (64, 64), "t2t.pgm": (32, 32), "s2t.pgm": (64, 32)}
    for f in files:
        a = _pgm(f)
        assert (a.min(), a.max()) == (0, 255) or np.all(a == 128)
    assert run("render-attn", "--checkpoint", str(trained), "--layer", "2").exit_code == 2
    run("render-attn", "--checkpoint", str(trained), "--layer", "1", out="one")
    assert len(list((tmp_path / "one").glob("*.pgm"))) == 3


def test_normalize_block():
    assert normalize_block(np.full((3, 3), 0.2)).tolist() == [[128.0] * 3] * 3
    n = normalize_block(np.array([[1.0, 2.0], [3.0, 5.0]]))
    assert n.min() == 0 and n.max() == 255


def test_recon_demo(run, trained, tmp_path):
    r = run("recon-demo", "--checkpoint", str(trained), "--mask-ratio", "0.5", out="rec")
    assert r.exit_code == 0, r.output
    names = {p.name for p in (tmp_path / "rec").glob("*.ppm")}
    assert len(names) == 12
    tgt = read_ppm(tmp_path / "rec" / "s2s_target.ppm")
    masked = read_ppm(tmp_path / "rec" / "s2s_masked.ppm")
    assert tgt.shape == (64, 64, 3) and np.mean(np.all(tgt != masked, axis=-1)) > 0.2


def _closed_form(c):
    D, p, E = c["d_model"], c["patch_size"], c["dec_dim"]
    P = p * p * 3
    nt, ns = (c["template_side"] // p) ** 2, (c["search_side"] // p) ** 2
    hid = D * c["mlp_ratio"]
    block = 2 * D + 3 * D * D + D * D + D + 2 * D + D * hid + hid + hid * D + D
    enc = P * D + D + (nt + ns) * D + D + c["depth"] * block + 2 * D
    box = 2 * (D * c["box_hidden"] + c["box_hidden"] + c["box_hidden"] + 1)
    sh = c["score_hidden"]
    score = D * sh + sh + sh * sh + sh + sh + 1
    eh = E * c["dec_mlp_ratio"]
    dblock = 4 * E * E + E + E * eh + eh + eh * E + E + 4 * E
    dec = lambda L: D * E + E + E + L * E + c["dec_depth"] * dblock + 2 * E + E * P + P  # noqa: E731
    return {"encoder": enc, "box_head": box, "score_head": score, "self_decoder": dec(nt + ns), "cross_decoder": dec(nt)}


def test_model_stats_closed_form(tmp_path):
    from compact_tracker.config import load_preset

    r = CliRunner().invoke(main, ["--out-dir", str(tmp_path), "model-stats"])
    assert r.exit_code == 0
    full = json.loads((tmp_path / "model_stats.json").read_text())
    stats = full["params"]
    ref = _closed_form(load_preset("desk").to_dict())
    assert {k: stats[k] for k in ref} == ref and stats["total"] == sum(ref.values())
    assert full["inference_params"] == ref["encoder"] + ref["box_head"] + ref["score_head"]
    deeper = tmp_path / "deep.json"
    deeper.write_text('{"depth": 4}')
    CliRunner().invoke(main, ["--out-dir", str(tmp_path / "d"), "--config", str(deeper), "model-stats"])
    deep = json.loads((tmp_path / "d" / "model_stats.json").read_text())["params"]
    D = 32
    assert deep["total"] - stats["total"] == 2 * (2 * D + 4 * D * D + D + 2 * D + 2 * D * 2 * D + 2 * D + D)


def test_ablation_row_counts(run, tmp_path):
    r = run("ablate-streams", "--steps", "1", "--no-stage2", out="abl")
    assert r.exit_code == 0, r.output
    lines = (tmp_path / "abl" / "ablate_streams.csv").read_text().splitlines()
    assert lines[0].startswith("config,auc,precision") and len(lines) == 6
    assert [ln.split(",")[0] for ln in lines[1:]] == ["{1234}", "{134}", "{234}", "{123}", "{23}"]
    assert "61.7" in r.output
