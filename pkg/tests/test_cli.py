"""End-to-end style tests for the command surface (in-process main())."""

import json
from pathlib import Path

import numpy as np
import pytest
import torch

from rgan.cli import main
from rgan.data import (
    load_and_preprocess,
    procedural_content_images,
    procedural_texture_corpus,
    save_image,
)

SIZE = 32


def make_raw_inputs(root: Path) -> tuple[Path, Path]:
    contents_dir = root / "raw_contents"
    for i, image in enumerate(procedural_content_images(2, (SIZE, SIZE), seed=31)):
        save_image(image, contents_dir / f"content_{i}.png")
    styles_dir = root / "raw_styles"
    corpus = procedural_texture_corpus(["stripes", "checker"], 2, (SIZE, SIZE), seed=32)
    for k, (image, label) in enumerate(zip(corpus.images, corpus.labels)):
        save_image(image, styles_dir / corpus.class_names[label] / f"img_{k}.png")
    return contents_dir, styles_dir


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared raw inputs, synthesized store, and a tiny trained a2 run."""
    root = tmp_path_factory.mktemp("cli")
    contents_dir, styles_dir = make_raw_inputs(root)
    synth = root / "synth"
    code = main(
        [
            "synthesize",
            "--contents", str(contents_dir),
            "--styles", str(styles_dir),
            "--size", str(SIZE),
            "--seed", "3",
            "--out", str(synth),
        ]
    )
    assert code == 0
    run = root / "run"
    code = main(
        [
            "train",
            "--approach", "a2",
            "--steps", "2",
            "--batch-size", "2",
            "--checkpoint-every", "2",
            "--image-size", str(SIZE),
            "--seed", "5",
            "--data", str(synth),
            "--out", str(run),
        ]
    )
    assert code == 0
    return {
        "root": root,
        "contents_dir": contents_dir,
        "styles_dir": styles_dir,
        "synth": synth,
        "run": run,
        "checkpoint": run / "checkpoint_step_000002",
    }


def test_synthesize_store_layout(workspace):
    synth = workspace["synth"]
    matrix_dir = synth / "matrix"
    assert (matrix_dir / "matrix.json").is_file()
    cells = sorted(p.name for p in matrix_dir.glob("cell_*.png"))
    assert len(cells) == 2 * 4  # 2 contents x (2 classes x 2 styles)
    assert (synth / "corpus" / "manifest.json").is_file()
    manifest = json.loads((synth / "manifest.json").read_text())
    assert manifest["command"] == "synthesize"
    assert manifest["version"]
    assert manifest["started_at"] and manifest["finished_at"]


def test_synthesize_rerun_is_byte_identical(workspace, tmp_path):
    out2 = tmp_path / "synth2"
    code = main(
        [
            "synthesize",
            "--contents", str(workspace["contents_dir"]),
            "--styles", str(workspace["styles_dir"]),
            "--size", str(SIZE),
            "--seed", "3",
            "--out", str(out2),
        ]
    )
    assert code == 0
    for rel in ("matrix/cell_0_0.png", "matrix/cell_1_3.png", "corpus/stripes/img_0.png"):
        assert (workspace["synth"] / rel).read_bytes() == (out2 / rel).read_bytes(), rel


def test_synthesize_missing_style_dir_names_path(tmp_path, capsys):
    contents_dir, _ = make_raw_inputs(tmp_path)
    missing = tmp_path / "nowhere"
    code = main(
        [
            "synthesize",
            "--contents", str(contents_dir),
            "--styles", str(missing),
            "--size", str(SIZE),
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 2
    err = capsys.readouterr().err
    assert "nowhere" in err
    assert not (tmp_path / "out").exists()


def test_train_artifacts(workspace):
    run = workspace["run"]
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert workspace["checkpoint"].is_dir()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["approach"] == "a2"
    assert manifest["config"]["a2"]["image_size"] == [SIZE, SIZE]
    assert manifest["outputs"]["checkpoints"]


def test_train_validation_lists_every_problem(tmp_path, capsys):
    code = main(
        [
            "train",
            "--approach", "a1",
            "--steps", "0",
            "--data", str(tmp_path / "missing"),
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 2
    err = capsys.readouterr().err
    assert "steps" in err
    assert "missing" in err
    assert not (tmp_path / "out").exists()


def test_train_a1_requires_matrix_store(workspace, tmp_path, capsys):
    corpus_only = tmp_path / "corpus_only"
    corpus_only.mkdir()
    (corpus_only / "corpus").mkdir()
    src = workspace["synth"] / "corpus"
    for item in src.rglob("*"):
        rel = item.relative_to(src)
        if item.is_dir():
            (corpus_only / "corpus" / rel).mkdir(parents=True, exist_ok=True)
        else:
            (corpus_only / "corpus" / rel).write_bytes(item.read_bytes())
    code = main(
        [
            "train",
            "--approach", "a1",
            "--steps", "2",
            "--image-size", str(SIZE),
            "--data", str(corpus_only),
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 2
    assert "matrix" in capsys.readouterr().err


def strip_time(line: str) -> dict:
    row = json.loads(line)
    row.pop("time_ms")
    return row


def test_train_fixed_seed_reproduces_metrics(workspace, tmp_path):
    args = [
        "train",
        "--approach", "a2",
        "--steps", "2",
        "--batch-size", "2",
        "--checkpoint-every", "2",
        "--image-size", str(SIZE),
        "--seed", "5",
        "--data", str(workspace["synth"]),
    ]
    out2 = tmp_path / "again"
    assert main(args + ["--out", str(out2)]) == 0
    first = [strip_time(l) for l in (workspace["run"] / "metrics.jsonl").read_text().splitlines()]
    second = [strip_time(l) for l in (out2 / "metrics.jsonl").read_text().splitlines()]
    assert first == second


def test_config_file_with_flag_override(workspace, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"steps": 9, "batch_size": 2, "weights": {"alpha": 0.25}}))
    out = tmp_path / "out"
    code = main(
        [
            "train",
            "--config", str(cfg_path),
            "--approach", "a2",
            "--steps", "1",
            "--image-size", str(SIZE),
            "--seed", "5",
            "--data", str(workspace["synth"]),
            "--out", str(out),
        ]
    )
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["steps"] == 1  # flag wins
    assert manifest["config"]["weights"]["alpha"] == 0.25  # file wins over default
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 1


def test_unknown_config_keys_rejected(workspace, tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"stepz": 3, "weights": {"alfa": 1}}))
    code = main(
        [
            "train",
            "--config", str(cfg_path),
            "--data", str(workspace["synth"]),
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 2
    err = capsys.readouterr().err
    assert "stepz" in err and "alfa" in err


def test_transfer_writes_stylized_png(workspace, tmp_path, capsys):
    out = tmp_path / "tout"
    args = [
        "transfer",
        "--checkpoint", str(workspace["checkpoint"]),
        "--content", str(workspace["contents_dir"] / "content_0.png"),
        "--style", str(workspace["styles_dir"] / "stripes" / "img_0.png"),
        "--out", str(out),
    ]
    assert main(args) == 0
    assert "wall time" in capsys.readouterr().out
    image = load_and_preprocess(out / "stylized.png", (SIZE, SIZE))
    assert image.shape == (SIZE, SIZE, 3)
    first = (out / "stylized.png").read_bytes()
    out2 = tmp_path / "tout2"
    assert main(args[:-1] + [str(out2)]) == 0
    assert (out2 / "stylized.png").read_bytes() == first


def test_transfer_approach_mismatch(workspace, tmp_path, capsys):
    code = main(
        [
            "transfer",
            "--checkpoint", str(workspace["checkpoint"]),
            "--content", str(workspace["contents_dir"] / "content_0.png"),
            "--style", str(workspace["styles_dir"] / "stripes" / "img_0.png"),
            "--approach", "a1",
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 2
    assert "a2" in capsys.readouterr().err


def test_transfer_corrupt_checkpoint_fails(workspace, tmp_path, capsys):
    broken = tmp_path / "broken_ckpt"
    src = workspace["checkpoint"]
    for item in src.rglob("*"):
        rel = item.relative_to(src)
        if item.is_dir():
            (broken / rel).mkdir(parents=True, exist_ok=True)
        else:
            (broken / rel).parent.mkdir(parents=True, exist_ok=True)
            (broken / rel).write_bytes(item.read_bytes())
    blob = sorted((broken / "blobs").iterdir())[0]
    blob.write_bytes(blob.read_bytes()[:10])
    code = main(
        [
            "transfer",
            "--checkpoint", str(broken),
            "--content", str(workspace["contents_dir"] / "content_0.png"),
            "--style", str(workspace["styles_dir"] / "stripes" / "img_0.png"),
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 1
    assert "checksum" in capsys.readouterr().err


def test_eval_reports_and_grid(workspace, tmp_path):
    out = tmp_path / "deep" / "eval_out"
    code = main(
        [
            "eval",
            "--checkpoint", str(workspace["checkpoint"]),
            "--data", str(workspace["synth"]),
            "--grid", "2x2",
            "--out", str(out),
        ]
    )
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["approach"] == "a2"
    assert set(report["per_class"]) == {"stripes", "checker"}
    assert report["n_points"] == 4
    grid = load_and_preprocess(out / "grid.png", (3 * SIZE, 3 * SIZE))
    assert grid.shape == (3 * SIZE, 3 * SIZE, 3)
    assert (out / "pca.csv").read_text().splitlines()[0] == "x,y,label"
    counts = json.loads((out / "param_counts.json").read_text())
    assert counts["a1_total"] > 0 and counts["a2_total"] > 0
    assert set(counts["a2_breakdown"]) == {"content_encoder", "style_encoder", "decoder"}
    assert isinstance(counts["a2_smaller"], bool)
    assert json.loads((out / "manifest.json").read_text())["command"] == "eval"


def test_eval_rejects_bad_grid_spec(workspace, tmp_path, capsys):
    code = main(
        [
            "eval",
            "--checkpoint", str(workspace["checkpoint"]),
            "--data", str(workspace["synth"]),
            "--grid", "2y3",
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 2
    assert "RxC" in capsys.readouterr().err


def test_eval_grid_bounded_by_available_images(workspace, tmp_path, capsys):
    code = main(
        [
            "eval",
            "--checkpoint", str(workspace["checkpoint"]),
            "--data", str(workspace["synth"]),
            "--grid", "9x9",
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 2
    assert "exceeds" in capsys.readouterr().err


def test_midrun_failure_quarantines_out_dir(workspace, tmp_path, capsys, monkeypatch):
    import rgan.cli as cli_mod

    def boom(image, path):
        raise RuntimeError("disk gremlin")

    monkeypatch.setattr(cli_mod, "save_image", boom)
    out = tmp_path / "tout"
    code = main(
        [
            "transfer",
            "--checkpoint", str(workspace["checkpoint"]),
            "--content", str(workspace["contents_dir"] / "content_0.png"),
            "--style", str(workspace["styles_dir"] / "stripes" / "img_0.png"),
            "--out", str(out),
        ]
    )
    assert code == 1
    err = capsys.readouterr().err
    assert "disk gremlin" in err
    assert not out.exists()
    assert (tmp_path / "tout.failed").is_dir()


def test_thread_env_is_validated(workspace, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("RGAN_NUM_THREADS", "zero")
    code = main(["synthesize", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "RGAN_NUM_THREADS" in capsys.readouterr().err
    monkeypatch.setenv("RGAN_NUM_THREADS", "1")
    before = torch.get_num_threads()
    contents_dir, styles_dir = make_raw_inputs(tmp_path)
    code = main(
        [
            "synthesize",
            "--contents", str(contents_dir),
            "--styles", str(styles_dir),
            "--size", str(SIZE),
            "--out", str(tmp_path / "o2"),
        ]
    )
    assert code == 0
    assert torch.get_num_threads() == 1
    torch.set_num_threads(before)


def test_missing_required_flags_reported_together(tmp_path, capsys):
    code = main(["transfer", "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "--checkpoint is required" in err
    assert "--content is required" in err
    assert "--style is required" in err
