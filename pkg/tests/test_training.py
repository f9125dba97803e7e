"""Tests for the training procedures and the checkpoint format."""

import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from rgan.data import (
    procedural_content_images,
    procedural_stylizer,
    procedural_texture_corpus,
    sample_content_pairs,
    sample_style_batch,
    synthesize_image_matrix,
)
from rgan.losses import AdversarialWeights
from rgan.models_a1 import GeneratorA1Config, PatchDiscriminatorConfig, StyleDiscriminatorConfig
from rgan.models_a2 import A2Config
from rgan.training import (
    DataHandles,
    StepMetrics,
    TrainConfig,
    TrainingDivergence,
    TripletCursor,
    _check_finite,
    _read_blob,
    _stack_triplets,
    _write_blob,
    a1_generator_objective,
    build_train_state,
    config_from_dict,
    config_hash,
    config_to_dict,
    derive_seed,
    load_checkpoint,
    save_checkpoint,
    train_loop,
    train_step_a1,
    train_step_a2_discriminator,
    train_step_a2_generator,
)

A1_CFG = TrainConfig(
    approach="a1",
    batch_size=2,
    steps=4,
    checkpoint_every=2,
    history_size=8,
    a1_generator=GeneratorA1Config(
        image_size=(32, 32), base_channels=8, depth=3, bottleneck_dim=16
    ),
    a1_patch=PatchDiscriminatorConfig(base_channels=8),
    a1_style=StyleDiscriminatorConfig(levels=2, base_channels=4, embedding_dim=8),
)

A2_CFG = TrainConfig(
    approach="a2",
    batch_size=3,
    steps=4,
    checkpoint_every=2,
    history_size=8,
    a2=A2Config(
        image_size=(32, 32),
        content_base_channels=8,
        content_depth=3,
        style_init_channels=8,
        style_growth_rate=6,
        style_layers_per_block=2,
        style_blocks=2,
        style_latent_dim=16,
    ),
)


def a1_handles():
    contents = procedural_content_images(2, (32, 32), seed=11)
    styles = procedural_content_images(2, (32, 32), seed=12)
    matrix = synthesize_image_matrix(contents, styles, procedural_stylizer)
    return DataHandles(matrix=matrix)


def a2_handles():
    contents = procedural_content_images(5, (32, 32), seed=21)
    corpus = procedural_texture_corpus(["stripes", "checker", "dots"], 3, (32, 32), seed=22)
    return DataHandles(contents=contents, style_corpus=corpus)


def a1_batch(handles, count=2):
    m = handles.matrix
    batch = []
    for k in range(count):
        i, j = divmod(k, m.m)
        from rgan.data import TripletSample

        batch.append(TripletSample(m.contents[i], m.styles[j], m.cells[i][j], i, j))
    return batch


def a2_batches(handles, cfg, step):
    rng = np.random.default_rng(derive_seed(cfg.seed, step, "data"))
    pairs = sample_content_pairs(handles.contents, cfg.batch_size, rng)
    styles = sample_style_batch(handles.style_corpus, cfg.batch_size, cfg.batch_size, rng)
    picks = rng.integers(0, len(handles.contents), size=cfg.batch_size)
    content_batch = torch.stack([handles.contents[int(i)] for i in picks])
    return pairs, styles, content_batch


def snapshot(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def same_tensors(a, b):
    return set(a) == set(b) and all(torch.equal(a[k], b[k]) for k in a)


def test_config_validation_collects_all_problems():
    with pytest.raises(ValueError) as err:
        TrainConfig(approach="a3", batch_size=0, steps=-1)
    msg = str(err.value)
    assert "approach" in msg and "batch_size" in msg and "steps" in msg


def test_config_dict_round_trip_and_hash():
    payload = json.loads(json.dumps(config_to_dict(A1_CFG)))
    rebuilt = config_from_dict(payload)
    assert rebuilt == A1_CFG
    assert config_hash(rebuilt) == config_hash(A1_CFG)
    other = replace(A1_CFG, weights=AdversarialWeights(alpha=0.25))
    assert config_hash(other) != config_hash(A1_CFG)


def test_derive_seed_varies_with_each_component():
    base = derive_seed(1, 2, "d")
    assert base != derive_seed(2, 2, "d")
    assert base != derive_seed(1, 3, "d")
    assert base != derive_seed(1, 2, "g")
    assert base == derive_seed(1, 2, "d")
    assert 0 <= base < 2**63


def test_triplet_cursor_wraps_and_resumes():
    a = TripletCursor(n_cells=4, seed=5)
    first = a.take(3)
    assert a.epoch == 0 and a.position == 3
    b = TripletCursor(n_cells=4, seed=5, epoch=a.epoch, position=a.position)
    assert a.take(5) == b.take(5)
    # 3 + 5 draws over 4 cells: one full epoch consumed, second in progress
    assert a.epoch == 1 and a.position == 4
    assert b.epoch == 1 and b.position == 4
    full = TripletCursor(n_cells=4, seed=5).take(4)
    assert sorted(full) == [0, 1, 2, 3]


def test_a1_step_metrics_and_single_forward_audit():
    handles = a1_handles()
    state = build_train_state(A1_CFG)
    state.step = 1
    metrics = train_step_a1(state, a1_batch(handles))
    for name, value in metrics.loss_fields().items():
        assert np.isfinite(value), name
    assert metrics.time_ms > 0
    assert state.audit.d_steps == 1
    assert state.audit.g_steps == 1
    assert state.audit.patch_disc_forwards_in_d_steps == 1
    assert state.audit.style_disc_forwards_in_d_steps == 1


def test_a1_step_updates_every_model():
    handles = a1_handles()
    state = build_train_state(A1_CFG)
    before = {name: snapshot(model) for name, model in state.models.items()}
    state.step = 1
    train_step_a1(state, a1_batch(handles))
    for name, model in state.models.items():
        assert not same_tensors(before[name], snapshot(model)), name


def test_a1_step_deterministic_given_state_and_batch():
    handles = a1_handles()
    batch = a1_batch(handles)
    results = []
    for _ in range(2):
        state = build_train_state(A1_CFG)
        state.step = 1
        results.append(train_step_a1(state, batch).loss_fields())
    assert results[0] == results[1]


def test_a1_alpha_zero_matches_style_ablation_exactly():
    cfg = replace(A1_CFG, weights=AdversarialWeights(alpha=0.0))
    handles = a1_handles()
    batch = a1_batch(handles)
    content, style, target = _stack_triplets(batch)
    finals = []
    for include_style in (True, False):
        state = build_train_state(cfg)
        state.step = 1
        style_before = snapshot(state.models["style_disc"])
        torch.manual_seed(derive_seed(cfg.seed, 1, "a1-g"))
        state.models["generator"].train()
        fake = state.models["generator"](torch.cat([content, style], dim=1))
        total, g_style, _, _ = a1_generator_objective(
            state, fake, content, style, target, include_style=include_style
        )
        assert g_style == 0.0
        state.optimizers["generator"].zero_grad()
        total.backward()
        state.optimizers["generator"].step()
        assert same_tensors(style_before, snapshot(state.models["style_disc"]))
        finals.append(snapshot(state.models["generator"]))
    assert same_tensors(finals[0], finals[1])


def test_a1_alpha_one_matches_content_ablation_exactly():
    cfg = replace(A1_CFG, weights=AdversarialWeights(alpha=1.0))
    handles = a1_handles()
    content, style, target = _stack_triplets(a1_batch(handles))
    finals = []
    for include_content in (True, False):
        state = build_train_state(cfg)
        state.step = 1
        patch_before = snapshot(state.models["patch_disc"])
        torch.manual_seed(derive_seed(cfg.seed, 1, "a1-g"))
        state.models["generator"].train()
        fake = state.models["generator"](torch.cat([content, style], dim=1))
        total, _, g_content, _ = a1_generator_objective(
            state, fake, content, style, target, include_content=include_content
        )
        assert g_content == 0.0
        state.optimizers["generator"].zero_grad()
        total.backward()
        state.optimizers["generator"].step()
        assert same_tensors(patch_before, snapshot(state.models["patch_disc"]))
        finals.append(snapshot(state.models["generator"]))
    assert same_tensors(finals[0], finals[1])


def test_a1_ablation_flag_changes_updates_at_mid_alpha():
    handles = a1_handles()
    content, style, target = _stack_triplets(a1_batch(handles))
    finals = []
    for include_style in (True, False):
        state = build_train_state(A1_CFG)
        state.step = 1
        torch.manual_seed(derive_seed(A1_CFG.seed, 1, "a1-g"))
        state.models["generator"].train()
        fake = state.models["generator"](torch.cat([content, style], dim=1))
        total, _, _, _ = a1_generator_objective(
            state, fake, content, style, target, include_style=include_style
        )
        state.optimizers["generator"].zero_grad()
        total.backward()
        state.optimizers["generator"].step()
        finals.append(snapshot(state.models["generator"]))
    assert not same_tensors(finals[0], finals[1])


def test_a2_d_step_never_touches_decoder():
    handles = a2_handles()
    state = build_train_state(A2_CFG)
    dec_before = snapshot(state.models["decoder"])
    enc_before = snapshot(state.models["content_encoder"])
    for step in (1, 2, 3):
        state.step = step
        pairs, styles, _ = a2_batches(handles, A2_CFG, step)
        metrics = train_step_a2_discriminator(state, pairs, styles)
        assert np.isfinite(metrics.d_content) and np.isfinite(metrics.d_style)
    assert state.models["decoder"].forward_calls == 0
    assert state.audit.decoder_forwards_in_d_steps == 0
    assert same_tensors(dec_before, snapshot(state.models["decoder"]))
    assert not same_tensors(enc_before, snapshot(state.models["content_encoder"]))


def test_a2_g_step_encoder_freeze_flag():
    handles = a2_handles()
    cfg = replace(A2_CFG, encoder_update_in_gen_step=False)
    state = build_train_state(cfg)
    state.step = 1
    _, styles, content_batch = a2_batches(handles, cfg, 1)
    ce_before = snapshot(state.models["content_encoder"])
    se_before = snapshot(state.models["style_encoder"])
    dec_before = snapshot(state.models["decoder"])
    metrics = train_step_a2_generator(state, content_batch, styles)
    assert np.isfinite(metrics.g_total)
    assert same_tensors(ce_before, snapshot(state.models["content_encoder"]))
    assert same_tensors(se_before, snapshot(state.models["style_encoder"]))
    assert not same_tensors(dec_before, snapshot(state.models["decoder"]))


def test_a2_g_step_updates_encoders_by_default():
    handles = a2_handles()
    state = build_train_state(A2_CFG)
    state.step = 1
    _, styles, content_batch = a2_batches(handles, A2_CFG, 1)
    ce_before = snapshot(state.models["content_encoder"])
    train_step_a2_generator(state, content_batch, styles)
    assert not same_tensors(ce_before, snapshot(state.models["content_encoder"]))


def test_a2_shared_parameter_identity_audit():
    handles = a2_handles()
    state = build_train_state(A2_CFG)
    state.step = 1
    pairs, styles, content_batch = a2_batches(handles, A2_CFG, 1)
    train_step_a2_discriminator(state, pairs, styles)
    train_step_a2_generator(state, content_batch, styles)
    audit = state.audit
    assert audit.encoder_params_updated_in_d_steps
    assert audit.encoder_params_updated_in_d_steps == audit.encoder_params_read_in_g_steps
    assert audit.encoder_params_updated_in_d_steps == audit.encoder_params_updated_in_g_steps


def test_step_rejects_wrong_approach_state():
    state = build_train_state(A2_CFG)
    with pytest.raises(ValueError, match="expected 'a1'"):
        train_step_a1(state, [])
    state_a1 = build_train_state(A1_CFG)
    with pytest.raises(ValueError, match="expected 'a2'"):
        train_step_a2_generator(state_a1, torch.zeros(1, 32, 32, 3), None)


def test_check_finite_raises_with_step_number():
    with pytest.raises(TrainingDivergence, match="step 7"):
        _check_finite({"d_content": float("nan")}, 7)


def test_divergent_state_aborts_the_step():
    handles = a2_handles()
    state = build_train_state(A2_CFG)
    with torch.no_grad():
        for p in state.models["content_encoder"].parameters():
            p.mul_(float("nan"))
    state.step = 1
    pairs, styles, _ = a2_batches(handles, A2_CFG, 1)
    with pytest.raises(TrainingDivergence):
        train_step_a2_discriminator(state, pairs, styles)


def test_train_loop_a1_writes_metrics_and_checkpoints(tmp_path):
    handles = a1_handles()
    state, metrics = train_loop(A1_CFG, handles, out_dir=tmp_path)
    assert state.step == 4
    assert len(metrics) == 4
    assert (tmp_path / "checkpoint_step_000002").is_dir()
    assert (tmp_path / "checkpoint_step_000004").is_dir()
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4
    row = json.loads(lines[0])
    assert set(row) == {
        "step", "g_total", "g_adv_style", "g_adv_content", "g_l1",
        "d_content", "d_style", "time_ms",
    }
    assert [json.loads(l)["step"] for l in lines] == [1, 2, 3, 4]


def test_train_loop_a2_deterministic_across_fresh_runs(tmp_path):
    handles = a2_handles()
    cfg = replace(A2_CFG, steps=3)
    _, m1 = train_loop(cfg, handles, out_dir=tmp_path / "one")
    _, m2 = train_loop(cfg, handles, out_dir=tmp_path / "two")
    assert [m.loss_fields() for m in m1] == [m.loss_fields() for m in m2]


def test_train_loop_requires_matching_handles():
    with pytest.raises(ValueError, match="image matrix"):
        train_loop(A1_CFG, DataHandles())
    with pytest.raises(ValueError, match="style corpus"):
        train_loop(A2_CFG, DataHandles(contents=[torch.zeros(32, 32, 3)]))


def test_checkpoint_round_trip_bitwise(tmp_path):
    handles = a2_handles()
    state = build_train_state(A2_CFG)
    state.step = 1
    pairs, styles, content_batch = a2_batches(handles, A2_CFG, 1)
    train_step_a2_discriminator(state, pairs, styles)
    train_step_a2_generator(state, content_batch, styles)
    state.history.append(StepMetrics(step=1, g_total=1.5))
    save_checkpoint(state, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    assert loaded.step == 1
    assert loaded.config == A2_CFG
    for name in state.models:
        assert same_tensors(
            snapshot(state.models[name]), snapshot(loaded.models[name])
        ), name
    for name, model in state.models.items():
        opt_a = state.optimizers[name]
        opt_b = loaded.optimizers[name]
        for (pname, pa), pb in zip(model.named_parameters(), loaded.models[name].parameters()):
            sa = opt_a.state[pa]
            sb = opt_b.state[pb]
            for slot in ("exp_avg", "exp_avg_sq", "step"):
                assert torch.equal(torch.as_tensor(sa[slot]), torch.as_tensor(sb[slot])), (
                    name, pname, slot,
                )
    assert [m.step for m in loaded.history] == [1]


def test_checkpoint_detects_truncated_blob(tmp_path):
    state = build_train_state(A2_CFG)
    save_checkpoint(state, tmp_path / "ckpt")
    blob = sorted((tmp_path / "ckpt" / "blobs").iterdir())[0]
    raw = blob.read_bytes()
    blob.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ValueError, match="checksum mismatch"):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_detects_missing_blob(tmp_path):
    state = build_train_state(A2_CFG)
    save_checkpoint(state, tmp_path / "ckpt")
    blob = sorted((tmp_path / "ckpt" / "blobs").iterdir())[0]
    blob.unlink()
    with pytest.raises(ValueError, match="missing blob"):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_rejects_unknown_version(tmp_path):
    state = build_train_state(A2_CFG)
    save_checkpoint(state, tmp_path / "ckpt")
    manifest_path = tmp_path / "ckpt" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["version"] = 99
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="version 99"):
        load_checkpoint(tmp_path / "ckpt")


def test_resume_refuses_mismatched_config(tmp_path):
    handles = a2_handles()
    cfg = replace(A2_CFG, steps=2, checkpoint_every=2)
    train_loop(cfg, handles, out_dir=tmp_path)
    other = replace(cfg, weights=AdversarialWeights(alpha=0.75))
    with pytest.raises(ValueError, match="refusing to resume"):
        train_loop(
            other, handles, out_dir=tmp_path / "b",
            resume_from=tmp_path / "checkpoint_step_000002",
        )


def test_resume_reproduces_uninterrupted_run(tmp_path):
    handles = a2_handles()
    full_state, full_metrics = train_loop(A2_CFG, handles, out_dir=tmp_path / "full")
    resumed_state, tail_metrics = train_loop(
        A2_CFG,
        handles,
        out_dir=tmp_path / "resumed",
        resume_from=tmp_path / "full" / "checkpoint_step_000002",
    )
    assert [m.step for m in tail_metrics] == [3, 4]
    assert [m.loss_fields() for m in tail_metrics] == [
        m.loss_fields() for m in full_metrics[2:]
    ]
    for name in full_state.models:
        assert same_tensors(
            snapshot(full_state.models[name]), snapshot(resumed_state.models[name])
        ), name


def test_resume_reproduces_uninterrupted_run_a1(tmp_path):
    handles = a1_handles()
    full_state, full_metrics = train_loop(A1_CFG, handles, out_dir=tmp_path / "full")
    resumed_state, tail_metrics = train_loop(
        A1_CFG,
        handles,
        out_dir=tmp_path / "resumed",
        resume_from=tmp_path / "full" / "checkpoint_step_000002",
    )
    assert [m.loss_fields() for m in tail_metrics] == [
        m.loss_fields() for m in full_metrics[2:]
    ]
    for name in full_state.models:
        assert same_tensors(
            snapshot(full_state.models[name]), snapshot(resumed_state.models[name])
        ), name


def test_blob_round_trip_and_truncation(tmp_path):
    cases = [
        torch.tensor(3.5),
        torch.arange(6, dtype=torch.float32),
        torch.randn(2, 3, 4),
    ]
    for i, t in enumerate(cases):
        path = tmp_path / f"blob_{i}.bin"
        _write_blob(path, t)
        back = _read_blob(path)
        assert back.shape == t.shape
        assert torch.equal(back, t.to(torch.float32))
    path = tmp_path / "trunc.bin"
    _write_blob(path, torch.ones(8))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError, match="expected"):
        _read_blob(path)


def test_history_ring_buffer_is_bounded():
    handles = a2_handles()
    cfg = replace(A2_CFG, steps=5, history_size=3)
    state, _ = train_loop(cfg, handles)
    assert [m.step for m in state.history] == [3, 4, 5]
