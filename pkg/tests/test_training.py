import copy
import json

import numpy as np
import pytest
import torch

from pixlab.encoders import MaskedImage, TextEncoderConfig, VisionEncoderConfig
from pixlab.losses import LOG_SCALE_MAX, ContrastiveConfig, LossWeights, composite_loss, contrastive_loss
from pixlab.regionops import PoolingConfig, pool_region_features
from pixlab.training import (
    TrainingConfig,
    TrainingSample,
    assemble_batch,
    build_model,
    forward_three_branch,
    infer_embedding,
    train,
)


def tiny_dataset(n=8, resolution=16, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        px = torch.tensor(rng.standard_normal((3, resolution, resolution)), dtype=torch.float32)
        mask = torch.zeros(resolution, resolution)
        r, c = rng.integers(0, resolution - 4, size=2)
        mask[r : r + 4, c : c + 4] = 1
        samples.append(
            TrainingSample.build(
                px, mask,
                long_caption=f"object number {i} with several attribute words",
                short_caption=f"object {i}",
                global_caption=f"scene number {i}",
                enlarge=1.5, crop_size=resolution,
            )
        )
    return samples


def desk16(**overrides):
    values = dict(batch_size=4, epochs=4, warmup_steps=2, seed=0,
                  learning_rate_mask_embed=1e-3, learning_rate_other=1e-3)
    values.update(overrides)
    return TrainingConfig(**values)


def model16(cfg):
    return build_model(
        cfg,
        vision_config=VisionEncoderConfig(patch_size=4, input_resolution=16, depth=2,
                                          embed_dim=32, heads=4, proj_dim=16),
        text_config=TextEncoderConfig(width=32, proj_dim=16, projector_layers=2),
    )


class TestTrainingSample:
    def test_crop_fields_match_derive_crop(self):
        from pixlab.regionops import derive_crop

        s = tiny_dataset(1)[0]
        crop_px, crop_mask = derive_crop(s.pixels, s.mask, 1.5, out_size=16)
        assert torch.equal(s.crop_pixels, crop_px)
        assert torch.equal(s.crop_mask, crop_mask)

    def test_missing_captions_rejected(self):
        with pytest.raises(ValueError, match="caption"):
            TrainingSample.build(torch.zeros(3, 8, 8), torch.ones(8, 8), "", "s", "g")
        with pytest.raises(ValueError, match="caption"):
            TrainingSample.build(torch.zeros(3, 8, 8), torch.ones(8, 8), "long", "s", " ")


class TestTrainingConfig:
    def test_paper_defaults(self):
        cfg = TrainingConfig()
        assert cfg.alpha == 0.25 and cfg.beta == 0.25
        assert cfg.full_image_ratio == 0.1
        assert cfg.warmup_steps == 800 and cfg.epochs == 8
        assert cfg.learning_rate_mask_embed == 1e-5
        assert cfg.learning_rate_other == 1e-7
        assert cfg.weight_decay == 1e-2
        assert cfg.log_scale_init == pytest.approx(4.0652)

    def test_probability_bounds(self):
        with pytest.raises(ValueError):
            TrainingConfig(full_image_ratio=1.5)
        with pytest.raises(ValueError):
            TrainingConfig(short_text_probability=-0.1)

    def test_zero_rates_allowed(self):
        TrainingConfig(learning_rate_mask_embed=0.0, learning_rate_other=0.0)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainingConfig.from_dict({"alpha": 0.5, "bogus": 1})


class TestAssembleBatch:
    def test_zero_ratio_never_swaps(self):
        ds = tiny_dataset(8)
        cfg = desk16(batch_size=8, full_image_ratio=0.0)
        batch = assemble_batch(ds, np.random.default_rng(0), cfg)
        for item, sample in zip(batch, ds):
            assert torch.equal(item.image.mask, sample.mask)
            assert item.caption != sample.global_caption

    def test_ratio_one_always_swaps(self):
        ds = tiny_dataset(8)
        cfg = desk16(batch_size=8, full_image_ratio=1.0)
        batch = assemble_batch(ds, np.random.default_rng(0), cfg)
        for item, sample in zip(batch, ds):
            assert float(item.image.mask.min()) == 1.0
            assert item.caption == sample.global_caption
            assert torch.equal(item.crop.pixels, sample.pixels)

    def test_swap_count_in_binomial_band(self):
        ds = tiny_dataset(100)
        cfg = desk16(batch_size=100, full_image_ratio=0.1, short_text_probability=0.5)
        rng = np.random.default_rng(123)
        swaps = 0
        for _ in range(100):  # 10,000 draws total
            batch = assemble_batch(ds, rng, cfg)
            swaps += sum(1 for item in batch if item.caption.startswith("scene"))
        assert 910 <= swaps <= 1090  # 3 sigma around 1000

    def test_short_caption_choice(self):
        ds = tiny_dataset(8)
        cfg = desk16(batch_size=8, full_image_ratio=0.0, short_text_probability=1.0)
        batch = assemble_batch(ds, np.random.default_rng(0), cfg)
        assert all(item.caption == s.short_caption for item, s in zip(batch, ds))
        cfg = desk16(batch_size=8, full_image_ratio=0.0, short_text_probability=0.0)
        batch = assemble_batch(ds, np.random.default_rng(0), cfg)
        assert all(item.caption == s.long_caption for item, s in zip(batch, ds))

    def test_wrong_count_rejected(self):
        ds = tiny_dataset(4)
        with pytest.raises(ValueError, match="expected"):
            assemble_batch(ds, np.random.default_rng(0), desk16(batch_size=8))


class TestForwardThreeBranch:
    def test_weight_degeneracy(self):
        ds = tiny_dataset(4)
        cfg = desk16(alpha=0.0, beta=0.0, full_image_ratio=0.0)
        model = model16(cfg)
        batch = assemble_batch(ds[:4], np.random.default_rng(0), cfg)
        l_cl, _, _, l_total = forward_three_branch(batch, model, cfg)
        assert float(l_total) == pytest.approx(float(l_cl))

    def test_compositional_oracle(self):
        """The fused forward must equal a step-by-step recomputation that
        invokes the individual operations separately."""
        ds = tiny_dataset(4)
        cfg = desk16(full_image_ratio=0.0)
        model = model16(cfg)
        batch = assemble_batch(ds[:4], np.random.default_rng(3), cfg)
        l_cl, l_fc, l_lg, l_total = forward_three_branch(batch, model, cfg)

        cc = ContrastiveConfig(log_scale=model.log_scale)
        with torch.no_grad():
            e_v = torch.stack([model.encode_vision(it.image)[0] for it in batch])
            e_t = model.encode_texts([it.caption for it in batch])
            v_c = torch.stack([model.encode_vision(it.crop)[0] for it in batch])
            t_c = model.encode_texts([it.crop_caption for it in batch])
            pooled = []
            for it in batch:
                ones = MaskedImage(it.image.pixels)  # default mask is all ones
                _, dense = model.encode_vision(ones)
                pooled.append(pool_region_features(
                    dense, it.image.mask, PoolingConfig(cfg.overlap_threshold), model.region_proj))
            exp_cl = contrastive_loss(e_v, e_t, cc)
            exp_fc = contrastive_loss(v_c, t_c, cc)
            exp_lg = contrastive_loss(torch.stack(pooled), e_v, cc)
            exp_total = composite_loss(exp_cl, exp_fc, exp_lg, LossWeights(cfg.alpha, cfg.beta))
        assert float(l_cl) == pytest.approx(float(exp_cl), abs=1e-5)
        assert float(l_fc) == pytest.approx(float(exp_fc), abs=1e-5)
        assert float(l_lg) == pytest.approx(float(exp_lg), abs=1e-5)
        assert float(l_total) == pytest.approx(float(exp_total), abs=1e-5)

    def test_fc_variant_flags(self):
        ds = tiny_dataset(4)
        base = desk16(full_image_ratio=0.0)
        model = model16(base)
        batch = assemble_batch(ds[:4], np.random.default_rng(0), base)
        _, fc_default, _, _ = forward_three_branch(batch, model, base)
        cfg2 = desk16(full_image_ratio=0.0, fc_align_to_global=True)
        _, fc_global, _, _ = forward_three_branch(batch, model, cfg2)
        assert float(fc_default) != pytest.approx(float(fc_global))
        cfg3 = desk16(full_image_ratio=0.0, fc_positive_only=True)
        _, fc_pos, _, _ = forward_three_branch(batch, model, cfg3)
        assert float(fc_pos) != pytest.approx(float(fc_default))


class TestTrain:
    def test_zero_steps_keeps_parameters(self):
        ds = tiny_dataset(8)
        cfg = desk16(epochs=0)
        model = model16(cfg)
        before = copy.deepcopy(model.state_dict())
        result = train(ds, cfg, model=model)
        assert result.metrics == []
        for key, value in model.state_dict().items():
            assert torch.equal(value, before[key]), key

    def test_zero_learning_rates_keep_parameters(self):
        ds = tiny_dataset(8)
        cfg = desk16(epochs=1, learning_rate_mask_embed=0.0, learning_rate_other=0.0,
                     weight_decay=0.0, log_scale_init=1.0)
        model = model16(cfg)
        before = copy.deepcopy(model.state_dict())
        result = train(ds, cfg, model=model, max_steps=1)
        assert len(result.metrics) == 1
        for key, value in model.state_dict().items():
            assert torch.allclose(value, before[key], atol=0), key

    def test_differential_learning_rates(self):
        ds = tiny_dataset(8)
        cfg = desk16(epochs=1, learning_rate_other=0.0, learning_rate_mask_embed=1e-3,
                     weight_decay=0.0)
        model = model16(cfg)
        before = copy.deepcopy(model.state_dict())
        train(ds, cfg, model=model, max_steps=1)
        mask_keys = {"visual.conv_mask.weight", "visual.conv_mask.bias"}
        for key, value in model.state_dict().items():
            changed = not torch.equal(value, before[key])
            assert changed == (key in mask_keys), key

        cfg = desk16(epochs=1, learning_rate_other=1e-3, learning_rate_mask_embed=0.0,
                     weight_decay=0.0)
        model = model16(cfg)
        before = copy.deepcopy(model.state_dict())
        train(ds, cfg, model=model, max_steps=1)
        for key in mask_keys:
            assert torch.equal(model.state_dict()[key], before[key]), key
        assert any(
            not torch.equal(model.state_dict()[k], before[k])
            for k in model.state_dict()
            if k not in mask_keys and "tower" not in k
        )

    def test_frozen_tower_never_changes(self):
        ds = tiny_dataset(8)
        cfg = desk16(epochs=2)
        model = model16(cfg)
        fp = model.text.tower.fingerprint()
        train(ds, cfg, model=model)
        assert model.text.tower.fingerprint() == fp

    def test_warmup_schedule_in_metrics(self):
        ds = tiny_dataset(8)
        cfg = desk16(epochs=4, warmup_steps=4, learning_rate_mask_embed=8e-3,
                     learning_rate_other=4e-3)
        result = train(ds, cfg, model=model16(cfg), max_steps=6)
        for record in result.metrics:
            factor = min(1.0, record["step"] / cfg.warmup_steps)
            assert record["lr_mask"] == pytest.approx(cfg.learning_rate_mask_embed * factor)
            assert record["lr_other"] == pytest.approx(cfg.learning_rate_other * factor)

    def test_metrics_log_fields_and_finiteness(self, tmp_path):
        ds = tiny_dataset(8)
        cfg = desk16(epochs=1)
        path = tmp_path / "metrics.jsonl"
        result = train(ds, cfg, model=model16(cfg), metrics_path=path)
        lines = path.read_text().splitlines()
        assert len(lines) == len(result.metrics) == 2
        for line in lines:
            record = json.loads(line)
            assert set(record) == {"step", "l_cl", "l_fc", "l_lg", "l_total",
                                   "log_scale", "lr_mask", "lr_other"}
            assert all(np.isfinite(v) for v in record.values())

    def test_log_scale_clamped(self):
        ds = tiny_dataset(8)
        cfg = desk16(epochs=1, log_scale_init=4.60)
        model = model16(cfg)
        train(ds, cfg, model=model, max_steps=2)
        assert float(model.log_scale) <= LOG_SCALE_MAX + 1e-9

    def test_equal_seeds_give_identical_metrics(self, tmp_path):
        ds = tiny_dataset(8)
        logs = []
        for run in range(2):
            cfg = desk16(epochs=2, seed=42)
            path = tmp_path / f"metrics-{run}.jsonl"
            train(ds, cfg, metrics_path=path, model=model16(cfg))
            logs.append(path.read_bytes())
        assert logs[0] == logs[1]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            train([], desk16())


class TestInferEmbedding:
    def test_matches_branch_one(self):
        ds = tiny_dataset(4)
        cfg = desk16(full_image_ratio=0.0, short_text_probability=0.0)
        model = model16(cfg)
        batch = assemble_batch(ds[:4], np.random.default_rng(0), cfg)
        with torch.no_grad():
            px = torch.stack([it.image.pixels for it in batch])
            masks = torch.stack([it.image.mask for it in batch]).unsqueeze(1)
            e_v, _ = model.visual(px, masks)
        for i, item in enumerate(batch):
            got = infer_embedding(item.image.pixels, item.image.mask, model)
            assert torch.allclose(got, e_v[i], atol=1e-6)

    def test_fresh_init_mask_independent(self):
        cfg = desk16()
        model = model16(cfg)
        rng = np.random.default_rng(1)
        px = torch.tensor(rng.standard_normal((3, 16, 16)), dtype=torch.float32)
        base = infer_embedding(px, torch.zeros(16, 16), model)
        for _ in range(3):
            mask = torch.tensor((rng.random((16, 16)) > 0.5).astype(np.float32))
            assert float((infer_embedding(px, mask, model) - base).abs().max()) <= 1e-6

    def test_deterministic(self):
        cfg = desk16()
        model = model16(cfg)
        px = torch.randn(3, 16, 16)
        mask = torch.ones(16, 16)
        assert torch.equal(infer_embedding(px, mask, model), infer_embedding(px, mask, model))


class TestGradientCheckThreeBranch:
    def test_total_loss_gradients_match_finite_differences(self):
        """All-parameter FD check of the full objective on a <=1k-param model."""
        torch.manual_seed(11)
        model = build_model(
            TrainingConfig(seed=11, overlap_threshold=0.5),
            vision_config=VisionEncoderConfig.tiny(),
            text_config=TextEncoderConfig.tiny(),
        ).double()
        n_params = sum(p.numel() for p in model.parameters() if p.requires_grad)
        assert n_params <= 1000

        rng = np.random.default_rng(12)
        cfg = TrainingConfig(alpha=0.25, beta=0.25, batch_size=3, seed=11)
        samples = []
        for i in range(3):
            px = torch.tensor(rng.standard_normal((3, 4, 4)))
            mask = torch.zeros(4, 4, dtype=torch.float64)
            mask[i % 3 : i % 3 + 2, (i + 1) % 3 : (i + 1) % 3 + 2] = 1
            samples.append(TrainingSample.build(
                px, mask, f"word{i} other attrs", f"word{i}", f"scene{i}",
                enlarge=1.5, crop_size=4))
        batch = assemble_batch(samples, np.random.default_rng(5), cfg)

        def total():
            return forward_three_branch(batch, model, cfg)[3]

        loss = total()
        params = [p for p in model.parameters() if p.requires_grad]
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        h = 1e-5
        checked = 0
        for param, grad in zip(params, grads):
            if grad is None:
                continue
            flat, gflat = param.data.reshape(-1), grad.reshape(-1)
            for idx in range(flat.numel()):
                orig = float(flat[idx])
                flat[idx] = orig + h
                up = float(total().detach())
                flat[idx] = orig - h
                down = float(total().detach())
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = float(gflat[idx])
                # Absolute floor covers true-zero gradients, where central
                # differences only return rounding noise (~1e-10).
                if abs(an - fd) > 1e-8:
                    assert abs(an - fd) / max(abs(an), abs(fd)) <= 1e-4, (
                        f"param element {idx} analytic {an} vs fd {fd}")
                checked += 1
        assert checked >= 500
