"""Shape, determinism, and gradient tests for the model core."""

import numpy as np
import pytest
import torch

from etsam.model import (
    GRANULARITIES,
    EtsamModel,
    ModelConfig,
    default_config,
    granularity_index,
    load_checkpoint,
    save_checkpoint,
    toy_config,
)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        input_size=64,
        embed_dim=32,
        encoder_depth=1,
        encoder_heads=4,
        encoder_mlp_ratio=2.0,
        adapter_dim=8,
        decoder_heads=4,
        decoder_mlp_dim=64,
        chunk_size=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_model(config=None, seed=0) -> EtsamModel:
    torch.manual_seed(seed)
    return EtsamModel(config or tiny_config())


def rand_image(size, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(size, size, 3)).astype(np.float32)


class TestConfig:
    def test_derived_grids(self):
        cfg = default_config()
        assert cfg.embed_grid == 64
        assert cfg.heatmap_grid == 256
        assert cfg.highres_grid == 384
        assert cfg.lowres_channels == 32
        assert cfg.highres_channels == 16

    def test_toy_grids(self):
        cfg = toy_config()
        assert cfg.input_size == 256
        assert cfg.embed_grid == 16
        assert cfg.heatmap_grid == 64
        assert cfg.highres_grid == 96

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(input_size=100)
        with pytest.raises(ValueError):
            ModelConfig(embed_dim=100)

    def test_granularity_lookup(self):
        assert [granularity_index(g) for g in GRANULARITIES] == [0, 1, 2, 3]
        with pytest.raises(KeyError):
            granularity_index("letter")


class TestEncodeImage:
    def test_shape_and_range_check(self):
        model = make_model()
        emb = model.encode_image(rand_image(64))
        assert tuple(emb.features.shape) == (4, 4, 32)
        with pytest.raises(ValueError, match="expected"):
            model.encode_image(rand_image(128))

    def test_deterministic(self):
        model = make_model()
        img = rand_image(64, seed=3)
        with torch.no_grad():
            a = model.encode_image(img).features
            b = model.encode_image(img).features
        assert torch.equal(a, b)

    def test_shape_sweep(self):
        for size in (64, 128):
            model = make_model(tiny_config(input_size=size))
            emb = model.encode_image(rand_image(size))
            assert tuple(emb.features.shape) == (size // 16, size // 16, 32)


class TestPointDecode:
    def test_heatmap_shape_and_range(self):
        model = make_model()
        emb = model.encode_image(rand_image(64))
        with torch.no_grad():
            out = model.point_decode(emb, task_id=0)
        assert tuple(out.heatmap.shape) == (16, 16)
        assert out.heatmap.min() >= 0.0 and out.heatmap.max() <= 1.0
        assert tuple(out.features.shape) == (16, 16, 4)
        assert tuple(out.token.shape) == (1, 32)

    def test_task_id_changes_output(self):
        model = make_model(seed=5)
        emb = model.encode_image(rand_image(64))
        with torch.no_grad():
            h0 = model.point_decode(emb, 0).heatmap
            h1 = model.point_decode(emb, 1).heatmap
        assert (h0 - h1).abs().max() > 0

    def test_equal_task_rows_give_identical_output(self):
        model = make_model()
        with torch.no_grad():
            model.point_decoder.task_tokens.copy_(model.point_decoder.task_tokens[0].expand_as(model.point_decoder.task_tokens))
        emb = model.encode_image(rand_image(64))
        with torch.no_grad():
            h0 = model.point_decode(emb, 0).heatmap
            h2 = model.point_decode(emb, 2).heatmap
        assert torch.equal(h0, h2)

    def test_bad_task_id(self):
        model = make_model()
        emb = model.encode_image(rand_image(64))
        with pytest.raises(ValueError, match="task_id"):
            model.point_decode(emb, 3)


class TestEncodePoints:
    def test_shapes_and_empty(self):
        model = make_model()
        coords = np.array([[[10.0, 20.0], [0.0, 0.0]]])
        validity = np.array([[True, False]])
        tokens = model.encode_points(coords, validity)
        assert tuple(tokens.shape) == (1, 2, 32)
        empty = model.encode_points(np.zeros((0, 2, 2)), np.zeros((0, 2), dtype=bool))
        assert tuple(empty.shape) == (0, 2, 32)

    def test_out_of_range_raises(self):
        model = make_model()
        bad = np.array([[[64.0, 2.0], [0.0, 0.0]]])
        with pytest.raises(ValueError, match="coordinates"):
            model.encode_points(bad, np.array([[True, False]]))

    def test_padding_slot_ignores_coords(self):
        model = make_model()
        v = np.array([[True, False]])
        a = model.encode_points(np.array([[[5.0, 5.0], [1.0, 1.0]]]), v)
        b = model.encode_points(np.array([[[5.0, 5.0], [60.0, 33.0]]]), v)
        assert torch.equal(a[0, 1], b[0, 1])
        assert torch.equal(a[0, 0], b[0, 0])

    def test_nearby_points_encode_closer(self):
        model = make_model(toy_config())
        v = np.array([[True, False]])
        base = model.encode_points(np.array([[[100.0, 100.0], [0.0, 0.0]]]), v)[0, 0]
        near = model.encode_points(np.array([[[101.0, 100.0], [0.0, 0.0]]]), v)[0, 0]
        far = model.encode_points(np.array([[[228.0, 100.0], [0.0, 0.0]]]), v)[0, 0]
        assert torch.norm(base - near) < torch.norm(base - far)


class TestHMDecode:
    def decode(self, model, k, seed=0, task=0):
        rng = np.random.default_rng(seed)
        size = model.config.input_size
        emb = model.encode_image(rand_image(size, seed))
        coords = rng.uniform(0, size - 1, size=(k, model.config.num_point_slots, 2))
        validity = np.zeros((k, model.config.num_point_slots), dtype=bool)
        validity[:, 0] = True
        tokens = model.encode_points(coords, validity)
        with torch.no_grad():
            return model.hm_decode(emb, tokens, task)

    def test_shape_contract(self):
        for size, k in [(64, 1), (64, 5), (128, 3)]:
            model = make_model(tiny_config(input_size=size))
            bundle = self.decode(model, k)
            q, r = size // 4, (3 * size) // 8
            assert tuple(bundle.word_wg_logits.shape) == (k, r, r, 2)
            assert tuple(bundle.line_para_logits.shape) == (k, q, q, 2)
            assert tuple(bundle.iou_pred.shape) == (k, 4)
            assert tuple(bundle.lowres_features.shape) == (k, q, q, 4)
            assert tuple(bundle.highres_features.shape) == (k, r, r, 2)
            assert tuple(bundle.tokens.shape) == (k, 4, 32)

    def test_iou_in_unit_interval(self):
        bundle = self.decode(make_model(), 6)
        assert bundle.iou_pred.min() >= 0.0 and bundle.iou_pred.max() <= 1.0

    def test_per_point_independence(self):
        model = make_model(seed=2)
        size = model.config.input_size
        emb = model.encode_image(rand_image(size, 1))
        rng = np.random.default_rng(4)
        coords = rng.uniform(0, size - 1, size=(3, 2, 2))
        validity = np.array([[True, False]] * 3)
        with torch.no_grad():
            full = model.hm_decode(emb, model.encode_points(coords, validity), 0)
            solo = model.hm_decode(emb, model.encode_points(coords[1:2], validity[1:2]), 0)
        assert torch.allclose(full.word_wg_logits[1], solo.word_wg_logits[0], atol=1e-5)
        assert torch.allclose(full.line_para_logits[1], solo.line_para_logits[0], atol=1e-5)
        assert torch.allclose(full.iou_pred[1], solo.iou_pred[0], atol=1e-5)

    def test_chunking_matches_single_pass(self):
        model = make_model(seed=3)
        bundle_chunked = self.decode(model, 7)  # chunk_size 8 -> single chunk
        model.config.chunk_size = 2
        bundle_small = self.decode(model, 7)
        assert torch.allclose(bundle_chunked.word_wg_logits, bundle_small.word_wg_logits, atol=1e-6)
        assert torch.allclose(bundle_chunked.iou_pred, bundle_small.iou_pred, atol=1e-6)

    def test_equal_task_rows_invariant(self):
        model = make_model()
        with torch.no_grad():
            model.hm_decoder.task_tokens.copy_(model.hm_decoder.task_tokens[0].expand_as(model.hm_decoder.task_tokens))
        a = self.decode(model, 2, task=0)
        b = self.decode(model, 2, task=2)
        assert torch.equal(a.word_wg_logits, b.word_wg_logits)

    def test_empty_points(self):
        model = make_model()
        emb = model.encode_image(rand_image(64))
        tokens = model.encode_points(np.zeros((0, 2, 2)), np.zeros((0, 2), dtype=bool))
        bundle = model.hm_decode(emb, tokens, 0)
        assert len(bundle) == 0
        assert tuple(bundle.word_wg_logits.shape) == (0, 24, 24, 2)


class TestParameterPartition:
    def test_freeze_backbone_gradient_flow(self):
        model = make_model()
        assert model.config.freeze_backbone
        img = rand_image(64)
        emb = model.encode_image(img)
        out = model.point_decode(emb, 0)
        tokens = model.encode_points(
            np.array([[[8.0, 8.0], [0.0, 0.0]]]), np.array([[True, False]])
        )
        bundle = model.hm_decode(emb, tokens, 0)
        loss = out.heatmap.sum() + bundle.word_wg_logits.sum() + bundle.iou_pred.sum()
        loss.backward()

        assert model.image_encoder.patch_embed.weight.grad is None
        assert model.image_encoder.pos_embed.grad is None
        for block in model.image_encoder.blocks:
            assert block.attn.q_proj.weight.grad is None
            assert block.adapter.down.weight.grad is not None
        assert model.point_decoder.task_tokens.grad is not None
        assert model.hm_decoder.task_tokens.grad is not None
        assert model.hm_decoder.highres_conv.weight.grad is not None
        # Frozen prompt encoder holds no trainable parameters at all.
        assert not any(p.requires_grad for p in model.prompt_encoder.parameters())

    def test_unfrozen_when_disabled(self):
        model = make_model(tiny_config(freeze_backbone=False))
        assert model.image_encoder.patch_embed.weight.requires_grad


def central_difference_grad(fn, param: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


class TestTokenGradients:
    def rel_err(self, a, b):
        denom = max(a.norm().item(), b.norm().item(), 1e-12)
        return (a - b).norm().item() / denom

    def test_point_task_token_gradcheck(self):
        model = make_model(seed=7).double()
        img = rand_image(64, 2).astype(np.float64)
        emb_fn = lambda: model.encode_image(img)

        def loss_fn():
            with torch.no_grad():
                return model.point_decode(emb_fn(), 1).heatmap.sum().item()

        emb = emb_fn()
        out = model.point_decode(emb, 1)
        loss = out.heatmap.sum()
        model.zero_grad()
        loss.backward()
        analytic = model.point_decoder.task_tokens.grad[1].clone()
        fd = central_difference_grad(loss_fn, model.point_decoder.task_tokens.data[1])
        assert self.rel_err(analytic, fd) < 1e-4

    def test_hm_task_token_gradcheck(self):
        model = make_model(seed=8).double()
        img = rand_image(64, 5).astype(np.float64)
        coords = np.array([[[12.0, 40.0], [0.0, 0.0]]])
        validity = np.array([[True, False]])

        def forward():
            emb = model.encode_image(img)
            tokens = model.encode_points(coords, validity)
            bundle = model.hm_decode(emb, tokens, 0)
            return (
                bundle.word_wg_logits.sum()
                + bundle.line_para_logits.sum()
                + 3.0 * bundle.iou_pred.sum()
            )

        def loss_fn():
            with torch.no_grad():
                return forward().item()

        model.zero_grad()
        forward().backward()
        analytic = model.hm_decoder.task_tokens.grad[0].clone()
        fd = central_difference_grad(loss_fn, model.hm_decoder.task_tokens.data[0])
        assert self.rel_err(analytic, fd) < 1e-4


class TestCheckpoint:
    def test_round_trip_identical_outputs(self, tmp_path):
        model = make_model(seed=9)
        path = tmp_path / "model.pt"
        save_checkpoint(model, path, step=17)
        loaded, payload = load_checkpoint(path)
        assert payload["step"] == 17
        img = rand_image(64, 6)
        with torch.no_grad():
            a = model.point_decode(model.encode_image(img), 0).heatmap
            b = loaded.point_decode(loaded.encode_image(img), 0).heatmap
        assert torch.equal(a, b)

    def test_shape_mismatch_fails_loudly(self, tmp_path):
        model = make_model()
        path = tmp_path / "model.pt"
        save_checkpoint(model, path)
        payload = torch.load(path, weights_only=False)
        payload["config"]["embed_dim"] = 64
        torch.save(payload, path)
        with pytest.raises(RuntimeError):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tmp_path):
        model = make_model()
        path = tmp_path / "model.pt"
        save_checkpoint(model, path)
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)
