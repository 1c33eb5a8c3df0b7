"""Scheduler, prompt-sampling, loss, augmentation, and loop tests."""

import json
import math

import numpy as np
import pytest
import torch

from etsam.annotations import (
    TASK_LINE_ONLY,
    TASK_MULTI,
    TASK_WORD_ONLY,
    HierSample,
    LineAnn,
    ParagraphAnn,
    Polygon,
    WordAnn,
)
from etsam.heatmaps import Heatmap, centerline_heatmap
from etsam.model import EtsamModel, ModelConfig, load_checkpoint
from etsam.training import (
    MAX_PROMPT_POINTS,
    AugmentParams,
    TrainConfig,
    _sample_losses,
    apply_augment,
    binary_mask_iou,
    build_pool,
    draw_augment_params,
    epoch_schedule,
    loss_mask,
    loss_point,
    resize_sample,
    sample_prompts,
    target_heatmap,
    total_loss,
    train,
)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        input_size=64,
        embed_dim=32,
        encoder_depth=1,
        encoder_heads=4,
        encoder_mlp_ratio=2.0,
        adapter_dim=8,
        decoder_depth=1,
        decoder_heads=4,
        decoder_mlp_dim=64,
        chunk_size=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


def box(x0, y0, x1, y1):
    return Polygon(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float))


def blank_sample(task, image_size=64, image_id="s"):
    rng = np.random.default_rng(0)
    image = rng.uniform(0, 1, size=(image_size, image_size, 3)).astype(np.float32)
    return HierSample(image_id=image_id, task_id=task, image=image)


def multi_sample(image_size=64, image_id="multi"):
    """Two lines in one paragraph: line 0 holds words 0-1, line 1 word 2."""
    s = blank_sample(TASK_MULTI, image_size, image_id)
    s.words = [
        WordAnn(0, box(8, 8, 24, 16)),
        WordAnn(1, box(32, 8, 48, 16)),
        WordAnn(2, box(8, 32, 40, 44)),
    ]
    s.lines = [
        LineAnn(0, box(8, 8, 48, 16), [0, 1]),
        LineAnn(1, box(8, 32, 40, 44), [2]),
    ]
    s.paragraphs = [ParagraphAnn(0, [0, 1])]
    return s


def word_sample(image_size=64, image_id="word"):
    s = blank_sample(TASK_WORD_ONLY, image_size, image_id)
    s.words = [WordAnn(0, box(8, 8, 24, 16)), WordAnn(1, box(32, 24, 56, 36))]
    return s


def line_sample(image_size=64, image_id="line"):
    s = blank_sample(TASK_LINE_ONLY, image_size, image_id)
    s.lines = [LineAnn(0, box(8, 8, 48, 16)), LineAnn(1, box(8, 32, 40, 44))]
    return s


def id_only(task, name):
    return HierSample(image_id=name, task_id=task)


# ---------------------------------------------------------------------------
# Pool and schedule


class TestPool:
    def test_epoch_length_and_repeat_counts(self):
        pool = build_pool(
            [id_only(0, f"m{i}") for i in range(4)],
            [id_only(1, f"w{i}") for i in range(2)],
            [id_only(2, "l0")],
            seed=3,
        )
        assert pool.epoch_length == 4
        batches = epoch_schedule(pool, 0)
        assert len(batches) == 4
        words = [b.samples[TASK_WORD_ONLY].image_id for b in batches]
        lines = [b.samples[TASK_LINE_ONLY].image_id for b in batches]
        assert lines == ["l0"] * 4
        assert sorted(words) == ["w0", "w0", "w1", "w1"]

    def test_equal_sizes_every_sample_once(self):
        n = 3
        pool = build_pool(
            [id_only(0, f"m{i}") for i in range(n)],
            [id_only(1, f"w{i}") for i in range(n)],
            [id_only(2, f"l{i}") for i in range(n)],
            seed=0,
        )
        batches = epoch_schedule(pool, 5)
        for task in (TASK_MULTI, TASK_WORD_ONLY, TASK_LINE_ONLY):
            ids = [b.samples[task].image_id for b in batches]
            assert len(set(ids)) == n

    def test_all_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_pool([], [], [], seed=0)

    def test_partial_pool_needs_flag(self):
        multi = [id_only(0, "m0")]
        word = [id_only(1, "w0")]
        with pytest.raises(ValueError, match="allow_partial"):
            build_pool(multi, word, [], seed=0)
        pool = build_pool(multi, word, [], seed=0, allow_partial=True)
        batches = epoch_schedule(pool, 0)
        assert set(batches[0].samples) == {TASK_MULTI, TASK_WORD_ONLY}

    def test_coverage_bounds_over_epochs(self):
        pool = build_pool(
            [id_only(0, f"m{i}") for i in range(5)],
            [id_only(1, f"w{i}") for i in range(3)],
            [id_only(2, f"l{i}") for i in range(2)],
            seed=11,
        )
        length = pool.epoch_length
        for epoch in range(3):
            batches = epoch_schedule(pool, epoch)
            for task, n in ((TASK_MULTI, 5), (TASK_WORD_ONLY, 3), (TASK_LINE_ONLY, 2)):
                ids = [b.samples[task].image_id for b in batches]
                counts = {i: ids.count(i) for i in set(ids)}
                lo, hi = length // n, -(-length // n)
                assert all(lo <= c <= hi for c in counts.values())
                assert len(counts) == n  # everyone shows up

    def test_schedule_deterministic(self):
        pool = build_pool(
            [id_only(0, f"m{i}") for i in range(6)],
            [id_only(1, "w0")],
            [id_only(2, "l0")],
            seed=7,
        )
        first = [b.samples[TASK_MULTI].image_id for b in epoch_schedule(pool, 2)]
        second = [b.samples[TASK_MULTI].image_id for b in epoch_schedule(pool, 2)]
        assert first == second

    def test_build_pool_deterministic(self):
        samples = [id_only(0, f"m{i}") for i in range(8)]
        a = build_pool(samples, [id_only(1, "w")], [id_only(2, "l")], seed=5)
        b = build_pool(samples, [id_only(1, "w")], [id_only(2, "l")], seed=5)
        assert [s.image_id for s in a.multi_set] == [s.image_id for s in b.multi_set]


# ---------------------------------------------------------------------------
# Prompt sampling


class TestSamplePrompts:
    config = tiny_config()

    def test_single_maximum_selected_exactly(self):
        s = word_sample()
        grid = np.zeros((16, 16))
        grid[2, 3] = 1.0  # pixel (14, 10), inside word 0
        prompts = sample_prompts(s, Heatmap(grid), np.random.default_rng(0), self.config)
        row = prompts.instance_ids.index(0)
        assert prompts.validity[row].tolist() == [True, False]
        assert prompts.coords[row, 0].tolist() == [14.0, 10.0]

    def test_two_maxima_both_used(self):
        s = word_sample()
        grid = np.zeros((16, 16))
        grid[2, 3] = 1.0
        grid[2, 5] = 0.9  # pixel (22, 10), same word
        prompts = sample_prompts(s, Heatmap(grid), np.random.default_rng(0), self.config)
        row = prompts.instance_ids.index(0)
        assert prompts.validity[row].sum() == 2
        got = {tuple(p) for p in prompts.coords[row]}
        assert got == {(14.0, 10.0), (22.0, 10.0)}

    def test_bound_and_membership_multi(self):
        s = multi_sample()
        hm = target_heatmap(s, 64, "centerline")
        prompts = sample_prompts(s, hm, np.random.default_rng(1), self.config)
        assert 0 < len(prompts) <= 10
        assert prompts.validity.sum() <= MAX_PROMPT_POINTS
        for row, wid in enumerate(prompts.instance_ids):
            poly = s.word_by_id(wid).polygon
            pts = prompts.coords[row][prompts.validity[row]]
            assert poly.contains_points(pts).all()

    def test_membership_line_only(self):
        s = line_sample()
        grid = np.zeros((16, 16))
        grid[3, 4] = 0.8  # pixel (18, 14) inside line 0
        prompts = sample_prompts(s, Heatmap(grid), np.random.default_rng(2), self.config)
        lines = {ln.id: ln.polygon for ln in s.lines}
        for row, lid in enumerate(prompts.instance_ids):
            pts = prompts.coords[row][prompts.validity[row]]
            assert lines[lid].contains_points(pts).all()

    def test_centroid_fallback_stays_inside_nonconvex(self):
        s = blank_sample(TASK_WORD_ONLY)
        ell = Polygon(
            np.array(
                [[4, 4], [44, 4], [44, 12], [12, 12], [12, 44], [4, 44]], dtype=float
            )
        )
        s.words = [WordAnn(0, ell)]
        centroid = ell.centroid
        assert not ell.contains_points(centroid[None])[0]  # the interesting case
        prompts = sample_prompts(s, Heatmap(np.zeros((16, 16))), np.random.default_rng(0), self.config)
        assert len(prompts) == 1
        assert prompts.validity[0].tolist() == [True, False]
        assert ell.contains_points(prompts.coords[0, :1]).all()

    def test_no_maxima_means_one_fallback_point_each(self):
        s = multi_sample()
        prompts = sample_prompts(s, Heatmap(np.zeros((16, 16))), np.random.default_rng(0), self.config)
        assert len(prompts) == 2  # one word per line
        assert (prompts.validity.sum(axis=1) == 1).all()

    def test_twelve_lines_capped_at_ten(self):
        s = blank_sample(TASK_MULTI)
        for i in range(12):
            y0 = 1 + 5 * i
            s.words.append(WordAnn(i, box(4, y0, 60, y0 + 3)))
            s.lines.append(LineAnn(i, box(4, y0, 60, y0 + 3), [i]))
        s.paragraphs = [ParagraphAnn(0, list(range(12)))]
        hm = target_heatmap(s, 64, "centerline")
        prompts = sample_prompts(s, hm, np.random.default_rng(3), self.config)
        assert len(prompts) == 10
        assert prompts.validity.sum() <= MAX_PROMPT_POINTS

    def test_gt_mask_grids_and_nesting(self):
        s = multi_sample()
        hm = target_heatmap(s, 64, "centerline")
        prompts = sample_prompts(s, hm, np.random.default_rng(4), self.config)
        k = len(prompts)
        assert prompts.gt_masks["word"].shape == (k, 24, 24)
        assert prompts.gt_masks["word_group"].shape == (k, 24, 24)
        assert prompts.gt_masks["line"].shape == (k, 16, 16)
        assert prompts.gt_masks["paragraph"].shape == (k, 16, 16)
        assert (prompts.gt_masks["word"] <= prompts.gt_masks["word_group"]).all()
        assert (prompts.gt_masks["line"] <= prompts.gt_masks["paragraph"]).all()

    def test_single_level_gt_keys(self):
        rng = np.random.default_rng(0)
        zeros = Heatmap(np.zeros((16, 16)))
        w = sample_prompts(word_sample(), zeros, rng, self.config)
        assert set(w.gt_masks) == {"word"}
        ln = sample_prompts(line_sample(), zeros, rng, self.config)
        assert set(ln.gt_masks) == {"line"}

    def test_empty_sample_empty_prompts(self):
        s = blank_sample(TASK_MULTI)
        prompts = sample_prompts(s, Heatmap(np.zeros((16, 16))), np.random.default_rng(0), self.config)
        assert len(prompts) == 0
        assert prompts.gt_masks == {}


# ---------------------------------------------------------------------------
# Losses


class TestLossPoint:
    def test_equal_is_zero(self):
        h = torch.rand(16, 16, dtype=torch.float64)
        assert float(loss_point(h, h.numpy())) == 0.0

    def test_constant_offset(self):
        h = torch.rand(16, 16, dtype=torch.float64)
        val = float(loss_point(h + 0.1, h.numpy()))
        assert abs(val - 0.01) < 1e-12

    def test_matches_two_loop_oracle(self):
        rng = np.random.default_rng(5)
        pred = rng.uniform(0, 1, (9, 7))
        target = rng.uniform(0, 1, (9, 7))
        acc = 0.0
        for r in range(9):
            for c in range(7):
                acc += (pred[r, c] - target[r, c]) ** 2
        expect = acc / 63.0
        got = float(loss_point(torch.from_numpy(pred), target))
        assert abs(got - expect) < 1e-10

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            loss_point(torch.zeros(4, 4), np.zeros((4, 5)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        target = rng.uniform(0, 1, (5, 5))
        pred = torch.tensor(rng.uniform(0, 1, (5, 5)), requires_grad=True)
        loss_point(pred, target).backward()
        eps = 1e-6
        for r, c in [(0, 0), (2, 3), (4, 4)]:
            up, down = pred.detach().clone(), pred.detach().clone()
            up[r, c] += eps
            down[r, c] -= eps
            fd = (float(loss_point(up, target)) - float(loss_point(down, target))) / (2 * eps)
            assert abs(fd - float(pred.grad[r, c])) < 1e-4 * max(1.0, abs(fd))


class TestMaskIoU:
    def test_conventions(self):
        empty = torch.zeros(1, 4, 4, dtype=torch.bool)
        full = torch.ones(1, 4, 4, dtype=torch.bool)
        assert float(binary_mask_iou(empty, empty)[0]) == 1.0
        assert float(binary_mask_iou(empty, full)[0]) == 0.0
        assert float(binary_mask_iou(full, empty)[0]) == 0.0
        half = full.clone()
        half[0, :, 2:] = False
        assert abs(float(binary_mask_iou(half, full)[0]) - 0.5) < 1e-12


class TestLossMask:
    def test_perfect_prediction_near_zero(self):
        gt = torch.zeros(2, 8, 8, dtype=torch.bool)
        gt[0, 2:5, 2:5] = True
        gt[1, 0:3, 5:8] = True
        logits = torch.where(gt, 20.0, -20.0).double()
        val = float(loss_mask(logits, gt, torch.ones(2, dtype=torch.float64)))
        assert val <= 1e-3

    def test_empty_gt_background_logits(self):
        gt = torch.zeros(1, 8, 8, dtype=torch.bool)
        logits = torch.full((1, 8, 8), -20.0, dtype=torch.float64)
        val = float(loss_mask(logits, gt, torch.ones(1, dtype=torch.float64)))
        assert val <= 1e-3

    def test_matches_per_term_oracle(self):
        rng = np.random.default_rng(9)
        logits_np = rng.normal(0, 2, (3, 6, 6))
        gt_np = rng.uniform(0, 1, (3, 6, 6)) > 0.6
        iou_np = rng.uniform(0, 1, 3)
        expect_rows = []
        for k in range(3):
            p = 1.0 / (1.0 + np.exp(-logits_np[k]))
            g = gt_np[k].astype(float)
            bce = -(g * np.log(p) + (1 - g) * np.log(1 - p)).mean()
            dice = 1 - (2 * (p * g).sum() + 1.0) / (p.sum() + g.sum() + 1.0)
            pred_bin = logits_np[k] > 0
            union = (pred_bin | gt_np[k]).sum()
            inter = (pred_bin & gt_np[k]).sum()
            realized = inter / union if union else 1.0
            expect_rows.append(bce + dice + (iou_np[k] - realized) ** 2)
        got = float(
            loss_mask(torch.from_numpy(logits_np), gt_np, torch.from_numpy(iou_np))
        )
        assert abs(got - np.mean(expect_rows)) < 1e-8

    def test_non_binary_gt_rejected(self):
        logits = torch.zeros(1, 4, 4)
        bad = torch.full((1, 4, 4), 0.5)
        with pytest.raises(ValueError, match="binary"):
            loss_mask(logits, bad, torch.zeros(1))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(10)
        # keep logits away from 0 so binarization cannot flip under the probe
        signs = np.where(rng.uniform(size=(2, 5, 5)) < 0.5, -1.0, 1.0)
        logits_np = signs * rng.uniform(0.3, 2.0, (2, 5, 5))
        gt = rng.uniform(size=(2, 5, 5)) > 0.5
        iou_np = rng.uniform(0, 1, 2)
        logits = torch.tensor(logits_np, requires_grad=True)
        iou = torch.tensor(iou_np, requires_grad=True)
        loss_mask(logits, gt, iou).backward()
        eps = 1e-6

        def value(lg, io):
            return float(loss_mask(torch.from_numpy(lg), gt, torch.from_numpy(io)))

        for k, r, c in [(0, 0, 0), (0, 2, 3), (1, 4, 4), (1, 1, 2)]:
            up, down = logits_np.copy(), logits_np.copy()
            up[k, r, c] += eps
            down[k, r, c] -= eps
            fd = (value(up, iou_np) - value(down, iou_np)) / (2 * eps)
            assert abs(fd - float(logits.grad[k, r, c])) < 1e-4 * max(1.0, abs(fd))
        for k in range(2):
            up, down = iou_np.copy(), iou_np.copy()
            up[k] += eps
            down[k] -= eps
            fd = (value(logits_np, up) - value(logits_np, down)) / (2 * eps)
            assert abs(fd - float(iou.grad[k])) < 1e-4 * max(1.0, abs(fd))


class TestTotalLoss:
    def test_unit_parts(self):
        report = total_loss(point=1.0, word=1.0, word_group=1.0, line=1.0, para=1.0)
        assert report.total == 53.5

    def test_point_only(self):
        report = total_loss(point=0.2)
        assert report.total == 10.0
        assert report.word == 0.0 and report.para == 0.0

    def test_mixed_parts(self):
        report = total_loss(point=0.1, word=0.2, word_group=0.3, line=0.4, para=0.5)
        assert abs(report.total - 6.15) < 1e-12

    def test_negative_part_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            total_loss(word=-0.1)

    def test_tensor_parts_keep_graph(self):
        x = torch.tensor(0.3, requires_grad=True)
        report = total_loss(point=x, line=x * 2)
        assert report.total.requires_grad
        report.total.backward()
        assert float(x.grad) == 52.0  # 50 + 2


# ---------------------------------------------------------------------------
# Augmentation


class TestAugment:
    def test_identity_returns_inputs(self):
        s = multi_sample()
        hm = target_heatmap(s, 64, "centerline")
        out, hm2 = apply_augment(s, AugmentParams(), hm)
        assert out is s and hm2 is hm

    def test_scale_doubles_coordinates(self):
        s = multi_sample()
        out, _ = apply_augment(s, AugmentParams(scale=2.0))
        np.testing.assert_array_equal(out.words[0].polygon.points, s.words[0].polygon.points * 2)
        assert out.image.shape == (128, 128, 3)

    def test_rotation_moves_centroid_to_rotated_position(self):
        s = multi_sample()
        out, _ = apply_augment(s, AugmentParams(angle=math.pi / 2))
        cx, cy = s.words[0].polygon.centroid
        expect = np.array([64.0 - cy, cx])  # 90 deg about (32, 32)
        got = out.words[0].polygon.centroid
        assert np.linalg.norm(got - expect) < 1.0

    def test_color_jitter_image_only(self):
        s = multi_sample()
        out, _ = apply_augment(s, AugmentParams(brightness=0.1, contrast=1.1, saturation=0.8))
        assert not np.array_equal(out.image, s.image)
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0
        np.testing.assert_array_equal(out.words[0].polygon.points, s.words[0].polygon.points)

    def test_heatmap_follows_geometry(self):
        s = multi_sample()
        grid = np.zeros((16, 16))
        grid[4, 5] = 1.0
        out, hm = apply_augment(s, AugmentParams(scale=2.0), Heatmap(grid))
        assert hm.grid.shape == (32, 32)
        peak = np.unravel_index(np.argmax(hm.grid), hm.grid.shape)
        assert abs(peak[0] - 8) <= 1 and abs(peak[1] - 10) <= 1

    def test_draw_respects_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = draw_augment_params(rng)
            assert 0.5 <= p.scale <= 2.0
            assert abs(p.angle) <= math.pi / 12
            assert -0.2 <= p.brightness <= 0.2

    def test_resize_sample_scales_everything(self):
        s = multi_sample(image_size=32)
        grid = np.zeros((8, 8))
        grid[2, 3] = 1.0
        out, hm = resize_sample(s, 64, Heatmap(grid))
        np.testing.assert_allclose(out.words[0].polygon.points, s.words[0].polygon.points * 2)
        assert out.image.shape == (64, 64, 3)
        assert hm.grid.shape == (16, 16)


# ---------------------------------------------------------------------------
# Training loop


def small_pool():
    return build_pool([multi_sample()], [word_sample()], [line_sample()], seed=0)


def fresh_model(seed=0, dtype=None):
    torch.manual_seed(seed)
    model = EtsamModel(tiny_config())
    if dtype is not None:
        model.to(dtype)
    return model


class TestTrainLoop:
    def test_lr_zero_leaves_parameters(self):
        model = fresh_model()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        config = TrainConfig(steps=2, lr=0.0, augment=False, heatmap_variant="centerpoint")
        train(small_pool(), model, config)
        after = model.state_dict()
        for key, tensor in before.items():
            assert torch.equal(tensor, after[key]), key

    def test_same_seed_same_losses(self):
        config = TrainConfig(steps=3, lr=1e-3, seed=4, augment=True)
        runs = []
        for _ in range(2):
            model = fresh_model(seed=1, dtype=torch.float64)
            result = train(small_pool(), model, config)
            runs.append([r.to_record(i) for i, r in enumerate(result.reports)])
        assert runs[0] == runs[1]

    def test_single_sample_overfit_trend(self):
        model = fresh_model(seed=2)
        pool = build_pool([multi_sample()], [], [], seed=0, allow_partial=True)
        config = TrainConfig(steps=40, lr=1e-3, augment=False, heatmap_variant="centerpoint")
        result = train(pool, model, config)
        totals = [float(r.total) for r in result.reports]
        assert np.mean(totals[-10:]) < np.mean(totals[:10])

    def test_line_only_batch_leaves_word_heads_untouched(self):
        model = fresh_model(seed=3)
        sample = line_sample()
        rng = np.random.default_rng(0)
        parts = _sample_losses(model, sample, TASK_LINE_ONLY, rng, TrainConfig(augment=False))
        assert set(parts) == {"point", "line"}
        report = total_loss(**parts)
        report.total.backward()
        def untouched(p):
            return p.grad is None or not p.grad.any()

        # word and word-group heads: no gradient at all, or exactly zero
        for head in model.hm_decoder.highres_heads:
            assert all(untouched(p) for p in head.parameters())
        assert all(untouched(p) for p in model.hm_decoder.iou_heads[0].parameters())
        assert all(untouched(p) for p in model.hm_decoder.iou_heads[1].parameters())
        assert any(
            p.grad is not None and p.grad.abs().sum() > 0
            for p in model.hm_decoder.lowres_heads[0].parameters()
        )
        assert any(
            p.grad is not None and p.grad.abs().sum() > 0
            for p in model.hm_decoder.iou_heads[2].parameters()
        )

    def test_line_only_skip_mode_drops_point_loss(self):
        model = fresh_model(seed=3)
        rng = np.random.default_rng(0)
        parts = _sample_losses(
            model, line_sample(), TASK_LINE_ONLY, rng, TrainConfig(line_only_target="skip")
        )
        assert set(parts) == {"line"}

    def test_metrics_log_schema(self, tmp_path):
        model = fresh_model()
        config = TrainConfig(steps=2, lr=1e-4, augment=False)
        result = train(small_pool(), model, config, out_dir=tmp_path)
        lines = result.metrics_path.read_text().strip().splitlines()
        assert len(lines) == 2
        keys = {"step", "L_point", "L_word", "L_word_group", "L_line", "L_para", "L_total"}
        for i, line in enumerate(lines):
            rec = json.loads(line)
            assert set(rec) == keys
            assert rec["step"] == i
            expect = (
                50.0 * rec["L_point"]
                + rec["L_word"]
                + rec["L_word_group"]
                + rec["L_line"]
                + 0.5 * rec["L_para"]
            )
            assert abs(rec["L_total"] - expect) < 1e-5

    def test_checkpoint_and_resume(self, tmp_path):
        model = fresh_model()
        config = TrainConfig(steps=2, lr=1e-4, augment=False, checkpoint_every=1)
        train(small_pool(), model, config, out_dir=tmp_path)
        restored, payload = load_checkpoint(tmp_path / "checkpoint.pt")
        assert payload["step"] == 2
        more = TrainConfig(steps=3, lr=1e-4, augment=False)
        result = train(
            small_pool(),
            restored,
            more,
            start_step=payload["step"],
            optimizer_state=payload["optimizer"],
        )
        assert result.steps_run == 1

    def test_nonfinite_loss_aborts_with_batch_ids(self):
        model = fresh_model()
        with torch.no_grad():
            next(model.point_decoder.parameters()).fill_(float("nan"))
        config = TrainConfig(steps=1, augment=False)
        with pytest.raises(RuntimeError, match="non-finite loss at step 0"):
            train(small_pool(), model, config)

    def test_partial_pool_reports_zero_for_absent_parts(self):
        model = fresh_model()
        pool = build_pool([], [word_sample()], [], seed=0, allow_partial=True)
        config = TrainConfig(steps=1, lr=1e-4, augment=False)
        result = train(pool, model, config)
        report = result.reports[0]
        assert float(report.word) > 0
        assert float(report.line) == 0.0 and float(report.para) == 0.0

    def test_config_validation(self):
        with pytest.raises(ValueError, match="variant"):
            TrainConfig(heatmap_variant="nope")
        with pytest.raises(ValueError, match="target"):
            TrainConfig(line_only_target="sometimes")
