import dataclasses

import numpy as np
import pytest
import torch

from denospot.decoder import (
    DecoderConfig,
    MultiheadAttention,
    SpotDecoder,
    flatten_dn_batch,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_embed,
)
from denospot.dn_queries import DnQueryBatch, NoiseConfig, build_dn_batch
from denospot.geometry import BezierCurve, TextInstance
from denospot.losses import LossWeights, dn_loss, matching_loss

torch.set_num_threads(1)

SMALL = DecoderConfig(
    layers=2, dim=16, heads=2, ffn_dim=32, T=6, alphabet_size=5, num_matching=4
)


def make_instance(y=0.5, height=0.08, transcript=(0, 1), inst_id="t0"):
    xs = np.array([0.1, 0.4, 0.6, 0.9])
    top = BezierCurve(np.stack([xs, np.full(4, y - height / 2.0)], axis=1))
    bot = BezierCurve(np.stack([xs, np.full(4, y + height / 2.0)], axis=1))
    return TextInstance(top=top, bottom=bot, transcript=tuple(transcript), id=inst_id)


def make_raster(cfg=SMALL, grid=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((cfg.alphabet_size + 2, grid, grid)).astype(np.float32)


def make_batch(cfg=SMALL, n=2, seed=0, **noise_kwargs):
    instances = [
        make_instance(0.2 + 0.5 * k / max(n - 1, 1), inst_id=f"t{k}") for k in range(n)
    ]
    noise = NoiseConfig(T=cfg.T, **noise_kwargs)
    batch = build_dn_batch(instances, noise, cfg.alphabet_size, np.random.default_rng(seed))
    return instances, batch


class TestConfig:
    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            DecoderConfig(dim=20, heads=3)

    def test_rejects_dim_not_multiple_of_four(self):
        with pytest.raises(ValueError):
            DecoderConfig(dim=18, heads=2)

    def test_rejects_unknown_dtype(self):
        with pytest.raises(ValueError):
            DecoderConfig(dtype="float16")

    def test_rejects_empty_model(self):
        with pytest.raises(ValueError):
            DecoderConfig(layers=0)


class TestSinusoidalEmbed:
    def test_axes_occupy_separate_channels(self):
        a = torch.tensor([[0.3, 0.9]], dtype=torch.float64)
        b = torch.tensor([[0.3, 0.1]], dtype=torch.float64)
        ea, eb = sinusoidal_embed(a, 16), sinusoidal_embed(b, 16)
        assert torch.equal(ea[:, :8], eb[:, :8])  # x half blind to y
        assert not torch.equal(ea[:, 8:], eb[:, 8:])

    def test_distinct_points_distinct_codes(self):
        pts = torch.tensor([[0.1, 0.2], [0.8, 0.2], [0.1, 0.7]], dtype=torch.float64)
        e = sinusoidal_embed(pts, 32)
        assert e.shape == (3, 32)
        for i in range(3):
            for j in range(i + 1, 3):
                assert not torch.equal(e[i], e[j])

    def test_rejects_bad_dim(self):
        with pytest.raises(ValueError):
            sinusoidal_embed(torch.zeros((1, 2)), 10)


class TestAttention:
    def test_weights_form_convex_combination(self):
        torch.manual_seed(0)
        attn = MultiheadAttention(dim=16, heads=2).double()
        q = torch.randn((1, 5, 16), dtype=torch.float64)
        k = torch.randn((1, 7, 16), dtype=torch.float64)
        _, w = attn(q, k, k)
        assert (w >= 0).all()
        assert torch.allclose(w.sum(dim=-1), torch.ones_like(w.sum(dim=-1)))

    def test_blocked_columns_get_exactly_zero_weight(self):
        torch.manual_seed(1)
        attn = MultiheadAttention(dim=16, heads=2).double()
        q = torch.randn((1, 4, 16), dtype=torch.float64)
        mask = torch.zeros((4, 4), dtype=torch.float64)
        mask[0, 2] = -torch.inf
        mask[3, :2] = -torch.inf
        _, w = attn(q, q, q, additive_mask=mask)
        assert (w[0, :, 0, 2] == 0.0).all()
        assert (w[0, :, 3, :2] == 0.0).all()


class TestInit:
    def test_same_seed_same_parameters(self):
        a, b = SpotDecoder(SMALL), SpotDecoder(SMALL)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_different_seed_different_parameters(self):
        a = SpotDecoder(SMALL)
        b = SpotDecoder(dataclasses.replace(SMALL, init_seed=1))
        assert not torch.equal(a.match_content, b.match_content)

    def test_points_start_at_references(self):
        model = SpotDecoder(SMALL)
        preds = model(make_raster())
        ref = model.anchor_points()
        assert torch.equal(preds.center_points, ref)
        assert torch.equal(preds.boundary_top, ref)
        assert torch.equal(preds.boundary_bot, ref)

    def test_anchor_points_inside_unit_square(self):
        model = SpotDecoder(SMALL)
        pts = model.anchor_points().detach()
        assert float(pts.min()) > 0.0 and float(pts.max()) < 1.0


class TestForward:
    def test_row_layout_and_score_range(self):
        model = SpotDecoder(SMALL)
        instances, batch = make_batch()
        preds = model(make_raster(), batch)
        assert len(preds) == batch.num_queries + SMALL.num_matching
        s = preds.instance_scores
        assert (s >= 1e-6).all() and (s <= 1.0 - 1e-6).all()
        assert preds.char_logits.shape == (len(preds), SMALL.T, SMALL.alphabet_size + 1)

    def test_deterministic_across_calls(self):
        model = SpotDecoder(SMALL)
        raster = make_raster()
        _, batch = make_batch()
        a = model(raster, batch)
        b = model(raster, batch)
        assert torch.equal(a.instance_scores, b.instance_scores)
        assert torch.equal(a.center_points, b.center_points)

    def test_rejects_wrong_raster_channels(self):
        model = SpotDecoder(SMALL)
        with pytest.raises(ValueError):
            model(np.zeros((3, 8, 8), dtype=np.float32))

    def test_rejects_mismatched_sampling_rate(self):
        model = SpotDecoder(SMALL)
        instances = [make_instance()]
        noise = NoiseConfig(T=SMALL.T + 1)
        batch = build_dn_batch(instances, noise, SMALL.alphabet_size, np.random.default_rng(0))
        with pytest.raises(ValueError):
            model(make_raster(), batch)

    def test_non_finite_raster_names_first_layer(self):
        model = SpotDecoder(SMALL)
        raster = make_raster()
        raster[0, 0, 0] = np.inf
        with pytest.raises(FloatingPointError, match="layer 0"):
            model(raster)

    def test_gradients_reach_every_parameter(self):
        model = SpotDecoder(SMALL)
        instances, batch = make_batch()
        preds = model(make_raster(), batch)
        dn_part = preds.narrow(0, batch.num_queries)
        match_part = preds.narrow(batch.num_queries, SMALL.num_matching)
        total_dn, _ = dn_loss(dn_part, batch, instances, LossWeights())
        total_m, _, _ = matching_loss(match_part, instances)
        (total_dn + total_m).backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, name
            assert torch.isfinite(p.grad).all(), name


def perturb_group(batch, index, delta=0.07):
    """Copy the batch with one group's query points and characters disturbed."""
    groups = list(batch.groups)
    grp = groups[index]
    groups[index] = dataclasses.replace(
        grp,
        positive_points=grp.positive_points + delta,
        negative_points=grp.negative_points - delta,
        positive_chars=(grp.positive_chars + 1) % 3,
    )
    return DnQueryBatch(groups=tuple(groups), g=batch.g, n=batch.n)


class TestIsolation:
    def test_matching_rows_blind_to_dn_noise(self):
        model = SpotDecoder(SMALL)
        raster = make_raster()
        _, batch_a = make_batch(seed=0)
        _, batch_b = make_batch(seed=99)  # same shape, different noise
        assert batch_a.g == batch_b.g and batch_a.n == batch_b.n
        pa = model(raster, batch_a)
        pb = model(raster, batch_b)
        k0 = batch_a.num_queries
        for field in ("instance_scores", "char_logits", "center_points", "boundary_top", "boundary_bot"):
            assert torch.equal(getattr(pa, field)[k0:], getattr(pb, field)[k0:]), field

    def test_groups_blind_to_each_other(self):
        model = SpotDecoder(SMALL)
        raster = make_raster()
        _, batch = make_batch(seed=3)
        assert batch.g >= 2
        moved = perturb_group(batch, index=batch.g - 1)
        pa = model(raster, batch)
        pb = model(raster, moved)
        rows = (batch.g - 1) * 2 * batch.n  # all rows before the disturbed group
        for field in ("instance_scores", "char_logits", "center_points"):
            assert torch.equal(getattr(pa, field)[:rows], getattr(pb, field)[:rows]), field

    def test_dn_rows_do_change_under_their_own_noise(self):
        model = SpotDecoder(SMALL)
        raster = make_raster()
        _, batch = make_batch(seed=4)
        moved = perturb_group(batch, index=0)
        pa = model(raster, batch)
        pb = model(raster, moved)
        assert not torch.equal(
            pa.center_points[: 2 * batch.n], pb.center_points[: 2 * batch.n]
        )


class TestFlatten:
    def test_group_major_positive_first(self):
        _, batch = make_batch(seed=5)
        points, chars = flatten_dn_batch(batch)
        assert points.shape == (batch.num_queries, SMALL.T, 2)
        assert chars.shape == (batch.num_queries, SMALL.T)
        n = batch.n
        for j, grp in enumerate(batch.groups):
            base = j * 2 * n
            np.testing.assert_array_equal(points[base : base + n], grp.positive_points)
            np.testing.assert_array_equal(points[base + n : base + 2 * n], grp.negative_points)
            np.testing.assert_array_equal(chars[base : base + n], grp.positive_chars)
            np.testing.assert_array_equal(chars[base + n : base + 2 * n], grp.negative_chars)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = SpotDecoder(SMALL)
        # move off the init point so the test is not vacuous
        with torch.no_grad():
            for p in model.parameters():
                p.add_(0.01 * torch.randn_like(p))
        path = tmp_path / "model.pt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.cfg == model.cfg
        for (na, pa), (nb, pb) in zip(
            model.state_dict().items(), loaded.state_dict().items()
        ):
            assert na == nb and torch.equal(pa, pb), na
        raster = make_raster()
        a, b = model(raster), loaded(raster)
        assert torch.equal(a.instance_scores, b.instance_scores)
        assert torch.equal(a.center_points, b.center_points)

    def test_rejects_unknown_format_version(self, tmp_path):
        model = SpotDecoder(SMALL)
        path = tmp_path / "model.pt"
        save_checkpoint(model, path)
        payload = torch.load(path, weights_only=True)
        payload["format_version"] = 999
        torch.save(payload, path)
        with pytest.raises(ValueError, match="format_version"):
            load_checkpoint(path)
