import math

import numpy as np
import pytest
import torch

from dyntraj.dynamic_points import (DECODER_LAYERS, ENCODER_LAYERS, DPMConfig, DynamicPointModel, TrainingDivergenceError,
                                    consistency_loss, infer_points, load_checkpoint, reconstruction_loss,
                                    render_heatmaps, sample_batch, save_checkpoint, spatial_soft_argmax,
                                    to_tensor, train_dynamic_points, train_step)
from dyntraj.scene_io import SyntheticSceneSpec, generate_synthetic_scene

TINY = dict(k_points=2, width_mult=0.0625)


def central_difference(f, x, eps=1e-6):
    """Numerical gradient of scalar f at float64 tensor x."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = f(x).item()
        flat[i] = old - eps
        lo = f(x).item()
        flat[i] = old
        g.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    return (a - b).norm().item() / max(a.norm().item(), b.norm().item(), 1e-12)


class TestSoftArgmax:
    def test_spike_is_recovered(self):
        h = w = 17
        act = torch.zeros(1, 1, h, w, dtype=torch.float64)
        # normalized (0.5, -0.25) falls on column 12, row 6 of a 17-cell grid
        act[0, 0, 6, 12] = 1.0
        pt = spatial_soft_argmax(act, temperature=0.01)[0, 0]
        assert abs(pt[0].item() - 0.5) < 0.01
        assert abs(pt[1].item() + 0.25) < 0.01

    def test_uniform_gives_origin(self):
        pt = spatial_soft_argmax(torch.zeros(2, 3, 16, 16))
        assert torch.allclose(pt, torch.zeros(2, 3, 2), atol=1e-6)

    def test_flip_negates_x(self):
        act = torch.randn(2, 4, 16, 16, dtype=torch.float64)
        p = spatial_soft_argmax(act)
        q = spatial_soft_argmax(torch.flip(act, dims=[-1]))
        assert torch.allclose(q[..., 0], -p[..., 0], atol=1e-4)
        assert torch.allclose(q[..., 1], p[..., 1], atol=1e-4)

    def test_range(self):
        p = spatial_soft_argmax(torch.randn(3, 5, 16, 16) * 20)
        assert p.abs().max() <= 1.0


class TestHeatmaps:
    def test_exact_cell_is_one(self):
        h = render_heatmaps(torch.tensor([[[-1.0, 1.0]]]), 16, 16, 0.1)
        assert h[0, 0, 15, 0].item() == 1.0

    def test_one_sigma(self):
        # grid step is 2/15; put the point one sigma away from cell (0, 0) along x
        s = 2 / 15
        h = render_heatmaps(torch.tensor([[[-1.0 + s, -1.0]]], dtype=torch.float64), 16, 16, s)
        assert h[0, 0, 0, 0].item() == pytest.approx(math.exp(-0.5))

    def test_three_sigma_and_monotone(self):
        s = 2 / 15
        h = render_heatmaps(torch.tensor([[[-1.0, -1.0]]], dtype=torch.float64), 16, 16, s)[0, 0, 0]
        assert h[3].item() == pytest.approx(0.0111, abs=1e-4)
        assert torch.all(h[1:] < h[:-1])

    def test_range_and_argmax(self):
        pts = torch.rand(4, 7, 2, dtype=torch.float64) * 2 - 1
        h = render_heatmaps(pts, 16, 16, 0.1)
        assert h.min() > 0 and h.max() <= 1
        grid = np.linspace(-1, 1, 16)
        for b in range(4):
            for k in range(7):
                iy, ix = np.unravel_index(h[b, k].argmax().item(), (16, 16))
                assert ix == np.abs(grid - pts[b, k, 0].item()).argmin()
                assert iy == np.abs(grid - pts[b, k, 1].item()).argmin()

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            render_heatmaps(torch.zeros(1, 1, 2), 4, 4, 0.0)


class TestLosses:
    def test_consistency_examples(self):
        a = torch.tensor([[0.0, 0.0], [0.5, 0.5]])
        b = a + torch.tensor([0.1, 0.0])
        assert consistency_loss(a, a).item() == 0.0
        assert consistency_loss(a, b).item() == pytest.approx(0.005)
        assert consistency_loss(b, a).item() == consistency_loss(a, b).item()

    def test_consistency_shape_mismatch(self):
        with pytest.raises(ValueError):
            consistency_loss(torch.zeros(1, 2, 2), torch.zeros(1, 3, 2))

    def test_reconstruction_examples(self):
        z = torch.zeros(1, 3, 8, 8)
        assert reconstruction_loss(z, z).item() == 0.0
        assert reconstruction_loss(z, z + 0.5).item() == pytest.approx(0.25)
        r = torch.rand(1, 3, 8, 8)
        assert reconstruction_loss(r, z).item() == reconstruction_loss(z, r).item()

    def test_reconstruction_shape_mismatch(self):
        with pytest.raises(ValueError):
            reconstruction_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 4))


class TestGradients:
    def test_consistency_gradient(self):
        torch.manual_seed(0)
        f = torch.rand(1, 2, 2, dtype=torch.float64, requires_grad=True)
        b = torch.rand(1, 2, 2, dtype=torch.float64)
        consistency_loss(f, b).backward()
        num = central_difference(lambda x: consistency_loss(x, b), f.detach().clone())
        assert rel_error(f.grad, num) < 1e-3

    def test_heatmap_reconstruction_gradient(self):
        torch.manual_seed(1)
        target = torch.rand(1, 2, 16, 16, dtype=torch.float64)
        p = (torch.rand(1, 2, 2, dtype=torch.float64) * 1.6 - 0.8).requires_grad_()
        loss = lambda x: reconstruction_loss(render_heatmaps(x, 16, 16, 0.1), target)
        loss(p).backward()
        num = central_difference(loss, p.detach().clone())
        assert rel_error(p.grad, num) < 1e-3

    def test_gradient_through_decoder(self):
        torch.manual_seed(2)
        model = DynamicPointModel(DPMConfig(**TINY)).double().eval()
        i1 = torch.rand(1, 3, 128, 128, dtype=torch.float64)
        target = torch.rand(1, 3, 128, 128, dtype=torch.float64)
        with torch.no_grad():
            bg = model.encode_background(i1)
        loss = lambda x: reconstruction_loss(model.decode(bg, model.heatmaps(x)), target)
        p = (torch.rand(1, 2, 2, dtype=torch.float64) * 1.6 - 0.8).requires_grad_()
        loss(p).backward()
        num = central_difference(loss, p.detach().clone())
        assert rel_error(p.grad, num) < 1e-3


class TestArchitecture:
    def test_layer_lists(self):
        assert ENCODER_LAYERS == [64, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512]
        assert DECODER_LAYERS == [512, 512, "U", 256, 256, "U", 256, 256, "U", 128, 64]

    def test_full_width_shapes(self):
        model = DynamicPointModel(DPMConfig(k_points=4)).eval()
        x = torch.rand(1, 3, 128, 128)
        with torch.no_grad():
            bg = model.encode_background(x)
            assert bg.shape == (1, 512, 16, 16)
            pts = model.extract(x, x)
            assert pts.shape == (1, 4, 2)
            out = model.reconstruct(x, pts)
        assert out.shape == (1, 3, 128, 128)

    def test_decode_deterministic_and_finite(self):
        model = DynamicPointModel(DPMConfig(**TINY)).eval()
        bg = torch.zeros(1, model.encoder[-3].out_channels, 16, 16)
        hm = torch.zeros(1, 2, 16, 16)
        with torch.no_grad():
            a, b = model.decode(bg, hm), model.decode(bg, hm)
        assert torch.equal(a, b)
        assert torch.isfinite(a).all()

    def test_decode_shape_mismatch(self):
        model = DynamicPointModel(DPMConfig(**TINY)).eval()
        with pytest.raises(ValueError):
            model.decode(torch.zeros(1, 32, 16, 16), torch.zeros(1, 2, 8, 8))

    def test_wrong_image_size(self):
        model = DynamicPointModel(DPMConfig(**TINY))
        with pytest.raises(ValueError):
            model.encode_background(torch.zeros(1, 3, 64, 64))

    def test_non_finite_activations(self):
        model = DynamicPointModel(DPMConfig(**TINY)).eval()
        x = torch.full((1, 3, 128, 128), float("nan"))
        with pytest.raises(TrainingDivergenceError):
            model.extract(x, x)


class TestTraining:
    def test_palindrome_gives_zero_consistency(self):
        torch.manual_seed(0)
        model = DynamicPointModel(DPMConfig(**TINY))
        a, b = torch.rand(2, 3, 128, 128), torch.rand(2, 3, 128, 128)
        _, _, l_c, _ = model.losses(a, a, b, a)
        assert l_c.item() == 0.0

    def test_total_is_composition(self):
        torch.manual_seed(3)
        model = DynamicPointModel(DPMConfig(**TINY))
        frames = [torch.rand(2, 3, 128, 128) for _ in range(4)]
        total, l_r, l_c, beta = model.losses(*frames)
        assert beta == 0.5
        assert abs(total.item() - (l_r.item() + 0.5 * l_c.item())) < 1e-6

    @pytest.mark.parametrize("flag", ["use_forward", "use_backward", "use_consistency"])
    def test_ablation_drops_consistency_weight(self, flag):
        model = DynamicPointModel(DPMConfig(**TINY, **{flag: False}))
        frames = [torch.rand(2, 3, 128, 128) for _ in range(4)]
        total, l_r, _, beta = model.losses(*frames)
        assert beta == 0.0
        assert total.item() == l_r.item()

    def test_both_extractors_cannot_be_removed(self):
        with pytest.raises(ValueError):
            DPMConfig(use_forward=False, use_backward=False)

    def test_batch_tuples_are_ordered(self):
        video = torch.arange(10, dtype=torch.float32).reshape(10, 1, 1, 1)
        i1, prev, cur, nxt = sample_batch(video, 64, np.random.default_rng(0))
        assert torch.all(i1 == 0)
        assert torch.all(cur - prev == 1) and torch.all(nxt - cur == 1)
        assert cur.min() >= 1 and cur.max() <= 8

    def test_divergence_carries_step(self):
        model = DynamicPointModel(DPMConfig(**TINY))
        for p in model.to_rgb.parameters():
            p.data.fill_(float("inf"))
        opt = torch.optim.Adam(model.parameters())
        batch = [torch.rand(1, 3, 128, 128) for _ in range(4)]
        with pytest.raises(TrainingDivergenceError) as err:
            train_step(model, opt, batch, step=17)
        assert err.value.step == 17

    def test_loss_decreases_on_one_blob(self):
        seq, _, _ = generate_synthetic_scene(SyntheticSceneSpec(n_agents=1, n_frames=30), seed=0)
        res = train_dynamic_points(seq.frames, DPMConfig(k_points=4, width_mult=0.0625, lr=1e-3),
                                   steps=200, batch_size=2, seed=0, log_every=0)
        first = res.history[0].total
        last = np.mean([h.total for h in res.history[-10:]])
        assert last < first

    def test_training_is_deterministic(self):
        seq, _, _ = generate_synthetic_scene(SyntheticSceneSpec(n_agents=1, n_frames=10), seed=0)
        cfg = DPMConfig(k_points=2, width_mult=0.0625, lr=1e-3)
        a = train_dynamic_points(seq.frames, cfg, steps=3, batch_size=2, seed=5, log_every=0)
        b = train_dynamic_points(seq.frames, cfg, steps=3, batch_size=2, seed=5, log_every=0)
        assert [h.total for h in a.history] == [h.total for h in b.history]


class TestInference:
    def test_points_shape_and_range(self):
        seq, _, _ = generate_synthetic_scene(SyntheticSceneSpec(n_agents=1, n_frames=6), seed=0)
        model = DynamicPointModel(DPMConfig(k_points=3, width_mult=0.0625))
        pts = infer_points(model, seq.frames)
        assert pts.shape == (5, 3, 2)
        assert np.abs(pts).max() <= 1

    def test_inference_matches_direct_call(self):
        seq, _, _ = generate_synthetic_scene(SyntheticSceneSpec(n_agents=1, n_frames=5), seed=0)
        model = DynamicPointModel(DPMConfig(k_points=3, width_mult=0.0625)).eval()
        v = to_tensor(seq.frames)
        with torch.no_grad():
            direct = model.extract(v[1:2], v[2:3]).double().numpy()
        np.testing.assert_allclose(infer_points(model, seq.frames)[1], direct[0], atol=1e-6)

    def test_checkpoint_round_trip(self, tmp_path):
        model = DynamicPointModel(DPMConfig(k_points=3, width_mult=0.0625, sigma=0.2)).eval()
        save_checkpoint(model, tmp_path / "m.pt")
        back, history = load_checkpoint(tmp_path / "m.pt")
        assert back.config == model.config
        assert history == []
        x = torch.rand(1, 3, 128, 128)
        with torch.no_grad():
            assert torch.equal(model.extract(x, x), back.extract(x, x))

    def test_checkpoint_format_checked(self, tmp_path):
        torch.save({"format": "other"}, tmp_path / "x.pt")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.pt")
