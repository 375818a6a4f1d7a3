import numpy as np
import pytest
import torch

from seisfacies.errors import ConfigError
from seisfacies.model import (
    DualHeadNet,
    ModelSpec,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
)

SMALL = ModelSpec(classes=4, rep_dim=8, encoder_channels=(4, 8))


def params_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return all(torch.equal(sa[k], sb[k]) for k in sa)


class TestBuild:
    def test_seed_determinism(self):
        assert params_equal(build_model(SMALL, seed=3), build_model(SMALL, seed=3))
        assert not params_equal(build_model(SMALL, seed=3), build_model(SMALL, seed=4))

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            ModelSpec(classes=1)
        with pytest.raises(ConfigError):
            ModelSpec(classes=3, rep_dim=1)
        with pytest.raises(ConfigError):
            ModelSpec(classes=3, encoder_channels=())

    def test_paper_scale_shapes(self):
        spec = ModelSpec(classes=6, rep_dim=128)
        model = build_model(spec, seed=0)
        out = forward(model, np.zeros((1, 64, 64), dtype=np.float32), grad=False)
        assert tuple(out.seg_logits.shape) == (1, 6, 64, 64)
        assert tuple(out.rep_map.shape) == (1, 128, 64, 64)


class TestForward:
    def test_identical_slices_identical_outputs(self):
        model = build_model(SMALL, seed=0).eval()
        rng = np.random.default_rng(0)
        one = rng.normal(size=(12, 20)).astype(np.float32)
        out = forward(model, np.stack([one, one]), grad=False)
        # batched conv kernels only agree to float32 rounding across lanes
        assert torch.allclose(out.seg_logits[0], out.seg_logits[1], atol=1e-5)
        assert torch.allclose(out.rep_map[0], out.rep_map[1], atol=1e-5)

    def test_zero_input_finite(self):
        model = build_model(SMALL, seed=0)
        out = forward(model, np.zeros((1, 8, 8), dtype=np.float32), grad=False)
        assert torch.isfinite(out.seg_logits).all()
        assert torch.isfinite(out.rep_map).all()

    def test_grad_flag(self):
        model = build_model(SMALL, seed=0)
        x = np.random.default_rng(1).normal(size=(1, 8, 8)).astype(np.float32)
        frozen = forward(model, x, grad=False)
        assert not frozen.seg_logits.requires_grad
        live = forward(model, x, grad=True)
        assert live.seg_logits.requires_grad
        # no stochastic layers: both modes produce identical values
        assert torch.equal(frozen.seg_logits, live.seg_logits.detach())

    def test_non_multiple_sizes_padded_back(self):
        model = build_model(SMALL, seed=0)
        for h, w in [(10, 14), (7, 9), (16, 16)]:
            out = forward(model, np.zeros((1, h, w), dtype=np.float32), grad=False)
            assert tuple(out.seg_logits.shape[-2:]) == (h, w)
            assert tuple(out.rep_map.shape[-2:]) == (h, w)

    def test_batch_permutation_equivariance(self):
        model = build_model(SMALL, seed=0).eval()
        rng = np.random.default_rng(2)
        batch = rng.normal(size=(4, 12, 16)).astype(np.float32)
        perm = [2, 0, 3, 1]
        out = forward(model, batch, grad=False)
        out_perm = forward(model, batch[perm], grad=False)
        assert torch.allclose(out.seg_logits[perm], out_perm.seg_logits, atol=1e-6)

    def test_normalize_input_flag(self):
        spec = ModelSpec(classes=4, rep_dim=8, encoder_channels=(4, 8), normalize_input=True)
        model = build_model(spec, seed=0).eval()
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 12, 16)).astype(np.float32)
        a = forward(model, x, grad=False)
        b = forward(model, x * 3.0 + 5.0, grad=False)
        assert torch.allclose(a.seg_logits, b.seg_logits, atol=1e-4)


class TestGradients:
    def test_parameter_gradients_match_finite_differences(self):
        model = build_model(SMALL, seed=1).double()
        rng = np.random.default_rng(4)
        x = torch.tensor(rng.normal(size=(1, 1, 8, 8)), dtype=torch.float64)
        w_seg = torch.tensor(rng.normal(size=(1, 4, 8, 8)), dtype=torch.float64)
        w_rep = torch.tensor(rng.normal(size=(1, 8, 8, 8)), dtype=torch.float64)

        def scalar():
            out = model(x)
            return (out.seg_logits * w_seg).sum() + (out.rep_map * w_rep).mean()

        model.zero_grad()
        scalar().backward()

        h = 1e-5
        checked = 0
        for name, param in model.named_parameters():
            flat = param.detach().reshape(-1)
            idx = int(rng.integers(len(flat)))
            with torch.no_grad():
                orig = flat[idx].item()
                flat[idx] = orig + h
                up = float(scalar())
                flat[idx] = orig - h
                down = float(scalar())
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            an = param.grad.reshape(-1)[idx].item()
            denom = max(abs(fd), abs(an), 1e-6)
            assert abs(fd - an) / denom < 1e-3, f"{name}[{idx}]: fd={fd} an={an}"
            checked += 1
        assert checked > 10


class TestCheckpoint:
    def test_roundtrip_bit_compatible(self, tmp_path):
        model = build_model(SMALL, seed=5)
        save_checkpoint(tmp_path / "m.pt", model, epoch=7, extra={"note": 1})
        back, epoch, extra = load_checkpoint(tmp_path / "m.pt")
        assert epoch == 7
        assert extra == {"note": 1}
        assert back.spec == model.spec
        assert params_equal(model, back)
        x = np.random.default_rng(6).normal(size=(1, 12, 16)).astype(np.float32)
        a = forward(model.eval(), x, grad=False)
        b = forward(back, x, grad=False)
        assert torch.equal(a.seg_logits, b.seg_logits)
        assert torch.equal(a.rep_map, b.rep_map)

    def test_version_checked(self, tmp_path):
        model = build_model(SMALL, seed=5)
        save_checkpoint(tmp_path / "m.pt", model, epoch=0)
        payload = torch.load(tmp_path / "m.pt", weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, tmp_path / "bad.pt")
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "bad.pt")
