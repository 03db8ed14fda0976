import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from reconscan.errors import (
    ChannelError,
    CheckpointError,
    GeometryError,
    PlacementError,
)
from reconscan import models as md
from reconscan.data_pipeline import Plane


def forward(module, *shape):
    module.eval()
    with torch.no_grad():
        return module(torch.rand(*shape))


class TestUNet:
    def test_bottleneck_and_output_at_native_geometry(self):
        spec = md.make_spec("unet33", 256, 176)
        model = md.build_unet33(spec)
        shapes = {}
        model.enc5.register_forward_hook(
            lambda m, i, o: shapes.__setitem__("bottleneck", tuple(o.shape))
        )
        out = forward(model, 1, 3, 256, 176)
        assert shapes["bottleneck"] == (1, 256, 16, 11)
        assert tuple(out.shape) == (1, 3, 256, 176)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_square_geometry_bottleneck(self):
        spec = md.make_spec("unet33", 256, 256)
        model = md.build_unet33(spec)
        shapes = {}
        model.enc5.register_forward_hook(
            lambda m, i, o: shapes.__setitem__("bottleneck", tuple(o.shape))
        )
        forward(model, 1, 3, 256, 256)
        assert shapes["bottleneck"] == (1, 256, 16, 16)

    def test_indivisible_geometry_rejected(self):
        with pytest.raises(GeometryError):
            md.build_unet33(md.make_spec("unet33", 250, 176))

    def test_dropout_sites(self):
        model = md.build_unet33(md.make_spec("unet33", 64, 64))
        assert isinstance(model.dropout, torch.nn.Dropout)
        assert model.dropout.p == 0.5


class TestGan:
    def test_generator_preserves_shape(self):
        generator, critic = md.build_gan33(md.make_spec("gan33", 64, 48, base_width=8))
        out = forward(generator, 2, 3, 64, 48)
        assert tuple(out.shape) == (2, 3, 64, 48)
        assert torch.isfinite(out).all()

    def test_critic_emits_finite_scalar_per_pair(self):
        generator, critic = md.build_gan33(md.make_spec("gan33", 32, 32, base_width=8))
        critic.eval()
        with torch.no_grad():
            scores = critic(torch.rand(4, 6, 32, 32))
        assert tuple(scores.shape) == (4,)
        assert torch.isfinite(scores).all()

    def test_generator_output_in_unit_range(self):
        generator, _ = md.build_gan33(md.make_spec("gan33", 32, 32, base_width=8))
        out = forward(generator, 1, 3, 32, 32)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_geometry_error(self):
        with pytest.raises(GeometryError):
            md.build_gan33(md.make_spec("gan33", 30, 32))


class TestSelfAttention:
    def test_zero_gate_is_identity(self):
        sa = md.SelfAttention2d(16)
        x = torch.rand(2, 16, 6, 5)
        with torch.no_grad():
            out = sa(x)
        assert torch.equal(out, x)

    def test_shape_preserved(self):
        sa = md.SelfAttention2d(64)
        with torch.no_grad():
            sa.gamma.fill_(0.7)
            out = sa(torch.rand(1, 64, 32, 22))
        assert tuple(out.shape) == (1, 64, 32, 22)

    def test_attention_rows_sum_to_one(self):
        sa = md.SelfAttention2d(32)
        with torch.no_grad():
            weights = sa.attention_weights(torch.rand(3, 32, 4, 4))
        sums = weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_narrow_channels_rejected(self):
        with pytest.raises(ChannelError):
            md.SelfAttention2d(4)

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=15, deadline=None)
    def test_position_permutation_equivariance(self, seed):
        # swapping two spatial positions of the input swaps the same two
        # positions of the output
        torch.manual_seed(seed)
        sa = md.SelfAttention2d(16)
        with torch.no_grad():
            sa.gamma.fill_(1.0)
            x = torch.rand(1, 16, 3, 4)
            flat = x.reshape(1, 16, -1).clone()
            flat[0, :, [1, 7]] = flat[0, :, [7, 1]]
            swapped = flat.reshape(1, 16, 3, 4)
            out = sa(x).reshape(1, 16, -1)
            out_swapped = sa(swapped).reshape(1, 16, -1)
        expected = out.clone()
        expected[0, :, [1, 7]] = expected[0, :, [7, 1]]
        assert torch.allclose(out_swapped, expected, atol=1e-6)


class TestSagan:
    def test_module_counts(self):
        generator, critic = md.build_sagan33(md.make_spec("sagan33", 64, 64, base_width=8))
        assert md.count_attention_modules(generator) == 5
        assert md.count_attention_modules(critic) == 2

    def test_closed_gates_match_plain_gan(self):
        torch.manual_seed(0)
        sagan_gen, _ = md.build_sagan33(md.make_spec("sagan33", 64, 64, base_width=8))
        gan_gen, _ = md.build_gan33(md.make_spec("gan33", 64, 64, base_width=8))
        shared = {
            k: v for k, v in sagan_gen.state_dict().items() if not k.startswith("sa.")
        }
        gan_gen.load_state_dict(shared)
        x = torch.rand(2, 3, 64, 64)
        sagan_gen.eval()
        gan_gen.eval()
        with torch.no_grad():
            a = sagan_gen(x)
            b = gan_gen(x)
        assert float((a - b).abs().max()) <= 1e-5

    def test_unknown_anchor_rejected(self):
        spec = md.make_spec(
            "sagan33", 64, 64,
            sa_generator=("enc2", "enc3", "enc4", "dec1", "nowhere"),
        )
        with pytest.raises(PlacementError):
            md.build_sagan33(spec)

    def test_wrong_anchor_count_rejected(self):
        spec = md.ModelSpec(
            kind=md.ModelKind.SAGAN33, height=64, width=64,
            sa_generator=("enc2", "enc3"), sa_critic=("conv2", "conv3"),
        )
        with pytest.raises(PlacementError):
            md.build_sagan33(spec)

    def test_low_resolution_anchor_channels(self):
        # anchoring attention on the 3-channel output stage cannot work
        spec = md.make_spec(
            "sagan33", 64, 64,
            sa_generator=("enc2", "enc3", "enc4", "dec1", "dec4"),
        )
        with pytest.raises(ChannelError):
            md.build_sagan33(spec)


@given(
    kind=st.sampled_from(list(md.ModelKind)),
    height=st.sampled_from([16, 32, 48]),
    width=st.sampled_from([16, 32, 48]),
)
@settings(max_examples=12, deadline=None)
def test_generator_preserves_geometry(kind, height, width):
    spec = md.make_spec(kind, height, width, base_width=8)
    generator, _critic = (
        (md.build_unet33(spec), None) if kind == md.ModelKind.UNET33 else md.build_model(spec)
    )
    out = forward(generator, 1, 3, height, width)
    assert tuple(out.shape) == (1, 3, height, width)


class TestParameterCounts:
    def test_same_spec_same_count(self):
        a, _ = md.build_gan33(md.make_spec("gan33", 32, 32, base_width=8))
        b, _ = md.build_gan33(md.make_spec("gan33", 32, 32, base_width=8))
        assert md.count_parameters(a) == md.count_parameters(b)

    def test_attention_adds_parameters(self):
        gan_gen, _ = md.build_gan33(md.make_spec("gan33", 32, 32, base_width=8))
        sagan_gen, _ = md.build_sagan33(md.make_spec("sagan33", 32, 32, base_width=8))
        assert md.count_parameters(sagan_gen) > md.count_parameters(gan_gen)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = md.make_spec("sagan33", 32, 32, base_width=8)
        generator, critic = md.build_sagan33(spec)
        trained = md.TrainedModel(spec, generator, critic, plane=Plane.AXIAL)
        path = tmp_path / "model.pt"
        md.save_checkpoint(path, trained)
        loaded = md.load_checkpoint(path)
        assert loaded.spec == spec
        assert loaded.plane == Plane.AXIAL
        x = np.random.default_rng(0).random((32, 32, 3), dtype=np.float32)
        np.testing.assert_allclose(loaded.reconstruct(x), trained.reconstruct(x))

    def test_spec_hash_mismatch_rejected(self, tmp_path):
        spec = md.make_spec("gan33", 32, 32, base_width=8)
        generator, critic = md.build_gan33(spec)
        path = tmp_path / "model.pt"
        md.save_checkpoint(path, md.TrainedModel(spec, generator, critic))
        other = md.make_spec("gan33", 32, 32, base_width=16)
        with pytest.raises(CheckpointError):
            md.load_checkpoint(path, expected_spec=other)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError):
            md.load_checkpoint(tmp_path / "none.pt")
