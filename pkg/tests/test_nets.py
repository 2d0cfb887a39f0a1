"""Architecture contracts, checkpoint round-trips, gradient verification."""

import numpy as np
import pytest
import torch

from itl.data import ProbabilityMap, Volume
from itl.gradcheck import check_model_gradients
from itl.nets import (
    DiscriminatorSpec,
    GeneratorSpec,
    SegmentorSpec,
    build_discriminator,
    build_generator,
    build_segmentor,
    discriminator_forward,
    generator_forward,
    load_checkpoint,
    params_blob,
    save_checkpoint,
    segmentor_forward,
)

torch.manual_seed(0)


def _rand_volume(shape=(8, 8, 8), channels=4, seed=0):
    rng = np.random.default_rng(seed)
    return Volume(rng.uniform(0, 1, size=(channels, *shape)).astype(np.float32),
                  channel_names=tuple(f"c{i}" for i in range(channels)))


def test_segmentor_outputs_normalized_probabilities():
    model = build_segmentor(seed=1)
    prob = segmentor_forward(model, _rand_volume((16, 16, 16)))
    assert prob.data.shape == (4, 16, 16, 16)
    prob.validate()  # per-voxel sums within 1e-5 of one


def test_zeroed_head_gives_uniform_quarter_probabilities():
    model = build_segmentor(seed=2)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    prob = segmentor_forward(model, _rand_volume((8, 8, 8)))
    assert np.allclose(prob.data, 0.25, atol=1e-7)


def test_segmentor_rejects_wrong_channel_count():
    model = build_segmentor(SegmentorSpec(in_channels=8), seed=3)
    with pytest.raises(ValueError, match="8 channels"):
        segmentor_forward(model, _rand_volume((8, 8, 8), channels=4))


def test_segmentor_rejects_indivisible_shape():
    model = build_segmentor(seed=4)  # 3 levels -> dims must divide by 4
    with pytest.raises(ValueError, match="divisible by 4"):
        segmentor_forward(model, _rand_volume((10, 8, 8)))


def test_eight_channel_segmentor_accepts_eight_channels():
    model = build_segmentor(SegmentorSpec(in_channels=8), seed=5)
    prob = segmentor_forward(model, _rand_volume((8, 8, 8), channels=8))
    prob.validate()


@pytest.mark.parametrize("shape", [(16, 16, 16), (24, 24, 24)])
def test_generator_preserves_shape(shape):
    model = build_generator(seed=6)
    out = generator_forward(model, _rand_volume(shape))
    assert out.data.shape == (4, *shape)
    assert out.channel_names == _rand_volume(shape).channel_names


def test_generator_outputs_stay_in_unit_interval():
    # >= 1000 sampled outputs across random parameter draws and inputs
    n_values = 0
    for draw in range(25):
        model = build_generator(GeneratorSpec(base_width=4, res_blocks=2), seed=100 + draw)
        out = generator_forward(model, _rand_volume((8, 8, 8), seed=draw))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0
        n_values += out.data.size
    assert n_values >= 1000


def test_generator_rejects_indivisible_shape():
    model = build_generator(seed=7)  # 2 down stages -> dims must divide by 4
    with pytest.raises(ValueError, match="divisible by 4"):
        generator_forward(model, _rand_volume((9, 8, 8)))


def test_discriminator_halves_shape_per_stage():
    model = build_discriminator(seed=8)  # 3 stages
    scores = discriminator_forward(model, _rand_volume((24, 24, 24)))
    assert scores.shape == (3, 3, 3)
    assert np.all(scores > 0.0) and np.all(scores < 1.0)


@pytest.mark.parametrize("shape,expected", [
    ((24, 24, 24), (3, 3, 3)),
    ((9, 10, 16), (2, 2, 2)),
    ((8, 8, 8), (1, 1, 1)),
])
def test_discriminator_output_shape_matches_ceil_rule(shape, expected):
    spec = DiscriminatorSpec(down_stages=3)
    assert spec.output_shape(shape) == expected
    scores = discriminator_forward(build_discriminator(spec, seed=9),
                                   Volume(np.random.default_rng(0)
                                          .uniform(0, 1, (4, *shape))
                                          .astype(np.float32)))
    assert scores.shape == expected


def test_discriminator_accepts_probability_maps_and_onehot():
    model = build_discriminator(seed=10)
    rng = np.random.default_rng(3)
    raw = rng.uniform(0.1, 1, size=(4, 8, 8, 8))
    prob = ProbabilityMap((raw / raw.sum(axis=0)).astype(np.float32))
    onehot = np.zeros((4, 8, 8, 8), dtype=np.float32)
    d, h, w = np.indices((8, 8, 8))
    onehot[rng.integers(0, 4, (8, 8, 8)), d, h, w] = 1.0
    s1 = discriminator_forward(model, prob)
    s2 = discriminator_forward(model, ProbabilityMap(onehot))
    assert s1.shape == s2.shape == (1, 1, 1)


def test_discriminator_rejects_wrong_channels():
    model = build_discriminator(seed=11)
    with pytest.raises(ValueError, match="channels"):
        discriminator_forward(model, _rand_volume((8, 8, 8), channels=3))


def test_build_is_deterministic_in_seed():
    a = params_blob(build_generator(seed=12))
    b = params_blob(build_generator(seed=12))
    c = params_blob(build_generator(seed=13))
    assert a == b
    assert a != c


@pytest.mark.parametrize("builder,vol_channels", [
    (build_segmentor, 4),
    (build_generator, 4),
    (build_discriminator, 4),
])
def test_checkpoint_round_trip_is_bit_identical(tmp_path, builder, vol_channels):
    model = builder(seed=14)
    vol = _rand_volume((8, 8, 8), channels=vol_channels, seed=14)
    x = torch.from_numpy(vol.data).unsqueeze(0)
    with torch.no_grad():
        before = model(x).numpy()
    save_checkpoint(model, tmp_path / "ckpt", step=17, rng_state=b"\x01\x02")
    model2, step, rng_state = load_checkpoint(tmp_path / "ckpt")
    assert step == 17
    assert rng_state == b"\x01\x02"
    with torch.no_grad():
        after = model2(x).numpy()
    assert np.array_equal(before, after)
    assert params_blob(model) == params_blob(model2)


def test_checkpoint_rejects_truncated_blob(tmp_path):
    save_checkpoint(build_discriminator(seed=15), tmp_path / "ckpt")
    blob = tmp_path / "ckpt.params.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ValueError, match="blob"):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_missing_header(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")


def _double_input(channels=4, seed=0, shape=(8, 8, 8)):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(0.05, 0.95, size=(1, channels, *shape))).double()


def test_segmentor_gradients_match_finite_differences():
    model = build_segmentor(SegmentorSpec(base_width=4), seed=16).double()
    x = _double_input(seed=16)

    def loss_fn():
        probs = model(x)
        return (probs[:, 1] ** 2).mean() + probs[:, 2].mean()

    check_model_gradients(loss_fn, model, n_checks=6, seed=16)


def test_generator_gradients_match_finite_differences():
    model = build_generator(GeneratorSpec(base_width=4, res_blocks=2), seed=17).double()
    x = _double_input(seed=17)

    def loss_fn():
        out = model(x)
        return ((out - 0.3) ** 2).mean()

    check_model_gradients(loss_fn, model, n_checks=6, seed=17)


def test_discriminator_gradients_match_finite_differences():
    model = build_discriminator(DiscriminatorSpec(base_width=4), seed=18).double()
    x = _double_input(seed=18)

    def loss_fn():
        return (model(x) ** 2).mean()

    check_model_gradients(loss_fn, model, n_checks=6, seed=18)
