import numpy as np
import pytest

from dgprune import tensor as T
from dgprune.exceptions import ConfigError, FormatError, PruneError, ShapeError, TruncationError, VersionError
from dgprune.nn import (
    ArchConfig,
    FilterId,
    build_model,
    checkpoint_bytes,
    checkpoint_from_bytes,
    forward,
    load_checkpoint,
    mask_filter,
    save_checkpoint,
    trainable_parameters,
    ungated_forward_reference,
    zeroed_channel_twin,
)
from dgprune.pruning import TrainState, sgd_update


@pytest.fixture
def images():
    return np.random.default_rng(0).normal(size=(5, 3, 16, 16))


def test_default_architecture_has_80_filters():
    model = build_model(seed=0)
    assert model.layer_sizes == (16, 32, 32)
    assert model.total_filters == 80 == model.remaining_filters


def test_same_seed_bit_identical():
    a, b = build_model(seed=7), build_model(seed=7)
    assert a.parameter_bytes() == b.parameter_bytes()
    assert build_model(seed=8).parameter_bytes() != a.parameter_bytes()


@pytest.mark.parametrize("kwargs", [
    {"channels": (16, 1, 32)},
    {"channels": ()},
    {"channels": (4, 4), "kernel_sizes": (3,)},
    {"kernel_sizes": (9, 9, 9)},
    {"gate_placement": "sideways"},
])
def test_invalid_architecture_rejected(kwargs):
    with pytest.raises(ConfigError):
        ArchConfig(**kwargs)


def test_init_scheme():
    model = build_model(seed=3)
    for b in model.blocks:
        fan_in = np.prod(b.kernel.shape[1:])
        assert np.abs(b.kernel.data).max() <= np.sqrt(6 / fan_in)
        assert np.all(b.bias.data == 0) and np.all(b.gates.values == 1)
        assert not b.gates.pruned_mask.any()


def test_all_gates_zero_gives_head_bias(images):
    model = build_model(seed=1)
    model.head_bias.data = np.array([0.5, -1.0, 2.0, 0.0])
    for b in model.blocks:
        b.gates.tensor.data[:] = 0.0
    np.testing.assert_array_equal(forward(model, images).data, np.tile(model.head_bias.data, (5, 1)))


@pytest.mark.parametrize("placement", ["post_relu", "pre_relu"])
def test_unit_gates_are_transparent(images, placement):
    model = build_model(ArchConfig(gate_placement=placement), seed=2)
    np.testing.assert_array_equal(forward(model, images).data, ungated_forward_reference(model, images))


@pytest.mark.parametrize("placement", ["post_relu", "pre_relu"])
@pytest.mark.parametrize("fid", [FilterId(0, 3), FilterId(1, 0), FilterId(2, 31)])
def test_gate_zero_equals_zeroed_channel(images, placement, fid):
    model = build_model(ArchConfig(gate_placement=placement), seed=4)
    rng = np.random.default_rng(5)
    for b in model.blocks:  # trained-looking parameters
        b.bias.data = rng.normal(scale=0.1, size=b.bias.shape)
        b.gates.tensor.data = rng.uniform(0.5, 1.5, size=len(b.gates))
    twin = zeroed_channel_twin(model, [fid])
    mask_filter(model, fid)
    diff = np.abs(forward(model, images).data - forward(twin, images).data).max()
    assert diff < 1e-12


def test_mask_filter_bookkeeping(images):
    model = build_model(seed=0)
    mask_filter(model, FilterId(0, 3))
    assert model.remaining_filters == 79
    h = T.channel_scale(T.relu(T.conv2d(T.Tensor(images), model.blocks[0].kernel, model.blocks[0].bias)),
                        model.blocks[0].gates.tensor)
    assert np.all(h.data[:, 3] == 0)
    with pytest.raises(PruneError):
        mask_filter(model, FilterId(0, 3))
    with pytest.raises(PruneError):
        mask_filter(model, FilterId(0, 16))
    with pytest.raises(PruneError):
        mask_filter(model, FilterId(3, 0))


def test_pruning_all_but_one_filter_in_a_layer(images):
    model = build_model(seed=0)
    for c in range(15):
        mask_filter(model, FilterId(0, c))
    logits = forward(model, images).data
    assert np.all(np.isfinite(logits))
    assert model.blocks[0].gates.remaining == 1


def test_trainable_parameter_counts():
    model = build_model(seed=0)
    full = sum(p.n_trainable for p in trainable_parameters(model))
    expected = sum(t.data.size for t in model.all_tensors())
    assert full == expected
    for fid in [FilterId(0, 1), FilterId(1, 5), FilterId(2, 7)]:
        mask_filter(model, fid)
    gate_count = sum(p.n_trainable for p in trainable_parameters(model) if p.name.endswith("gates"))
    assert gate_count == 80 - 3


def test_optimizer_never_moves_pruned_gate(images):
    model = build_model(seed=0)
    mask_filter(model, FilterId(1, 2))
    state = TrainState(learning_rate=0.05)
    labels = np.arange(5) % 4
    for _ in range(100):
        loss = T.softmax_cross_entropy(forward(model, images), labels)
        sgd_update(model, state, T.grad(loss, [p.tensor for p in trainable_parameters(model)]))
    assert model.blocks[1].gates.values[2] == 0.0
    assert model.blocks[1].gates.values[3] != 1.0


def test_input_shape_checked():
    with pytest.raises(ShapeError):
        forward(build_model(seed=0), np.zeros((2, 3, 8, 8)))


def test_remaining_count_non_increasing():
    model = build_model(seed=0)
    counts = [model.remaining_filters]
    for c in range(10):
        mask_filter(model, FilterId(c % 3, c))
        counts.append(model.remaining_filters)
    assert counts == sorted(counts, reverse=True)
    assert counts[-1] == 80 - sum(b.gates.pruned_mask.sum() for b in model.blocks)


# ---------------------------------------------------------------- checkpoint container

def test_checkpoint_round_trip(tmp_path, images):
    model = build_model(ArchConfig(channels=(4, 6), kernel_sizes=(3, 5), gate_placement="pre_relu"), seed=9)
    mask_filter(model, FilterId(1, 4))
    model.blocks[0].gates.tensor.data[1] = 0.25
    path = tmp_path / "m.pldg"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"PLDG" and int.from_bytes(raw[4:8], "little") == 1
    loaded = load_checkpoint(path)
    assert loaded.arch == model.arch
    assert loaded.parameter_bytes() == model.parameter_bytes()
    np.testing.assert_array_equal(loaded.blocks[1].gates.pruned_mask, model.blocks[1].gates.pruned_mask)


def test_checkpoint_errors():
    raw = checkpoint_bytes(build_model(seed=0))
    with pytest.raises(FormatError, match="magic"):
        checkpoint_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(VersionError):
        checkpoint_from_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(TruncationError):
        checkpoint_from_bytes(raw[:-3])
