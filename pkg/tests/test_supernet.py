import math

import numpy as np
import pytest
import torch

from imbnas.errors import CheckpointError, ConfigError, NumericError
from imbnas.harness.data import SynthSpec, synth_dataset
from imbnas.imbalance import LabeledDataset, ReweightPolicy
from imbnas.space import Genotype, MixtureParams, build_search_space, random_genotype
from imbnas.supernet import (
    BatchNorm,
    SubNetwork,
    SuperNetwork,
    TrainSchedule,
    accuracy,
    backbone_hash,
    count_parameters,
    extract_subnet,
    forward_with_mixture,
    forward_with_path,
    init_subnet,
    init_supernet,
    load_checkpoint,
    load_checkpoint_file,
    lr_at_epoch,
    norm_state,
    parameter_hash,
    recalibrate_norm_stats,
    save_checkpoint,
    save_checkpoint_file,
    train_model,
)

SMALL = build_search_space(1, 3, num_classes=4, channel_width=4)


def _x(n=5, seed=0, size=6, channels=3):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=(n, channels, size, size)).astype(np.float32))


def _data(classes=4, per_class=10, seed=0, sep=1.0):
    return synth_dataset(SynthSpec(classes, per_class, 3, 6, sep, seed))


def test_init_deterministic():
    a = init_supernet(SMALL, np.random.default_rng(3))
    b = init_supernet(SMALL, np.random.default_rng(3))
    assert parameter_hash(a.state_dict().values()) == parameter_hash(b.state_dict().values())


def test_single_op_block_count():
    space = build_search_space(2, 3, ["sep_conv_3x3"], 4, 4)
    net = init_supernet(space, np.random.default_rng(0))
    assert len(net.blocks) == space.num_edges and all(len(b) == 1 for b in net.blocks)
    assert [n for n, _ in net.named_children()] == ["stem", "classifier", "blocks"]


def test_blocks_are_disjoint():
    net = init_supernet(SMALL, np.random.default_rng(0))
    ids = [id(p) for p in net.parameters()]
    assert len(ids) == len(set(ids))


def test_classifier_shape_and_zero_bias():
    net = init_supernet(SMALL, np.random.default_rng(0))
    assert net.classifier.out_features == SMALL.num_classes
    assert torch.count_nonzero(net.classifier.bias) == 0


def test_all_zero_genotype_gives_classifier_bias():
    net = init_supernet(SMALL, np.random.default_rng(0)).eval()
    with torch.no_grad():
        net.classifier.bias.copy_(torch.tensor([0.1, -0.2, 0.3, 0.0]))
        out = forward_with_path(net, Genotype([0, 0, 0]), _x())
    assert torch.equal(out, net.classifier.bias.expand(5, -1))


def test_all_skip_two_node_cell_is_classifier_of_stem():
    space = build_search_space(1, 2, ["zero", "skip"], 4, 4)
    net = init_supernet(space, np.random.default_rng(0)).eval()
    x = _x()
    with torch.no_grad():
        expected = net.classifier(net.stem(x).mean(dim=(2, 3)))
        assert torch.equal(forward_with_path(net, Genotype([1]), x), expected)


def test_lr_schedule_examples():
    s = TrainSchedule(200, 0.1, (160, 180), 0.01)
    assert lr_at_epoch(s, 0) == 0.1
    assert lr_at_epoch(s, 159) == 0.1
    assert lr_at_epoch(s, 160) == pytest.approx(1e-3)
    assert lr_at_epoch(s, 180) == pytest.approx(1e-5)
    const = TrainSchedule(10, 0.3, ())
    assert {lr_at_epoch(const, e) for e in range(10)} == {0.3}
    lrs = [lr_at_epoch(s, e) for e in range(200)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ConfigError):
        lr_at_epoch(s, 200)


@pytest.mark.parametrize(
    "kw",
    [dict(milestones=(180, 160)), dict(milestones=(200,)), dict(decay_factor=1.0), dict(epochs=-1),
     dict(batch_size=0), dict(momentum=1.0)],
)
def test_schedule_validation(kw):
    with pytest.raises(ConfigError):
        TrainSchedule(**{**dict(epochs=200, initial_lr=0.1, milestones=(160, 180)), **kw})


def test_path_equals_extracted_subnet_train_and_eval():
    rng = np.random.default_rng(0)
    net = init_supernet(SMALL, rng)
    train_model(net, _data(), TrainSchedule(2, 0.05, (), batch_size=8), ReweightPolicy(), rng)
    x = _x(8, 1)
    for mode in ("train", "eval"):
        for _ in range(20):
            g = random_genotype(SMALL, rng)
            sub = extract_subnet(net, g)
            getattr(net, mode)()
            getattr(sub, mode)()
            with torch.no_grad():
                assert float((forward_with_path(net, g, x) - sub(x)).abs().max()) < 1e-6


def test_extraction_is_smaller_than_supernet():
    net = init_supernet(SMALL, np.random.default_rng(0))
    for g in list(SMALL.all_genotypes())[::17]:
        assert count_parameters(extract_subnet(net, g)) < count_parameters(net)


def test_genotype_space_mismatch():
    net = init_supernet(SMALL, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        forward_with_path(net, Genotype([0, 1]), _x())


def test_one_hot_mixture_matches_path():
    net = init_supernet(SMALL, np.random.default_rng(0)).eval()
    x = _x()
    for g in list(SMALL.all_genotypes())[::23]:
        with torch.no_grad():
            diff = forward_with_mixture(net, MixtureParams.one_hot(SMALL, g), x) - forward_with_path(net, g, x)
        assert float(diff.abs().max()) < 1e-3


def test_identical_ops_mixture_symmetry():
    space = build_search_space(1, 2, ["sep_conv_3x3", "sep_conv_5x5"], 4, 4)
    net = init_supernet(space, np.random.default_rng(0)).eval()
    net.blocks[0][1] = net.blocks[0][0]  # both candidates now share one parameter set
    x = _x()
    with torch.no_grad():
        mix = forward_with_mixture(net, MixtureParams([[0.0, 0.0]]), x)
        path = forward_with_path(net, Genotype([0]), x)
    assert float((mix - path).abs().max()) < 1e-6


def test_mixture_continuity():
    net = init_supernet(SMALL, np.random.default_rng(0)).double().eval()
    x = _x().double()
    a = np.random.default_rng(1).normal(size=(SMALL.num_edges, SMALL.num_ops))
    with torch.no_grad():
        base = forward_with_mixture(net, a, x)
        moved = forward_with_mixture(net, a + 1e-6, x)
        bumped = forward_with_mixture(net, a + np.eye(SMALL.num_edges, SMALL.num_ops) * 1e-6, x)
    assert float((base - moved).abs().max()) < 1e-12  # row shift is exact invariance
    assert float((base - bumped).abs().max()) < 1e-5


def test_mixture_nan_rejected():
    net = init_supernet(SMALL, np.random.default_rng(0))
    a = np.zeros((SMALL.num_edges, SMALL.num_ops))
    a[0, 0] = np.nan
    with pytest.raises(NumericError):
        forward_with_mixture(net, a, _x())


def test_zero_epochs_leaves_net_unchanged():
    net = init_supernet(SMALL, np.random.default_rng(0))
    before = parameter_hash(net.state_dict().values())
    log = train_model(net, _data(), TrainSchedule(0, 0.1, ()), ReweightPolicy(), np.random.default_rng(0))
    assert len(log) == 0 and parameter_hash(net.state_dict().values()) == before


def test_empty_dataset_rejected():
    net = init_supernet(SMALL, np.random.default_rng(0))
    empty = LabeledDataset(np.zeros((0, 3, 6, 6), np.float32), np.zeros(0, np.int64), 4)
    with pytest.raises(ConfigError):
        train_model(net, empty, TrainSchedule(1, 0.1, ()), ReweightPolicy(), np.random.default_rng(0))


def test_single_op_space_trains_like_fixed_subnet():
    space = build_search_space(1, 3, ["sep_conv_3x3"], 4, 4)
    data = _data()
    sched = TrainSchedule(3, 0.05, (2,), batch_size=8)
    sup = init_supernet(space, np.random.default_rng(5))
    sub = extract_subnet(sup, Genotype([0, 0, 0]))
    log_a = train_model(sup, data, sched, ReweightPolicy(), np.random.default_rng(9))
    log_b = train_model(sub, data, sched, ReweightPolicy(), np.random.default_rng(9))
    assert [r["loss"] for r in log_a.epochs] == pytest.approx([r["loss"] for r in log_b.epochs], rel=1e-5)
    x = _x()
    sup.eval(), sub.eval()
    with torch.no_grad():
        assert float((sup(x, Genotype([0, 0, 0])) - sub(x)).abs().max()) < 1e-5


def test_training_separable_two_class_below_log2():
    data = synth_dataset(SynthSpec(2, 40, 3, 6, 3.0, 1))
    space = build_search_space(1, 2, ["skip", "sep_conv_3x3"], 4, 2)
    net = init_supernet(space, np.random.default_rng(0))
    log = train_model(net, data, TrainSchedule(20, 0.05, (), batch_size=16), ReweightPolicy(), np.random.default_rng(0))
    assert log.epochs[-1]["loss"] < math.log(2)


def test_training_determinism(tmp_path):
    def run():
        net = init_supernet(SMALL, np.random.default_rng(1))
        log = train_model(net, _data(), TrainSchedule(2, 0.05, (1,), batch_size=8), ReweightPolicy(),
                          np.random.default_rng(2))
        return log.epochs, save_checkpoint(net)

    (la, ca), (lb, cb) = run(), run()
    assert la == lb and ca == cb


def test_update_counts_classifier_only_smaller():
    data = _data()
    sched = TrainSchedule(1, 0.05, (), batch_size=8)
    a = init_supernet(SMALL, np.random.default_rng(0))
    full = train_model(a, data, sched, ReweightPolicy(), np.random.default_rng(0))
    b = init_supernet(SMALL, np.random.default_rng(0))
    head = train_model(b, data, sched, ReweightPolicy(), np.random.default_rng(0), train_backbone=False)
    steps = math.ceil(len(data) / 8)
    assert head.updates == steps * count_parameters(b.classifier)
    assert full.updates > head.updates


def test_classifier_only_training_keeps_backbone():
    net = init_supernet(SMALL, np.random.default_rng(0))
    before = backbone_hash(net)
    train_model(net, _data(), TrainSchedule(2, 0.1, (), batch_size=8), ReweightPolicy(),
                np.random.default_rng(0), train_backbone=False)
    assert backbone_hash(net) == before


def test_recalibration_idempotent_and_params_untouched():
    rng = np.random.default_rng(0)
    net = init_supernet(SMALL, rng)
    g = Genotype([2, 3, 4])
    calib = _data(per_class=5)
    params_before = parameter_hash(p for p in net.parameters())
    recalibrate_norm_stats(net, g, calib)
    s1 = [t.clone() for pair in norm_state(net.path_modules(g)) for t in pair]
    recalibrate_norm_stats(net, g, calib)
    s2 = [t for pair in norm_state(net.path_modules(g)) for t in pair]
    assert all(torch.equal(a, b) for a, b in zip(s1, s2))
    assert parameter_hash(p for p in net.parameters()) == params_before


def test_recalibration_matches_extracted_subnet():
    rng = np.random.default_rng(0)
    net = init_supernet(SMALL, rng)
    g = Genotype([1, 2, 5])
    calib = _data(per_class=5)
    sub = extract_subnet(net, g)
    recalibrate_norm_stats(net, g, calib)
    recalibrate_norm_stats(sub, g, calib)
    a = [t for pair in norm_state(net.path_modules(g)) for t in pair]
    b = [t for pair in norm_state(sub.backbone_modules()) for t in pair]
    assert len(a) == len(b) and max(float((x - y).abs().max()) for x, y in zip(a, b)) < 1e-6


def test_recalibration_uses_population_stats():
    bn = BatchNorm(3, affine=False)
    x = torch.randn(50, 3, 4, 4)
    net = torch.nn.Sequential(bn)
    bn.calibrating = True
    net(x)
    assert torch.allclose(bn.running_mean, x.mean(dim=(0, 2, 3)))
    assert torch.allclose(bn.running_var, x.var(dim=(0, 2, 3), unbiased=False))


def test_recalibration_empty_calib():
    net = init_supernet(SMALL, np.random.default_rng(0))
    empty = LabeledDataset(np.zeros((0, 3, 6, 6), np.float32), np.zeros(0, np.int64), 4)
    with pytest.raises(ConfigError):
        recalibrate_norm_stats(net, Genotype([0, 1, 2]), empty)


def _trained_supernet():
    rng = np.random.default_rng(0)
    net = init_supernet(SMALL, rng)
    train_model(net, _data(), TrainSchedule(1, 0.05, (), batch_size=8), ReweightPolicy(), rng)
    return net.eval()


def test_checkpoint_round_trip_bit_identical(tmp_path):
    net = _trained_supernet()
    x = _x()
    path = tmp_path / "net.bin"
    save_checkpoint_file(net, path)
    loaded = load_checkpoint_file(path, SMALL)
    g = Genotype([1, 4, 2])
    with torch.no_grad():
        assert torch.equal(net(x, g), loaded(x, g))
    assert loaded.epoch_counter == 1 and loaded.rng_state == net.rng_state
    assert loaded.schedule_fingerprint == net.schedule_fingerprint


def test_subnet_extract_save_load_bit_identical():
    net = _trained_supernet()
    sub = extract_subnet(net, Genotype([3, 0, 2])).eval()
    loaded = load_checkpoint(save_checkpoint(sub))
    assert isinstance(loaded, SubNetwork) and loaded.genotype == sub.genotype
    with torch.no_grad():
        assert torch.equal(sub(_x()), loaded(_x()))


def test_checkpoint_space_mismatch():
    data = save_checkpoint(init_supernet(SMALL, np.random.default_rng(0)))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(data, SMALL.with_num_classes(5))
    assert err.value.field == "space"


def test_checkpoint_corruption_is_reported_by_field():
    data = bytearray(save_checkpoint(init_supernet(SMALL, np.random.default_rng(0))))
    header_start = 8 + 12
    cases = {
        "magic": bytes(b"X" + data[1:]),
        "format_version": bytes(data[:8] + (2).to_bytes(4, "little") + data[12:]),
        "header": bytes(data[: header_start + 5] + bytes([data[header_start + 5] ^ 0xFF]) + data[header_start + 6 :]),
        "payload": bytes(data[:-3]),
    }
    for field, blob in cases.items():
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(blob)
        assert err.value.field == field
    with pytest.raises(CheckpointError):
        load_checkpoint(bytes(data[:10]))


def test_every_single_byte_corruption_is_detected():
    data = save_checkpoint(init_subnet(build_search_space(1, 2, ["skip"], 2, 2), Genotype([0]),
                                       np.random.default_rng(0)))
    for i in range(0, len(data), 7):
        blob = bytearray(data)
        blob[i] ^= 0x5A
        with pytest.raises(CheckpointError):
            load_checkpoint(bytes(blob))


def test_accuracy_and_types():
    net = init_supernet(SMALL, np.random.default_rng(0))
    assert isinstance(net, SuperNetwork)
    acc = accuracy(net, _data(), Genotype([1, 1, 1]))
    assert 0.0 <= acc <= 1.0
