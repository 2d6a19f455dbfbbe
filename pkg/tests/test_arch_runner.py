import json

import numpy as np
import pytest

from r2r.arch import ArchSpec, build_arch, conv_layer_count
from r2r.data import synthetic_dataset
from r2r.errors import ConfigError, InvalidMultiplier
from r2r.graph import validate_graph
from r2r.metrics import count_flops, read_csv
from r2r.runner import RunConfig, load_configs, run_experiment, run_many
from r2r.serialize import load_graph, save_graph


def test_resnet10_eighth_layout():
    net = build_arch(ArchSpec("ResNetCifar10", 1 / 8))
    assert len(net.nodes) == 9 and conv_layer_count(net) == 10
    assert net.node("conv1").layer.c_out == 8
    k = net.node("conv1").layer.kernel
    assert (k.kh, k.stride, k.padding) == (7, 2, 3)
    assert net.node("conv2_1a").layer.kernel.stride == 1
    assert net.node("conv3_1a").layer.kernel.stride == 2
    assert net.node("conv3_1b").shortcut.kind == "projection"
    assert net.shapes()["conv2_2b"] == (8, 8, 8)
    assert validate_graph(net) == []


def test_resnet18_full_width():
    net = build_arch(ArchSpec("ResNetCifar18", 1.0))
    assert conv_layer_count(net) == 18
    assert net.node("conv3_4b").layer.c_out == 128
    assert net.shapes()["conv3_4b"] == (128, 4, 4)


def test_invalid_multiplier():
    with pytest.raises(InvalidMultiplier):
        build_arch(ArchSpec("ResNetCifar10", 1 / 128))


def test_plain_and_small_variants():
    plain = build_arch(ArchSpec("ResNetCifar10", 1 / 8, residual=False))
    assert all(nd.shortcut is None for nd in plain.nodes)
    small = build_arch(ArchSpec("SmallConv"))
    assert [nd.layer.c_out for nd in small.nodes] == [16, 150]
    assert small.shapes()["fc1"] == (150, 1, 1)
    assert build_arch(ArchSpec("SmallConvWidened")).node("conv1").layer.c_out == 32


def _tiny_ds():
    return synthetic_dataset(0, 60, 3, 0.2, n_val=30, shape=(3, 16, 16))


def _cfg(**kw):
    base = {"arch": {"family": "TinyResNet", "width_multiplier": 1 / 16, "input_shape": [3, 16, 16]},
            "batch_size": 20, "epochs": 3}
    base.update(kw)
    return RunConfig.from_dict(base)


def test_widen_event_tagged_on_its_row(tmp_path):
    cfg = _cfg(transforms=[{"epoch": 2, "kind": "r2_wider"}], lr_drops=[[2, 0.2]], out_dir=str(tmp_path / "fft"))
    res = run_experiment(cfg, _tiny_ds())
    rows = read_csv(tmp_path / "fft" / "metrics.csv")
    assert [r.epoch for r in rows] == [0, 1, 2, 3]
    assert [bool(r.event) for r in rows] == [False, False, True, False]
    ev = res.events[0]
    assert ev["delta"] == 0 and ev["kind"] == "r2_wider"
    assert res.net.node("conv1").layer.c_out == 6
    fl = [r.flops for r in rows]
    assert fl[0] == 0 and fl[3] - fl[2] > fl[2] - fl[1]
    spec = ArchSpec("TinyResNet", 1 / 16, num_classes=3, input_shape=(3, 16, 16))
    per_ex = count_flops(build_arch(spec)).train_step_flops_per_example
    assert fl[1] == per_ex * 60
    assert json.loads((tmp_path / "fft" / "events.json").read_text())[0]["epoch"] == 2
    assert load_graph(tmp_path / "fft" / "final.json").num_parameters() == res.net.num_parameters()


def test_transform_from_checkpoint_at_epoch_zero(tmp_path):
    teacher = run_experiment(_cfg(epochs=2), _tiny_ds())
    save_graph(teacher.net, tmp_path / "teacher.json")
    for kind in ("r2_wider", "r2_deeper", "netmorph_wider"):
        res = run_experiment(_cfg(epochs=1, init_checkpoint=str(tmp_path / "teacher.json"),
                                  transforms=[{"epoch": 0, "kind": kind}]), _tiny_ds())
        assert res.records[0].val_acc == pytest.approx(teacher.records[-1].val_acc, abs=1e-3)
        assert abs(res.events[0]["delta"]) <= 1e-3


def test_init_schemes_both_complete():
    out = {}
    for scheme in ("he", "matched_std"):
        res = run_experiment(_cfg(transforms=[{"epoch": 1, "kind": "r2_wider", "init": {"scheme": scheme}}]),
                             _tiny_ds())
        out[scheme] = [r.val_acc for r in res.records]
    assert len(out["he"]) == len(out["matched_std"]) == 4


def test_reproducible():
    a = run_experiment(_cfg(), _tiny_ds())
    b = run_experiment(_cfg(), _tiny_ds())
    assert [r.train_loss for r in a.records[1:]] == [r.train_loss for r in b.records[1:]]


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"epochs": 3, "colour": "blue"})
    with pytest.raises(ConfigError):
        _cfg(transforms=[{"epoch": 9, "kind": "r2_wider"}])
    with pytest.raises(ConfigError):
        _cfg(transforms=[{"epoch": 1, "kind": "stretch"}])
    with pytest.raises(ConfigError):
        _cfg(dtype="float16")
    with pytest.raises(ConfigError):
        _cfg(arch={"family": "VGG"})
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_configs(p)
    p.write_text(json.dumps({"runs": [{"name": "a"}, {"name": "b", "epochs": 2}]}))
    assert [c.name for c in load_configs(p)] == ["a", "b"]


def test_missing_cifar_directory(tmp_path):
    cfg = _cfg(data={"source": "cifar10", "dir": str(tmp_path / "nowhere")}, out_dir=str(tmp_path / "o"))
    with pytest.raises(FileNotFoundError):
        run_experiment(cfg)
    assert (tmp_path / "o" / "error.json").exists()


def test_odd_widen_rejected_in_run():
    from r2r.errors import OddChannelCount
    with pytest.raises(OddChannelCount):
        run_experiment(_cfg(transforms=[{"epoch": 1, "kind": "r2_wider", "factor": 1.25}]), _tiny_ds())


def test_run_many_summary(tmp_path):
    s = run_many([_cfg(name="x", epochs=1), _cfg(name="y", epochs=1)], tmp_path, _tiny_ds())
    assert set(s) == {"x", "y"}
    assert (tmp_path / "summary.json").exists() and (tmp_path / "y" / "metrics.csv").exists()
