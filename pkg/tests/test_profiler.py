import numpy as np
import pytest

from yoloam import nn
from yoloam.attention import AttentionSpec
from yoloam.data import synth_shapes, to_hwc_uint8
from yoloam.detector import ModelConfig, build, read_checkpoint, save_checkpoint
from yoloam.profiler import cost_rows, cost_table, count_flops, count_params, time_inference


def test_conv_flops_convention():
    conv = nn.Conv2d(2, 4, 3, 1, 1, bias=True)
    shape, flops = conv.cost((1, 2, 5, 5))
    assert shape == (1, 4, 5, 5)
    assert flops == 2 * 9 * 2 * 4 * 25 + 4 * 25
    lin = nn.Linear(8, 3, bias=False)
    assert lin.cost((2, 8))[1] == 2 * 2 * 8 * 3


@pytest.mark.parametrize("kind", ["none", "rescbam", "gam"])
def test_count_params_equals_checkpoint_enumeration(tmp_path, kind):
    m = build(ModelConfig("nano-desk", attention=AttentionSpec(kind)))
    save_checkpoint(tmp_path / "c.npz", m)
    meta, params, buffers, _ = read_checkpoint(tmp_path / "c.npz")
    assert count_params(m) == sum(a.size for a in params.values())
    assert sum(int(np.prod(s)) for k, s in meta["shapes"].items() if k.startswith("param/")) == count_params(m)
    assert all("running" in k for k in buffers)


def test_flops_strictly_increase_with_input_size():
    m = build(ModelConfig("nano-desk", attention=AttentionSpec("cbam")))
    flops = [count_flops(m, s) for s in (64, 96, 160, 320, 640)]
    assert all(a < b for a, b in zip(flops, flops[1:]))
    assert count_flops(m, 160, batch=2) == 2 * count_flops(m, 160)


def test_cost_rows_sum_to_total():
    m = build(ModelConfig("nano-desk", attention=AttentionSpec("sa", groups=4)))
    rows = cost_rows(m, 160)
    assert sum(r[4] for r in rows) == count_flops(m, 160)
    assert sum(r[3] for r in rows) == count_params(m)


def test_cost_table_text():
    m = build(ModelConfig("nano-desk"))
    text = cost_table(m, 160)
    lines = text.splitlines()
    assert lines[0].startswith("# model size=nano-desk attention=none")
    assert "2*MACs" in lines[1]
    assert lines[-1].split()[0] == "total"
    assert f"{count_params(m):,d}" in lines[-1] and f"{count_flops(m, 160):,d}" in lines[-1]


def test_attention_adds_flops():
    base = count_flops(build(ModelConfig("nano-desk")), 160)
    for kind in ("cbam", "rescbam", "eca", "sa", "gam", "resgam"):
        assert count_flops(build(ModelConfig("nano-desk", attention=AttentionSpec(kind, groups=4))), 160) > base


def test_time_inference_positive():
    m = build(ModelConfig("nano-desk", input_size=64))
    imgs = [to_hwc_uint8(s.image) for s in synth_shapes(0, 2, size=80)]
    ms = time_inference(m, imgs, warmup=0, reps=1, input_size=64)
    assert ms > 0
    assert m.training  # mode restored
    pre = [np.zeros((3, 64, 64), np.float32)]
    assert time_inference(m, pre, warmup=1, reps=2, input_size=64) > 0
    with pytest.raises(ValueError):
        time_inference(m, imgs, reps=0)
