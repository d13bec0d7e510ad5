import numpy as np
import pytest

import gradsuite
from yoloam import nn
from yoloam import tensor as T


def t64(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def conv_params(cin, cout, k, bias):
    return cout * cin * k * k + (cout if bias else 0)


def cbs_params(cin, cout, k):
    return conv_params(cin, cout, k, False) + 2 * cout


def test_conv_param_count():
    assert nn.Conv2d(2, 4, 3).num_params() == 76


def test_cbs_shapes():
    x = t64(np.random.default_rng(0).standard_normal((1, 3, 8, 8)))
    assert nn.CBS(3, 5, 3, 1).to(np.float64)(x).shape == (1, 5, 8, 8)
    assert nn.CBS(3, 5, 3, 2).to(np.float64)(x).shape == (1, 5, 4, 4)


def test_cbs_eval_with_unit_stats_is_silu_conv():
    rng = np.random.default_rng(1)
    m = nn.CBS(3, 4, 3).to(np.float64).eval()
    bn = m.bn
    bn._buffers["running_mean"][:] = 0
    bn._buffers["running_var"][:] = 1 - bn.eps  # so sqrt(var + eps) == 1
    x = t64(rng.standard_normal((2, 3, 6, 6)))
    conv = T.conv2d(x, m.conv.weight, None, 1, 1).data
    np.testing.assert_allclose(m(x).data, conv / (1 + np.exp(-conv)), atol=1e-12)


def test_c2f_shape_and_closed_form_params():
    m = nn.C2f(8, 8, 1, True)
    x = T.Tensor(np.zeros((1, 8, 4, 4)))
    assert m(x).shape == (1, 8, 4, 4)
    for c1, c2, n in [(8, 8, 1), (16, 32, 2), (12, 6, 3)]:
        c = c2 // 2
        expected = cbs_params(c1, 2 * c, 1) + n * 2 * cbs_params(c, c, 3) + cbs_params((2 + n) * c, c2, 1)
        assert nn.C2f(c1, c2, n).num_params() == expected


def test_c2f_rejects_odd_channels():
    with pytest.raises(ValueError, match="even"):
        nn.C2f(8, 7)


def test_bottleneck_zero_weights_shortcut_passes_input():
    m = nn.Bottleneck(4, 4, shortcut=True).to(np.float64).eval()
    for p in (m.cv1.conv.weight, m.cv2.conv.weight):
        p.data[:] = 0
    x = t64(np.random.default_rng(2).standard_normal((1, 4, 5, 5)))
    # zero conv -> BN(0) = beta = 0 -> SiLU(0) = 0, so the residual branch adds nothing
    np.testing.assert_array_equal(m(x).data, x.data)
    m2 = nn.Bottleneck(4, 4, shortcut=False).to(np.float64).eval()
    m2.cv1.conv.weight.data[:] = 0
    m2.cv2.conv.weight.data[:] = 0
    assert np.all(m2(x).data == 0)


def test_sppf_shape():
    m = nn.SPPF(8, 16)
    assert m(T.Tensor(np.zeros((2, 8, 5, 5)))).shape == (2, 16, 5, 5)
    assert m.num_params() == cbs_params(8, 4, 1) + cbs_params(16, 16, 1)


def test_mlp2_examples():
    m = nn.MLP2(8, 2).to(np.float64)
    for p in m.parameters():
        p.data[:] = 0
    assert np.all(m(t64(np.ones((3, 8)))).data == 0)
    ident = nn.MLP2(4, 1).to(np.float64)
    for lin in (ident.fc1, ident.fc2):
        lin.weight.data = np.eye(4)
        lin.bias.data[:] = 0
    x = np.abs(np.random.default_rng(3).standard_normal((5, 4)))
    np.testing.assert_array_equal(ident(t64(x)).data, x)
    with pytest.raises(ValueError, match="divide"):
        nn.MLP2(10, 4)


def test_blocks_preserve_batch_and_spatial_dims():
    x = T.Tensor(np.zeros((3, 8, 6, 6)))
    for m in (nn.C2f(8, 8, 2), nn.Bottleneck(8, 8), nn.SPPF(8, 8), nn.CBS(8, 8, 3)):
        s = m(x).shape
        assert s[0] == 3 and s[2:] == (6, 6)
    assert nn.CBS(8, 8, 3, 2)(x).shape[2:] == (3, 3)


def test_num_params_excludes_bn_buffers():
    for m in (nn.C2f(16, 32, 2), nn.SPPF(16, 16), nn.Conv2d(3, 5, 3)):
        buffers = sum(b.size for _, b in m.named_buffers())
        assert m.num_params() == sum(v.size for v in m.state_dict().values()) - buffers


def test_state_dict_roundtrip_and_mismatch():
    a, b = nn.C2f(8, 8, 1, rng=np.random.default_rng(0)), nn.C2f(8, 8, 1, rng=np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert ka == kb and np.array_equal(pa.data, pb.data)
    with pytest.raises(KeyError):
        b.load_state_dict({})
    state = a.state_dict()
    state["cv1.conv.weight"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(ValueError, match="shape"):
        b.load_state_dict(state)


def test_train_eval_flags_propagate():
    m = nn.C2f(8, 8, 2)
    m.eval()
    assert all(not sub.training for _, sub in m.named_modules())
    m.train()
    assert all(sub.training for _, sub in m.named_modules())


@pytest.mark.parametrize("name", sorted(k for k in gradsuite.ALL if k.startswith("block:")))
def test_block_gradients(name):
    worst = max(gradsuite.run_case(name, s) for s in gradsuite.SEEDS)
    assert worst < gradsuite.TOL, f"{name}: {worst:.2e}"
