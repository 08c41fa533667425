import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipread3d.checkpoint import read_checkpoint
from lipread3d.checks import temporal_reach
from lipread3d.errors import ContractError, MappingError
from lipread3d.frontends import Inception, InceptionSpec, build_frontend
from lipread3d.inflation import (PretrainPlan, StageTask, adapt_input_channels, inflate_conv, inflate_network,
                                 inflated_frontend, two_round_pretrain)
from lipread3d.layers import BatchNorm, set_temporal_padding
from lipread3d.tensor import Rng, Tensor, no_grad


def _randomise_bn(net, seed=0):
    r = np.random.default_rng(seed)
    for _, m in net.modules():
        if isinstance(m, BatchNorm):
            m.running_mean[...] = r.normal(0, 0.1, m.running_mean.shape)
            m.running_var[...] = r.uniform(0.5, 2.0, m.running_var.shape)
            m.gamma.data[...] = r.uniform(0.5, 1.5, m.gamma.shape)
            m.beta.data[...] = r.normal(0, 0.1, m.beta.shape)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(0, 1000))
def test_inflated_kernel_slices_sum_to_source(N, seed):
    w = np.random.default_rng(seed).standard_normal((3, 2, 3, 3)).astype(np.float32)
    w3 = inflate_conv(w, N).data
    assert w3.shape == (3, 2, N, 3, 3)
    assert np.allclose(w3.sum(axis=2), w, atol=1e-6)
    assert np.all(w3 == w3[:, :, :1])


def test_inflate_conv_contract():
    with pytest.raises(ContractError):
        inflate_conv(np.zeros((2, 2, 3, 3)), 0)
    with pytest.raises(ContractError):
        inflate_conv(np.zeros((2, 2, 3, 3, 3)), 3)


@pytest.mark.parametrize("channels", [2, 3])
def test_channel_adaptation_preserves_response_to_equal_channels(channels):
    r = np.random.default_rng(channels)
    w = r.standard_normal((4, 1, 3, 3))
    x = r.standard_normal((3, 3))
    a = adapt_input_channels(w, channels)
    assert a.shape == (4, channels, 3, 3)
    src = np.einsum("ochw,hw->o", w, x)
    tgt = np.einsum("ochw,chw->o", a, np.repeat(x[None], channels, axis=0))
    assert np.allclose(src, tgt)


def _boring(net2d, net3d, T, mode, seed=0):
    frame = np.random.default_rng(seed).standard_normal((2, net2d.in_channels, 1, 32, 32)).astype(np.float32)
    clip = np.repeat(frame, T, axis=2)
    set_temporal_padding(net3d, mode)
    with no_grad():
        ref = net2d(Tensor(frame)).data[:, 0]
        out = net3d(Tensor(clip)).data
    return np.abs(out - ref[:, None]).max(axis=(0, 2))


@pytest.mark.parametrize("kind", ["I3D", "Shallow3D_Res2D"])
def test_boring_video_equals_the_2d_network(kind):
    net2d = build_frontend(kind, 1, "1/8", Rng(0), dims=2)
    _randomise_bn(net2d)
    net2d.eval()
    net3d, report = inflated_frontend(net2d, kind, 1, "1/8", Rng(1))
    net3d.eval()
    assert not report.fresh and not report.adapted
    T = 32
    assert _boring(net2d, net3d, T, "replicate").max() <= 1e-4
    reach = temporal_reach(net3d, T=T)
    zero = _boring(net2d, net3d, T, "zeros")
    assert zero[reach:T - reach].max() <= 1e-4
    assert zero[0] > 1e-4  # the boundary really does see the zero padding


def test_micro_inception_boring_video():
    spec = InceptionSpec(4, 4, 6, 2, 3, 3)
    m2, m3 = Inception(5, spec, Rng(0), dims=2), Inception(5, spec, Rng(1), dims=3)
    _randomise_bn(m2)
    m2.eval(), m3.eval()
    inflate_network(m2, m3)
    x = np.random.default_rng(2).standard_normal((1, 5, 1, 8, 8)).astype(np.float32)
    with no_grad():
        ref = m2(Tensor(x)).data
        set_temporal_padding(m3, "replicate")
        out = m3(Tensor(np.repeat(x, 6, axis=2))).data
    assert np.abs(out - ref).max() <= 1e-5


def test_mapping_errors():
    net2d = build_frontend("I3D", 1, "1/8", Rng(0), dims=2)
    with pytest.raises(MappingError):
        inflate_network(net2d, build_frontend("I3D", 1, "1/4", Rng(0)))
    with pytest.raises(MappingError):
        inflate_network(net2d, build_frontend("I3D", 2, "1/8", Rng(0)))
    report = inflate_network(net2d, build_frontend("I3D", 2, "1/8", Rng(0)), "average")
    assert report.adapted == ["conv3d_1a.conv"]


def test_incompatible_trunks_raise():
    net2d = build_frontend("Res2D", 1, "1/8", Rng(0), dims=2)
    net3d = build_frontend("Shallow3D_Res2D", 1, "1/8", Rng(0))
    with pytest.raises(MappingError):
        # the resnet stems take different input channels
        inflate_network(net2d, net3d)


def test_unmatched_target_layers_are_reported_fresh():
    net2d = build_frontend("I3D", 1, "1/8", Rng(0), dims=2)
    del net2d._children["conv3d_6a"]
    net3d = build_frontend("I3D", 1, "1/8", Rng(5))
    before = net3d.conv3d_6a.conv.weight.data.copy()
    report = inflate_network(net2d, net3d)
    assert report.fresh == ["conv3d_6a.conv", "conv3d_6a.bn"]
    assert np.array_equal(net3d.conv3d_6a.conv.weight.data, before)


def test_two_round_pipeline_lineage(tmp_path):
    tiny = dict(classes=3, samples_per_class=4, frame_size=(16, 16), epochs=1, batch_size=6)
    plan = PretrainPlan("I3D", "1/8", ("gray",), StageTask(**tiny), StageTask(clip_length=4, **tiny),
                        out_dir=str(tmp_path))
    out = two_round_pretrain(plan)
    stages = [e.stage for e in out.lineage]
    assert stages == ["round1", "inflated", "round2"]
    assert out.lineage[1].parent == out.lineage[0].checksum
    assert out.lineage[2].parent == out.lineage[1].checksum
    ck = read_checkpoint(out.lineage[2].path)
    assert ck.stage == "round2" and ck.parent == out.lineage[1].checksum


def test_plan_rejects_geometry_mismatch():
    from lipread3d.dataio import ClipSet
    from lipread3d.inflation import TargetTask
    from lipread3d.training import FitOptions

    data = ClipSet(np.zeros((2, 4, 24, 24), np.float32), np.array([0, 1]))
    plan = PretrainPlan("I3D", "1/8", ("gray",), StageTask(frame_size=(16, 16)), None,
                        target=TargetTask(data, None, "BiLSTM", 2, FitOptions(epochs=1)))
    with pytest.raises(ContractError):
        two_round_pretrain(plan)
