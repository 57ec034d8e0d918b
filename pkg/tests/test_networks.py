import numpy as np
import pytest
import torch

from nightdepth.errors import ConfigurationError, InputError
from nightdepth.geometry import axis_angle_from_rotation
from nightdepth.losses import LightingChange, ResidualFlowPyramid
from nightdepth.networks import (DepthNet, DepthNetConfig, MotionNet, MotionNetConfig,
                                 PoseParams, axis_angle_to_matrix, load_checkpoint,
                                 parameter_count, save_checkpoint)


@pytest.fixture(scope="module")
def depth_net():
    torch.manual_seed(0)
    return DepthNet()


@pytest.fixture(scope="module")
def motion_net():
    torch.manual_seed(1)
    return MotionNet()


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        DepthNetConfig(num_scales=3)
    with pytest.raises(ConfigurationError):
        DepthNetConfig(min_depth=2.0, max_depth=1.0)
    with pytest.raises(ConfigurationError):
        MotionNetConfig(num_encoder_stages=3)
    with pytest.raises(ConfigurationError):
        MotionNetConfig(heads=("residual_flow",))
    with pytest.raises(ConfigurationError):
        MotionNetConfig(lighting_mode="gamma")


def test_depth_outputs_bounded_and_shaped(depth_net):
    image = torch.rand(64, 64, 3)
    depths = depth_net(image)
    assert [tuple(d.shape) for d in depths] == [(64, 64), (32, 32), (16, 16), (8, 8)]
    cfg = depth_net.config
    for d in depths:
        assert d.min() >= cfg.min_depth and d.max() <= cfg.max_depth


@pytest.mark.parametrize("size", [32, 96])
def test_shape_contract_other_sizes(size):
    torch.manual_seed(0)
    net = DepthNet()
    depths = net(torch.rand(size, size, 3))
    assert [d.shape[-1] for d in depths] == [size, size // 2, size // 4, size // 8]


def test_depth_rejects_bad_shapes(depth_net):
    with pytest.raises(InputError):
        depth_net(torch.rand(60, 64, 3))
    with pytest.raises(InputError):
        depth_net(torch.rand(64, 64))


def test_depth_deterministic_in_eval(depth_net):
    depth_net.eval()
    image = torch.rand(64, 64, 3)
    a = depth_net(image)
    b = depth_net(image.clone())
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_motion_forward_outputs(motion_net):
    a, b = torch.rand(64, 64, 3), torch.rand(64, 64, 3)
    feats, pose = motion_net((a, b))
    assert len(feats) == motion_net.config.num_encoder_stages
    assert pose.axis_angle.shape == (3,) and pose.translation.shape == (3,)
    assert torch.isfinite(pose.axis_angle).all()
    # pose output is bounded by the tanh-free linear head times the 0.01 scale;
    # sanity: magnitudes stay small at init
    assert pose.translation.norm() < 1.0


def test_zero_initialised_heads_start_at_baseline(motion_net):
    a, b = torch.rand(64, 64, 3), torch.rand(64, 64, 3)
    feats, _ = motion_net((a, b))
    pyr = motion_net.decode_residual_flow(feats)
    assert isinstance(pyr, ResidualFlowPyramid)
    assert [tuple(l.shape) for l in pyr.levels] == [(64, 64, 2), (32, 32, 2), (16, 16, 2), (8, 8, 2)]
    assert all(bool((l == 0).all()) for l in pyr.levels)
    lc = motion_net.decode_lighting(feats, (64, 64))
    assert isinstance(lc, LightingChange)
    assert bool((lc.contrast == 1).all()) and bool((lc.brightness == 0).all())


def test_scale_only_mode_emits_zero_brightness():
    torch.manual_seed(2)
    net = MotionNet(MotionNetConfig(lighting_mode="scale_only"))
    # push some training noise into the head so contrast is nontrivial
    with torch.no_grad():
        net.lighting_decoder.head.weight.normal_(0, 0.1)
        net.lighting_decoder.head.bias.normal_(0, 0.1)
    feats, _ = net((torch.rand(64, 64, 3), torch.rand(64, 64, 3)))
    lc = net.decode_lighting(feats, (64, 64))
    assert lc.mode == "scale_only"
    assert bool((lc.brightness == 0).all())
    assert bool((lc.contrast > 0).all())
    lc.validate()


def test_disabled_heads_raise(motion_net):
    net = MotionNet(MotionNetConfig(heads=("pose",)))
    feats, _ = net((torch.rand(64, 64, 3), torch.rand(64, 64, 3)))
    with pytest.raises(ConfigurationError):
        net.decode_residual_flow(feats)
    with pytest.raises(ConfigurationError):
        net.decode_lighting(feats, (64, 64))


def test_residual_bound_halves_per_level():
    torch.manual_seed(3)
    net = MotionNet()
    with torch.no_grad():
        for head in net.residual_decoder.heads:
            head.weight.normal_(0, 10.0)  # saturate the tanh
            head.bias.fill_(50.0)
    feats, _ = net((torch.rand(64, 64, 3), torch.rand(64, 64, 3)))
    pyr = net.decode_residual_flow(feats)
    for s, level in enumerate(pyr.levels):
        bound = net.config.max_residual / 2 ** s
        assert level.abs().max() <= bound + 1e-5
        assert level.abs().max() > 0.9 * bound


def test_axis_angle_matrix_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(30):
        vec = rng.normal(size=3)
        vec = vec / np.linalg.norm(vec) * rng.uniform(1e-4, np.pi - 1e-3)
        mat = axis_angle_to_matrix(torch.from_numpy(vec))
        back = axis_angle_from_rotation(mat.numpy())
        assert np.abs(back - vec).max() < 1e-6


def test_pose_params_identity_and_conversion():
    params = PoseParams(axis_angle=torch.zeros(3, dtype=torch.float64),
                        translation=torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
    mat = params.matrix()
    assert torch.allclose(mat[:3, :3], torch.eye(3, dtype=torch.float64))
    pose = params.to_pose()
    assert np.allclose(pose.translation, [1, 2, 3])


def test_parameter_count_is_desk_scale(depth_net, motion_net):
    assert 5e4 < parameter_count(depth_net) < 3e5
    assert 5e4 < parameter_count(motion_net) < 4e5


def test_checkpoint_round_trip(tmp_path, depth_net, motion_net):
    path = tmp_path / "ck.npz"
    save_checkpoint(path, depth_net, motion_net, extra={"step": 7})
    d2, m2, extra = load_checkpoint(path)
    assert extra == {"step": 7}
    assert d2.config == depth_net.config
    assert m2.config == motion_net.config
    image = torch.rand(64, 64, 3)
    a = depth_net(image)
    b = d2(image)
    assert all(torch.allclose(x, y, atol=1e-6) for x, y in zip(a, b))


def test_checkpoint_version_check(tmp_path, depth_net, motion_net):
    import json

    import numpy as np
    path = tmp_path / "ck.npz"
    save_checkpoint(path, depth_net, motion_net)
    with np.load(path) as data:
        arrays = {k: np.array(data[k]) for k in data.files}
    header = json.loads(bytes(arrays["__header__"]).decode())
    header["format_version"] = 93
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(ConfigurationError):
        load_checkpoint(path)


def test_end_to_end_gradients_flow():
    # one loss evaluation must touch the depth net, the pose head and (through
    # the zero-init heads) leave only the decoders' inner layers gradient-free
    torch.manual_seed(4)
    from nightdepth.trainer import TrainConfig, Trainer
    from nightdepth import losses as L
    from nightdepth.geometry import reproject, reconstruct, Intrinsics

    depth_net = DepthNet()
    motion_net = MotionNet()
    intr = Intrinsics(fx=64, fy=64, cx=31.5, cy=31.5, width=64, height=64)
    a = torch.rand(64, 64, 3)
    b = torch.rand(64, 64, 3)
    depth = depth_net(a)[0]
    feats, pose = motion_net((a, b))
    pyr = motion_net.decode_residual_flow(feats)
    lc = motion_net.decode_lighting(feats, (64, 64))
    corr = reproject(depth, pose.matrix(), intr)
    recon, mask = reconstruct(b, corr, pyr.full_resolution)
    recon = L.apply_lighting(lc, recon)
    loss_map, loss = L.photometric_loss(a, recon, mask=mask)
    total = loss + 1e-3 * L.residual_sparsity_loss(pyr) + 1e-3 * L.smoothness_loss(depth, a)
    total.backward()

    def grad_stats(net):
        zero, nonzero = 0, 0
        for p in net.parameters():
            if p.grad is None or not bool(p.grad.any()):
                zero += 1
            else:
                assert torch.isfinite(p.grad).all()
                nonzero += 1
        return zero, nonzero

    _, depth_nonzero = grad_stats(depth_net)
    assert depth_nonzero > 0
    zero, nonzero = grad_stats(motion_net)
    assert nonzero > 0  # encoder + pose head + output heads receive gradient
