import numpy as np
import pytest

from vlrr.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from vlrr.errors import ConfigError, FormatError
from vlrr.gradcheck import finite_diff_check
from vlrr.losses import cross_entropy_loss, mse_loss
from vlrr.models import (
    DEFAULT_RATIOS,
    CoupledConvLayer,
    CouplingConfig,
    NetworkConfig,
    attach_classifier_head,
    build_model_i,
    build_model_iii,
    build_pcsrn,
    build_sr_subnet,
    coupled_backward,
    decouple_for_inference,
    model_i_param_count,
)
from vlrr.ops import softmax
from vlrr.rng import RandomState

TOY = NetworkConfig(n=(4, 4, 2), f=(5, 3, 1), m4=8, m5=3, f4=3, side=8)


def jitter(net, seed):
    g = np.random.default_rng(seed)
    for k, v in net.params.items():
        if k.endswith(".b"):
            v[...] = g.normal(0, 0.1, size=v.shape)
    return net


def test_default_param_count_closed_form():
    cfg = NetworkConfig()
    net = build_model_i(cfg, None)
    # 64*26 + 64*(64*9+1) + 32*(64+1) + 1024*(32*32*32+1) + 10*(1024+1)
    assert net.param_count() == model_i_param_count(cfg) == 33_606_378


def test_defaults():
    cfg = NetworkConfig()
    assert cfg.n == (64, 64, 32) and cfg.f == (5, 3, 1) and cfg.m4 == 1024 and cfg.f4 == 5
    assert DEFAULT_RATIOS == (0.5, 0.75, 0.75)
    assert CouplingConfig.from_ratios(DEFAULT_RATIOS, cfg.n).k == (32, 48, 24)


def test_coupling_validation():
    with pytest.raises(ConfigError):
        CouplingConfig.from_ratios((0.3, 0.5, 0.5), (4, 4, 2))
    with pytest.raises(ConfigError):
        CouplingConfig.from_ratios((1.5, 0, 0), (4, 4, 2))
    with pytest.raises(ConfigError):
        build_pcsrn(TOY, CouplingConfig((5, 0, 0)), RandomState(0))
    with pytest.raises(ConfigError):
        NetworkConfig(f=(4, 3, 1))


def test_he_init_scale_and_zero_bias():
    cfg = NetworkConfig(n=(64, 64, 32), m4=16, side=8)
    net = build_model_i(cfg, RandomState(0))
    w = net.params["conv2.w"]
    assert abs(w.std() - np.sqrt(2 / (64 * 9))) / np.sqrt(2 / (64 * 9)) < 0.05
    assert np.all(net.params["conv2.b"] == 0)


def test_attach_head_matches_model_i_structure():
    rs = RandomState(1)
    sr = build_sr_subnet(TOY, rs)
    clf = attach_classifier_head(sr, rs)
    assert clf.structure() == build_model_i(TOY, rs).structure()
    for name in ("conv1.w", "conv2.b", "conv3.w"):
        assert np.array_equal(clf.params[name], sr.params[name])
        assert clf.params[name] is not sr.params[name]
    assert not any("conv4" in k for k in clf.params)
    with pytest.raises(ConfigError):
        attach_classifier_head(clf, rs)


def test_partial_sharing_storage():
    cfg = NetworkConfig()
    net = build_pcsrn(cfg, CouplingConfig.from_ratios(DEFAULT_RATIOS, cfg.n), RandomState(0))
    assert net.params["conv3.shared.w"].shape[0] == 24
    assert net.params["conv3.lr.w"].shape[0] == 8 and net.params["conv3.hr.w"].shape[0] == 8
    for i, k in enumerate((32, 48, 24)):
        lr_slot = net.channels["lr"].convs[i]
        hr_slot = net.channels["hr"].convs[i]
        assert lr_slot.parts[0] == hr_slot.parts[0] == f"conv{i + 1}.shared"
        assert net.params[f"conv{i + 1}.shared.w"].shape[0] == k


def test_extreme_couplings_layout():
    none = build_pcsrn(TOY, CouplingConfig((0, 0, 0)), RandomState(0))
    assert not any("shared" in k for k in none.params)
    full = build_pcsrn(TOY, CouplingConfig.full(TOY), RandomState(0))
    assert not any(k.startswith("conv") and (".lr." in k or ".hr." in k) for k in full.params)


def test_coupled_backward_adds_lr_then_hr():
    layer = CoupledConvLayer("conv1", 2, 3)
    g = np.random.default_rng(0)
    gl = (g.normal(size=(3, 1, 1, 1)), g.normal(size=3))
    gh = (g.normal(size=(3, 1, 1, 1)), g.normal(size=3))
    out = coupled_backward(layer, gl, gh)
    assert np.array_equal(out["conv1.shared.w"], gl[0][:2] + gh[0][:2])
    assert np.array_equal(out["conv1.shared.b"], gl[1][:2] + gh[1][:2])
    assert np.array_equal(out["conv1.lr.w"], gl[0][2:])
    assert np.array_equal(out["conv1.hr.b"], gh[1][2:])


@pytest.mark.parametrize("seed", range(4))
def test_model_i_full_gradient(seed):
    g = np.random.default_rng(seed)
    net = jitter(build_model_i(TOY, RandomState(seed)), seed)
    x = g.normal(size=(2, 1, 8, 8))
    y = g.integers(0, 3, size=2)

    def loss():
        return cross_entropy_loss(softmax(net.forward(x)[0]), y)[0]

    logits, cache = net.forward(x)
    grads = net.backward(cache, cross_entropy_loss(softmax(logits), y)[1])
    assert finite_diff_check(loss, net.params, grads, max_entries=30, rng=g).passed(1e-4)


@pytest.mark.parametrize("c", [(0.0, 0.0, 0.0), (0.5, 0.75, 0.5), (1.0, 1.0, 1.0)])
def test_dual_pcsrn_gradient(c):
    g = np.random.default_rng(7)
    net = jitter(build_pcsrn(TOY, CouplingConfig.from_ratios(c, TOY.n), RandomState(2)), 2)
    x_lr, x_hr = g.normal(size=(2, 1, 8, 8)), g.normal(size=(2, 1, 8, 8))

    def loss():
        return mse_loss(net.forward(x_lr, "lr")[0], x_hr)[0] + mse_loss(net.forward(x_hr, "hr")[0], x_hr)[0]

    ol, cl = net.forward(x_lr, "lr")
    oh, ch = net.forward(x_hr, "hr")
    grads = net.dual_backward(cl, mse_loss(ol, x_hr)[1], ch, mse_loss(oh, x_hr)[1])
    assert set(grads) == set(net.params)
    assert finite_diff_check(loss, net.params, grads, max_entries=30, rng=g).passed(1e-4)


def test_dual_classifier_gradient():
    g = np.random.default_rng(8)
    rs = RandomState(3)
    net = jitter(attach_classifier_head(build_pcsrn(TOY, CouplingConfig((2, 2, 1)), rs), rs), 3)
    net.config = NetworkConfig(**{**TOY.__dict__, "dropout": 0.0})
    x_lr, x_hr = g.normal(size=(2, 1, 8, 8)), g.normal(size=(2, 1, 8, 8))
    y = g.integers(0, 3, size=2)

    def ce(x, ch):
        return cross_entropy_loss(softmax(net.forward(x, ch)[0]), y)

    ol, cl = net.forward(x_lr, "lr")
    oh, chh = net.forward(x_hr, "hr")
    grads = net.dual_backward(
        cl, cross_entropy_loss(softmax(ol), y)[1], chh, cross_entropy_loss(softmax(oh), y)[1]
    )
    rep = finite_diff_check(lambda: ce(x_lr, "lr")[0] + ce(x_hr, "hr")[0], net.params, grads, max_entries=30, rng=g)
    assert rep.passed(1e-4)


def test_pcsrn_full_matches_model_iii_forward():
    a = build_pcsrn(TOY, CouplingConfig.full(TOY), RandomState(5))
    b = build_model_iii(TOY, RandomState(5))
    for i in range(3):
        assert np.array_equal(a.params[f"conv{i + 1}.shared.w"], b.params[f"conv{i + 1}.w"])
    x = np.random.default_rng(0).normal(size=(2, 1, 8, 8))
    for ch in ("lr", "hr"):
        assert np.array_equal(a.forward(x, ch)[0], b.forward(x, ch)[0])


def test_pcsrn_no_sharing_lr_channel_matches_model_ii():
    a = build_pcsrn(TOY, CouplingConfig((0, 0, 0)), RandomState(6))
    b = build_sr_subnet(TOY, RandomState(6))
    for name in ("conv1", "conv2", "conv3"):
        assert np.array_equal(a.params[f"{name}.lr.w"], b.params[f"{name}.w"])
    assert np.array_equal(a.params["lr.conv4.w"], b.params["conv4.w"])


def test_decouple_is_model_i_and_ignores_hr():
    rs = RandomState(4)
    net = attach_classifier_head(build_pcsrn(TOY, CouplingConfig((2, 3, 1)), rs), rs)
    inf = decouple_for_inference(net)
    assert inf.structure() == build_model_i(TOY, None).structure()
    assert inf.param_count() == model_i_param_count(TOY)
    x = np.random.default_rng(1).normal(size=(3, 1, 8, 8))
    assert np.array_equal(inf.predict(x), net.predict(x, "lr"))
    g = np.random.default_rng(2)
    for k in net.params:
        if k.startswith("hr.") or ".hr." in k:
            net.params[k] += g.normal(size=net.params[k].shape) * 50
    assert np.array_equal(decouple_for_inference(net).predict(x), inf.predict(x))
    with pytest.raises(ConfigError):
        decouple_for_inference(inf)


def test_checkpoint_round_trip_dual(tmp_path):
    rs = RandomState(9)
    net = attach_classifier_head(build_pcsrn(TOY, CouplingConfig((2, 2, 1)), rs), rs)
    digest = save_checkpoint(net, tmp_path / "m.vlrc")
    back = load_checkpoint(tmp_path / "m.vlrc")
    assert len(digest) == 64
    assert back.dual and back.coupling == net.coupling and back.kind == "classifier"
    assert back.structure() == net.structure()
    for k, v in net.params.items():
        assert np.array_equal(back.params[k], v)
    assert encode_checkpoint(back) == (tmp_path / "m.vlrc").read_bytes()
    blob = encode_checkpoint(net)
    assert b"lr/conv1.shared.w" in blob and b"hr/conv1.shared.w" in blob


def test_checkpoint_round_trip_single_and_sr():
    for net in (build_model_i(TOY, RandomState(1)), build_sr_subnet(TOY, RandomState(1))):
        back = decode_checkpoint(encode_checkpoint(net))
        assert back.kind == net.kind
        assert all(np.array_equal(back.params[k], v) for k, v in net.params.items())


def test_checkpoint_rejects_corruption():
    blob = encode_checkpoint(build_model_i(TOY, RandomState(1)))
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-10])
    with pytest.raises(FormatError):
        decode_checkpoint(blob + b"\x00")
