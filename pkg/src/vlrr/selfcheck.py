"""Gradient and invariant suites behind ``vlrr selfcheck``.

Each check returns ``(name, passed, detail)``. Gradient checks compare
analytic gradients with central differences in float64 over random shapes.
"""

from __future__ import annotations

import numpy as np

from .data import (
    ImageDataset,
    corrupt_salt_pepper,
    downsample_area,
    synth_dataset,
    upscale_nn,
)
from .dataset_io import decode_dataset, encode_dataset
from .gradcheck import finite_diff_check
from .losses import cross_entropy_loss, huber_loss, mse_loss
from .models import (
    CouplingConfig,
    NetworkConfig,
    attach_classifier_head,
    build_model_i,
    build_pcsrn,
    decouple_for_inference,
)
from .ops import (
    ConvParams,
    FcParams,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    relu,
    relu_backward,
    softmax,
)
from .rng import RandomState

GRAD_TOL = 1e-4
TOY = NetworkConfig(n=(4, 4, 2), f=(5, 3, 1), m4=8, m5=3, f4=3, side=8)


def _conv_case(g: np.random.Generator):
    f = int(g.choice([1, 3, 5]))
    B, C, O = (int(v) for v in g.integers(1, 4, size=3))
    H, W = (int(v) for v in g.integers(1, 7, size=2))
    x = g.normal(size=(B, C, H, W))
    params = ConvParams(g.normal(size=(O, C, f, f)), g.normal(size=O))
    up = g.normal(size=(B, O, H, W))
    gx, gw, gb = conv2d_backward(x, params, up)
    tensors = {"x": x, "w": params.weights, "b": params.bias}

    def loss():
        return float(np.sum(up * conv2d_forward(x, params)))

    return loss, tensors, {"x": gx, "w": gw, "b": gb}


def _fc_case(g: np.random.Generator):
    B, I, O = (int(v) for v in g.integers(1, 6, size=3))
    x = g.normal(size=(B, I))
    params = FcParams(g.normal(size=(O, I)), g.normal(size=O))
    up = g.normal(size=(B, O))
    gx, gw, gb = fc_backward(x, params, up)

    def loss():
        return float(np.sum(up * fc_forward(x, params)))

    return loss, {"x": x, "w": params.weights, "b": params.bias}, {"x": gx, "w": gw, "b": gb}


def _relu_case(g: np.random.Generator):
    x = g.normal(size=(int(g.integers(1, 5)), int(g.integers(1, 9))))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    up = g.normal(size=x.shape)

    def loss():
        return float(np.sum(up * relu(x)))

    return loss, {"x": x}, {"x": relu_backward(x, up)}


def _softmax_ce_case(g: np.random.Generator):
    B, K = int(g.integers(1, 6)), int(g.integers(2, 7))
    logits = g.normal(size=(B, K)) * 3
    labels = g.integers(0, K, size=B)
    _, grad = cross_entropy_loss(softmax(logits), labels)

    def loss():
        return cross_entropy_loss(softmax(logits), labels)[0]

    return loss, {"logits": logits}, {"logits": grad}


def _regression_case(g: np.random.Generator, which: str):
    shape = tuple(int(v) for v in g.integers(1, 5, size=3))
    pred = g.normal(size=shape) * 2
    target = g.normal(size=shape)
    # residuals near +-c make the central difference straddle the branch point
    r = pred - target
    near = np.abs(np.abs(r) - 1.345) < 1e-3
    pred[near] += 0.01
    fn = (lambda p, t: mse_loss(p, t)) if which == "mse" else (lambda p, t: huber_loss(p, t))
    _, grad = fn(pred, target)
    return (lambda: fn(pred, target)[0]), {"pred": pred}, {"pred": grad}


def _jitter_biases(net, g: np.random.Generator):
    # zero biases put dead-unit pre-activations exactly on the ReLU kink
    for name, v in net.params.items():
        if name.endswith(".b"):
            v[...] = g.normal(0.0, 0.1, size=v.shape)
    return net


def _model_i_case(g: np.random.Generator, seed: int):
    net = _jitter_biases(build_model_i(TOY, RandomState(seed)), g)
    B = int(g.integers(1, 4))
    x = g.normal(size=(B, 1, TOY.side, TOY.side))
    labels = g.integers(0, TOY.m5, size=B)

    def loss():
        logits, _ = net.forward(x)
        return cross_entropy_loss(softmax(logits), labels)[0]

    logits, cache = net.forward(x)
    _, g_logits = cross_entropy_loss(softmax(logits), labels)
    grads = net.backward(cache, g_logits)
    return loss, net.params, grads


def _pcsrn_case(g: np.random.Generator, seed: int):
    c = tuple(float(v) for v in g.choice([0.0, 0.5, 1.0], size=3))
    net = _jitter_biases(build_pcsrn(TOY, CouplingConfig.from_ratios(c, TOY.n), RandomState(seed)), g)
    B = int(g.integers(1, 3))
    x_lr = g.normal(size=(B, 1, TOY.side, TOY.side))
    x_hr = g.normal(size=x_lr.shape)
    use_huber = bool(g.integers(0, 2))
    fn = huber_loss if use_huber else mse_loss

    def loss():
        out_l, _ = net.forward(x_lr, "lr")
        out_h, _ = net.forward(x_hr, "hr")
        return fn(out_l, x_hr)[0] + fn(out_h, x_hr)[0]

    out_l, cache_l = net.forward(x_lr, "lr")
    out_h, cache_h = net.forward(x_hr, "hr")
    grads = net.dual_backward(cache_l, fn(out_l, x_hr)[1], cache_h, fn(out_h, x_hr)[1])
    return loss, net.params, grads


def _grad_suite(name: str, make, seed: int, repeats: int):
    worst = 0.0
    total = 0
    for r in range(repeats):
        g = np.random.default_rng([seed, r])
        loss, tensors, grads = make(g, r)
        report = finite_diff_check(loss, tensors, grads, max_entries=24, rng=g)
        worst = max(worst, report.max_rel_error)
        total += report.checked
    return name, worst < GRAD_TOL, f"max rel error {worst:.2e} over {repeats} cases, {total} entries"


GRADIENT_CASES = {
    "grad/conv2d": lambda g, r: _conv_case(g),
    "grad/fc": lambda g, r: _fc_case(g),
    "grad/relu": lambda g, r: _relu_case(g),
    "grad/softmax_cross_entropy": lambda g, r: _softmax_ce_case(g),
    "grad/mse": lambda g, r: _regression_case(g, "mse"),
    "grad/huber": lambda g, r: _regression_case(g, "huber"),
    "grad/model_i": lambda g, r: _model_i_case(g, r),
    "grad/pcsrn_dual": lambda g, r: _pcsrn_case(g, r),
}


def gradient_suite(seed: int = 0, repeats: int = 20):
    return [_grad_suite(name, make, seed, repeats) for name, make in GRADIENT_CASES.items()]


# --- invariants -------------------------------------------------------------

def _check_huber_values():
    a = huber_loss(np.array([0.5]), np.array([0.0]))[0]
    b = huber_loss(np.array([2.0]), np.array([0.0]))[0]
    ok = abs(a - 0.125) < 1e-12 and abs(b - 1.7854875) < 1e-12
    return "invariant/huber_values", ok, f"L(0.5)={a!r} L(2.0)={b!r}"


def _check_resample_identity(seed: int):
    g = np.random.default_rng(seed)
    lr = g.random((3, 1, 8, 8))
    err = float(np.max(np.abs(downsample_area(upscale_nn(lr, 4), 4) - lr)))
    return "invariant/downsample_upscale_identity", err == 0.0, f"max deviation {err}"


def _check_sp_count(seed: int):
    g = np.random.default_rng(seed)
    img = np.full((1, 32, 32), 0.5)
    changed = int(np.count_nonzero(corrupt_salt_pepper(img, 0.15, g) != img))
    return "invariant/salt_pepper_count", changed == 154, f"{changed} pixels changed (want 154)"


def _check_dataset_roundtrip(seed: int):
    ds = synth_dataset(4, 3, 32, RandomState(seed))
    back = decode_dataset(encode_dataset(ds))
    ok = isinstance(back, ImageDataset) and np.array_equal(back.images, ds.images) and np.array_equal(
        back.labels, ds.labels
    )
    return "invariant/dataset_roundtrip", bool(ok), "decode(encode(x)) == x"


def _check_shared_storage(seed: int):
    net = build_pcsrn(TOY, CouplingConfig.from_ratios((0.5, 0.75, 0.5), TOY.n), RandomState(seed))
    ok = True
    for i, layer in enumerate(net.coupled_layers()):
        slots = [net.channels[ch].convs[i] for ch in ("lr", "hr")]
        ok &= all(s.parts[0] == layer.shared for s in slots)
        ok &= net.params[layer.shared + ".w"].shape[0] == layer.k
    return "invariant/shared_storage", bool(ok), "shared filter groups stored once, referenced by both channels"


def _check_decoupled_invariance(seed: int):
    rs = RandomState(seed)
    net = attach_classifier_head(build_pcsrn(TOY, CouplingConfig.from_ratios((0.5, 0.5, 0.5), TOY.n), rs), rs)
    x = np.random.default_rng(seed).normal(size=(2, 1, TOY.side, TOY.side))
    before = decouple_for_inference(net).predict(x)
    for name in list(net.params):
        if name.startswith("hr.") or name.endswith(".hr.w") or name.endswith(".hr.b"):
            net.params[name] += 100.0
    after = decouple_for_inference(net).predict(x)
    return "invariant/decoupled_ignores_hr_private", bool(np.array_equal(before, after)), "HR-private weights perturbed"


def invariant_suite(seed: int = 0):
    return [
        _check_huber_values(),
        _check_resample_identity(seed),
        _check_sp_count(seed),
        _check_dataset_roundtrip(seed),
        _check_shared_storage(seed),
        _check_decoupled_invariance(seed),
    ]


def run_all(seed: int = 0, repeats: int = 20):
    return gradient_suite(seed, repeats) + invariant_suite(seed)
