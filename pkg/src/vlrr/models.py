"""Network builders for the five model variants.

A ``Network`` holds a flat ``params`` dict (name -> float64 array) and one or
two channels. Each channel is a fixed chain of conv slots, optionally followed
by the fc4/fc5 classifier head. A conv slot's filter bank is the concatenation
of one or more parameter groups along the filter axis; that is how partial
sharing works: in a coupled layer both channels list the same ``shared`` group
first, followed by their own private group. A shared group is a single array,
so an update made through either channel is seen by both.

Parameter naming::

    single channel       conv1.w  conv1.b ... conv4.w  fc4.w  fc5.w
    dual, coupled        conv1.shared.w  conv1.lr.w  conv1.hr.w ...
                         lr.conv4.w  hr.conv4.w  lr.fc4.w  hr.fc5.b ...
    dual, tied (III)     conv1.w ... (both channels read the same group)

Channel ``lr`` consumes LR inputs, channel ``hr`` consumes HR inputs. A single
channel network uses the name ``lr`` for its only channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import (
    ConvParams,
    FcParams,
    conv2d_backward,
    conv2d_forward,
    dropout,
    dropout_backward,
    fc_backward,
    fc_forward,
    relu,
    relu_backward,
    softmax,
)
from .rng import RandomState

GRID_STEP = 0.25


@dataclass(frozen=True)
class NetworkConfig:
    n: tuple[int, int, int] = (64, 64, 32)
    f: tuple[int, int, int] = (5, 3, 1)
    m4: int = 1024
    m5: int = 10
    f4: int = 5  # reconstruction layer filter size
    side: int = 32  # input height and width
    dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "f", tuple(int(v) for v in self.f))
        if len(self.n) != 3 or len(self.f) != 3:
            raise ConfigError("n and f need exactly three entries")
        if min(self.n) < 1 or min(self.f) < 1 or self.m4 < 1 or self.m5 < 1 or self.side < 1:
            raise ConfigError("network sizes must be positive")
        if any(v % 2 == 0 for v in (*self.f, self.f4)):
            raise ConfigError(f"filter sizes must be odd, got f={self.f}, f4={self.f4}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def fc_in(self) -> int:
        return self.n[2] * self.side * self.side


@dataclass(frozen=True)
class CouplingConfig:
    """Number of filters ``k`` shared between the two channels, per layer."""

    k: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(int(v) for v in self.k))
        if len(self.k) != 3 or min(self.k) < 0:
            raise ConfigError(f"k needs three nonnegative entries, got {self.k}")

    @classmethod
    def from_ratios(cls, c, n) -> "CouplingConfig":
        k = []
        for ci, ni in zip(c, n):
            if not 0.0 <= ci <= 1.0:
                raise ConfigError(f"coupled ratio must be in [0, 1], got {ci}")
            ki = ci * ni
            if abs(ki - round(ki)) > 1e-9:
                raise ConfigError(f"c={ci} does not give a whole number of filters for n={ni}")
            k.append(int(round(ki)))
        return cls(tuple(k))

    @classmethod
    def full(cls, config: NetworkConfig) -> "CouplingConfig":
        return cls(config.n)

    def ratios(self, config: NetworkConfig) -> tuple[float, float, float]:
        return tuple(k / n for k, n in zip(self.k, config.n))

    def validate(self, config: NetworkConfig) -> None:
        for i, (k, n) in enumerate(zip(self.k, config.n), 1):
            if k > n:
                raise ConfigError(f"k{i}={k} exceeds n{i}={n}")


DEFAULT_RATIOS = (0.50, 0.75, 0.75)


@dataclass(frozen=True)
class ConvSlot:
    name: str
    parts: tuple[str, ...]  # parameter group prefixes, concatenated along filters
    relu: bool = True


@dataclass(frozen=True)
class Channel:
    convs: tuple[ConvSlot, ...]
    fcs: tuple[str, ...] = ()  # (fc4 prefix, fc5 prefix) or empty for SR channels


@dataclass(frozen=True)
class CoupledConvLayer:
    """View of one partially shared layer: groups ``shared``, ``lr`` and ``hr``.

    Shared filters occupy indices ``0..k-1`` of each channel's filter bank.
    """

    name: str
    k: int
    n: int

    @property
    def shared(self) -> str:
        return f"{self.name}.shared"

    def private(self, channel: str) -> str:
        return f"{self.name}.{channel}"

    def parts(self, channel: str) -> tuple[str, ...]:
        out = []
        if self.k > 0:
            out.append(self.shared)
        if self.k < self.n:
            out.append(self.private(channel))
        return tuple(out)

    def effective(self, params, channel: str) -> ConvParams:
        return _group_params(params, self.parts(channel))


def coupled_backward(layer: CoupledConvLayer, lr_grads, hr_grads) -> dict[str, np.ndarray]:
    """Merge per-channel gradients of a coupled layer into per-group gradients.

    ``lr_grads`` and ``hr_grads`` are ``(grad_weights, grad_bias)`` of each
    channel's full n-filter bank. Shared rows get the LR contribution plus the HR
    contribution (added in that order); private rows pass through.
    """
    k = layer.k
    (gw_lr, gb_lr), (gw_hr, gb_hr) = lr_grads, hr_grads
    out = {}
    if k > 0:
        out[layer.shared + ".w"] = gw_lr[:k] + gw_hr[:k]
        out[layer.shared + ".b"] = gb_lr[:k] + gb_hr[:k]
    if k < layer.n:
        out[layer.private("lr") + ".w"] = gw_lr[k:].copy()
        out[layer.private("lr") + ".b"] = gb_lr[k:].copy()
        out[layer.private("hr") + ".w"] = gw_hr[k:].copy()
        out[layer.private("hr") + ".b"] = gb_hr[k:].copy()
    return out


def _group_params(params, parts) -> ConvParams:
    if len(parts) == 1:
        return ConvParams(params[parts[0] + ".w"], params[parts[0] + ".b"])
    w = np.concatenate([params[p + ".w"] for p in parts], axis=0)
    b = np.concatenate([params[p + ".b"] for p in parts], axis=0)
    return ConvParams(w, b)


def _accumulate(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


@dataclass
class Network:
    variant: str
    config: NetworkConfig
    params: dict[str, np.ndarray]
    channels: dict[str, Channel]
    coupling: CouplingConfig | None = None
    tied: bool = False  # dual network whose conv1-3 are one group (explicit Model III)
    meta: dict = field(default_factory=dict)

    # --- structure ---------------------------------------------------------

    @property
    def dual(self) -> bool:
        return len(self.channels) == 2

    @property
    def kind(self) -> str:
        return "classifier" if next(iter(self.channels.values())).fcs else "sr"

    def structure(self) -> tuple:
        """Topology signature: per channel, the effective layer shapes in order."""
        sig = []
        for ch_name in sorted(self.channels):
            ch = self.channels[ch_name]
            layers = []
            for slot in ch.convs:
                p = _group_params(self.params, slot.parts)
                layers.append(("conv", p.weights.shape, slot.relu))
            for fc in ch.fcs:
                layers.append(("fc", self.params[fc + ".w"].shape))
            sig.append(tuple(layers))
        return tuple(sig)

    def channel_param_names(self, channel: str) -> list[str]:
        ch = self.channels[channel]
        names = []
        for slot in ch.convs:
            for part in slot.parts:
                names += [part + ".w", part + ".b"]
        for fc in ch.fcs:
            names += [fc + ".w", fc + ".b"]
        return names

    def param_count(self, channel: str | None = None) -> int:
        names = self.params if channel is None else self.channel_param_names(channel)
        return int(sum(self.params[n].size for n in names))

    def coupled_layers(self) -> list[CoupledConvLayer]:
        if self.coupling is None:
            return []
        return [
            CoupledConvLayer(f"conv{i + 1}", k, n)
            for i, (k, n) in enumerate(zip(self.coupling.k, self.config.n))
        ]

    def copy(self) -> "Network":
        return replace(self, params={k: v.copy() for k, v in self.params.items()}, meta=dict(self.meta))

    # --- compute -----------------------------------------------------------

    def forward(self, x: np.ndarray, channel: str = "lr", training: bool = False, rng=None):
        """Run one channel. Returns ``(output, cache)``.

        ``output`` is the reconstruction for SR channels and the logits for
        classifier channels.
        """
        if x.ndim != 4 or x.shape[1] != 1:
            raise DimensionError("shape", "(batch, 1, H, W)", x.shape, "Network.forward")
        ch = self.channels[channel]
        convs = []
        a = x
        for slot in ch.convs:
            p = _group_params(self.params, slot.parts)
            z = conv2d_forward(a, p)
            convs.append((slot, a, z, p))
            a = relu(z) if slot.relu else z
        cache = {"channel": channel, "convs": convs}
        if not ch.fcs:
            return a, cache
        fc4_name, fc5_name = ch.fcs
        flat = a.reshape(a.shape[0], -1)
        fc4 = FcParams(self.params[fc4_name + ".w"], self.params[fc4_name + ".b"])
        fc5 = FcParams(self.params[fc5_name + ".w"], self.params[fc5_name + ".b"])
        z4 = fc_forward(flat, fc4)
        h4 = relu(z4)
        d4, mask = dropout(h4, self.config.dropout, rng, training)
        logits = fc_forward(d4, fc5)
        cache["fc"] = (a.shape, flat, z4, d4, mask, fc4, fc5)
        return logits, cache

    def predict(self, x: np.ndarray, channel: str = "lr", batch_size: int = 256) -> np.ndarray:
        """Class probabilities (evaluation mode, no dropout)."""
        out = []
        for start in range(0, len(x), batch_size):
            logits, _ = self.forward(x[start : start + batch_size], channel)
            out.append(softmax(logits))
        return np.concatenate(out, axis=0)

    def reconstruct(self, x: np.ndarray, channel: str = "lr", batch_size: int = 256) -> np.ndarray:
        out = [self.forward(x[s : s + batch_size], channel)[0] for s in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def channel_backward(self, cache, grad_out: np.ndarray, stop_at: int = 0):
        """Backward through one channel.

        Returns ``(fc_grads, conv_grads)``: ``fc_grads`` maps parameter names to
        gradients, ``conv_grads`` lists ``(slot, grad_weights, grad_bias)`` of
        each slot's full filter bank, shallowest first. Conv slots with index
        below ``stop_at`` are skipped (used by layer-wise pre-training).
        """
        grads: dict[str, np.ndarray] = {}
        g = grad_out
        ch = self.channels[cache["channel"]]
        if "fc" in cache:
            conv_shape, flat, z4, d4, mask, fc4, fc5 = cache["fc"]
            fc4_name, fc5_name = ch.fcs
            g, gw, gb = fc_backward(d4, fc5, g)
            grads[fc5_name + ".w"], grads[fc5_name + ".b"] = gw, gb
            g = relu_backward(z4, dropout_backward(g, mask))
            g, gw, gb = fc_backward(flat, fc4, g)
            grads[fc4_name + ".w"], grads[fc4_name + ".b"] = gw, gb
            g = g.reshape(conv_shape)
        conv_grads = []
        for idx in range(len(cache["convs"]) - 1, stop_at - 1, -1):
            slot, a, z, p = cache["convs"][idx]
            if slot.relu:
                g = relu_backward(z, g)
            gx, gw, gb = conv2d_backward(a, p, g, input_grad=idx > 0)
            conv_grads.append((slot, gw, gb))
            g = gx
        conv_grads.reverse()
        return grads, conv_grads

    def _split_slot(self, slot: ConvSlot, gw, gb, grads: dict) -> None:
        start = 0
        for part in slot.parts:
            size = self.params[part + ".w"].shape[0]
            _accumulate(grads, part + ".w", gw[start : start + size])
            _accumulate(grads, part + ".b", gb[start : start + size])
            start += size

    def backward(self, cache, grad_out: np.ndarray, stop_at: int = 0) -> dict[str, np.ndarray]:
        """Parameter gradients of one channel's output given ``grad_out``."""
        grads, conv_grads = self.channel_backward(cache, grad_out, stop_at)
        for slot, gw, gb in conv_grads:
            self._split_slot(slot, gw, gb, grads)
        return grads

    def dual_backward(self, cache_lr, grad_lr, cache_hr, grad_hr, stop_at: int = 0):
        """Gradients of the summed loss of both channels.

        Coupled layers are merged with ``coupled_backward``; everything else is
        accumulated LR contribution first.
        """
        fc_lr, conv_lr = self.channel_backward(cache_lr, grad_lr, stop_at)
        fc_hr, conv_hr = self.channel_backward(cache_hr, grad_hr, stop_at)
        grads: dict[str, np.ndarray] = {}
        for name, g in fc_lr.items():
            _accumulate(grads, name, g)
        for name, g in fc_hr.items():
            _accumulate(grads, name, g)
        coupled = {layer.name: layer for layer in self.coupled_layers()}
        for (slot, gw_l, gb_l), (slot_h, gw_h, gb_h) in zip(conv_lr, conv_hr):
            layer = coupled.get(slot.name)
            if layer is not None and slot.name == slot_h.name:
                for name, g in coupled_backward(layer, (gw_l, gb_l), (gw_h, gb_h)).items():
                    _accumulate(grads, name, g)
            else:
                self._split_slot(slot, gw_l, gb_l, grads)
                self._split_slot(slot_h, gw_h, gb_h, grads)
        return grads


# --- builders ---------------------------------------------------------------

def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class _Init:
    """Draws weights from named init sub-streams, one generator per stream."""

    def __init__(self, rng: RandomState | None):
        self.rng = rng
        self.streams: dict[str, np.random.Generator] = {}

    def conv(self, params, prefix, stream, count, in_ch, f):
        shape = (count, in_ch, f, f)
        if self.rng is None:
            params[prefix + ".w"] = np.zeros(shape)
        else:
            g = self.streams.setdefault(stream, self.rng.stream(stream))
            params[prefix + ".w"] = _he(g, shape, in_ch * f * f)
        params[prefix + ".b"] = np.zeros(count)

    def fc(self, params, prefix, stream, out_f, in_f):
        if self.rng is None:
            params[prefix + ".w"] = np.zeros((out_f, in_f))
        else:
            g = self.streams.setdefault(stream, self.rng.stream(stream))
            params[prefix + ".w"] = _he(g, (out_f, in_f), in_f)
        params[prefix + ".b"] = np.zeros(out_f)


def _in_channels(config: NetworkConfig, i: int) -> int:
    return 1 if i == 0 else config.n[i - 1]


def _single(variant, config, kind, rng) -> Network:
    init = _Init(rng)
    params: dict[str, np.ndarray] = {}
    slots = []
    for i in range(3):
        name = f"conv{i + 1}"
        init.conv(params, name, "init/lr", config.n[i], _in_channels(config, i), config.f[i])
        slots.append(ConvSlot(name, (name,)))
    fcs: tuple[str, ...] = ()
    if kind == "sr":
        init.conv(params, "conv4", "init/lr", 1, config.n[2], config.f4)
        slots.append(ConvSlot("conv4", ("conv4",), relu=False))
    else:
        init.fc(params, "fc4", "head/lr", config.m4, config.fc_in)
        init.fc(params, "fc5", "head/lr", config.m5, config.m4)
        fcs = ("fc4", "fc5")
    return Network(variant, config, params, {"lr": Channel(tuple(slots), fcs)})


def _dual(variant, config, coupling, kind, rng, tied=False) -> Network:
    init = _Init(rng)
    params: dict[str, np.ndarray] = {}
    slots: dict[str, list[ConvSlot]] = {"lr": [], "hr": []}
    for i in range(3):
        in_ch, f = _in_channels(config, i), config.f[i]
        name = f"conv{i + 1}"
        if tied:
            init.conv(params, name, "init/shared", config.n[i], in_ch, f)
            for ch in slots:
                slots[ch].append(ConvSlot(name, (name,)))
            continue
        layer = CoupledConvLayer(name, coupling.k[i], config.n[i])
        if layer.k > 0:
            init.conv(params, layer.shared, "init/shared", layer.k, in_ch, f)
        if layer.k < layer.n:
            for ch in ("lr", "hr"):
                init.conv(params, layer.private(ch), f"init/{ch}", layer.n - layer.k, in_ch, f)
        for ch in slots:
            slots[ch].append(ConvSlot(name, layer.parts(ch)))
    channels = {}
    for ch in ("lr", "hr"):
        fcs: tuple[str, ...] = ()
        if kind == "sr":
            init.conv(params, f"{ch}.conv4", f"init/{ch}", 1, config.n[2], config.f4)
            slots[ch].append(ConvSlot("conv4", (f"{ch}.conv4",), relu=False))
        else:
            init.fc(params, f"{ch}.fc4", f"head/{ch}", config.m4, config.fc_in)
            init.fc(params, f"{ch}.fc5", f"head/{ch}", config.m5, config.m4)
            fcs = (f"{ch}.fc4", f"{ch}.fc5")
        channels[ch] = Channel(tuple(slots[ch]), fcs)
    return Network(variant, config, params, channels, None if tied else coupling, tied)


def build_model_i(config: NetworkConfig, rng: RandomState) -> Network:
    """Baseline: conv1-conv3 (ReLU) -> fc4 (ReLU, dropout) -> fc5."""
    return _single("I", config, "classifier", rng)


def build_sr_subnet(config: NetworkConfig, rng: RandomState) -> Network:
    """conv1-conv3 (ReLU) plus a linear single-filter conv4 reconstruction layer."""
    return _single("II", config, "sr", rng)


def build_pcsrn(config: NetworkConfig, coupling: CouplingConfig, rng: RandomState, variant: str = "IV") -> Network:
    """Dual-channel SR network (LR->HR and HR->HR) sharing ``k_i`` filters per layer."""
    coupling.validate(config)
    return _dual(variant, config, coupling, "sr", rng)


def build_model_iii(config: NetworkConfig, rng: RandomState) -> Network:
    """Fully coupled dual SR network with conv1-conv3 held as one group.

    Numerically this is ``build_pcsrn`` with ``k = n``; it is kept as a separate
    wiring (no shared/private split) to cross-check the coupled machinery.
    """
    return _dual("III", config, CouplingConfig.full(config), "sr", rng, tied=True)


def attach_classifier_head(network: Network, rng: RandomState, config: NetworkConfig | None = None) -> Network:
    """Drop every conv4 and add fresh fc4/fc5 heads (one per channel).

    Conv1-conv3 weights are copied unchanged; for dual networks shared groups
    stay single entries. ``config`` may override ``m5``/``dropout``/``m4`` but
    must keep the convolutional part identical.
    """
    if network.kind != "sr":
        raise ConfigError("network already has classifier heads")
    config = config or network.config
    if (config.n, config.f, config.side) != (network.config.n, network.config.f, network.config.side):
        raise ConfigError("attach_classifier_head cannot change the convolutional layers")
    init = _Init(rng)
    params = {k: v.copy() for k, v in network.params.items() if "conv4" not in k}
    channels = {}
    for ch, chan in network.channels.items():
        prefix = "" if not network.dual else f"{ch}."
        init.fc(params, prefix + "fc4", f"head/{ch}", config.m4, config.fc_in)
        init.fc(params, prefix + "fc5", f"head/{ch}", config.m5, config.m4)
        convs = tuple(s for s in chan.convs if s.name != "conv4")
        channels[ch] = Channel(convs, (prefix + "fc4", prefix + "fc5"))
    return Network(network.variant, config, params, channels, network.coupling, network.tied, dict(network.meta))


def decouple_for_inference(network: Network) -> Network:
    """Standalone single-channel classifier from the LR channel of a dual network.

    Each conv layer becomes ``[shared || lr-private]`` copied into one group, the
    LR head is kept, everything HR-only is dropped. The result has Model I
    topology.
    """
    if not network.dual:
        raise ConfigError("decouple_for_inference needs a dual-channel network")
    if network.kind != "classifier":
        raise ConfigError("attach classifier heads before decoupling")
    lr = network.channels["lr"]
    params: dict[str, np.ndarray] = {}
    slots = []
    for slot in lr.convs:
        p = _group_params(network.params, slot.parts)
        params[slot.name + ".w"] = p.weights.copy()
        params[slot.name + ".b"] = p.bias.copy()
        slots.append(ConvSlot(slot.name, (slot.name,)))
    for src, dst in zip(lr.fcs, ("fc4", "fc5")):
        params[dst + ".w"] = network.params[src + ".w"].copy()
        params[dst + ".b"] = network.params[src + ".b"].copy()
    meta = dict(network.meta, decoupled_from=network.variant)
    return Network(network.variant, network.config, params, {"lr": Channel(tuple(slots), ("fc4", "fc5"))}, meta=meta)


def empty_network(variant, config, kind, coupling=None, dual=False, tied=False) -> Network:
    """Zero-filled network with the given layout (used when loading checkpoints)."""
    if dual:
        return _dual(variant, config, coupling or CouplingConfig.full(config), kind, None, tied)
    return _single(variant, config, kind, None)


def model_i_param_count(config: NetworkConfig) -> int:
    """Closed-form parameter total of the single-channel classifier."""
    n1, n2, n3 = config.n
    f1, f2, f3 = config.f
    conv = n1 * (1 * f1 * f1 + 1) + n2 * (n1 * f2 * f2 + 1) + n3 * (n2 * f3 * f3 + 1)
    fc = config.m4 * (config.fc_in + 1) + config.m5 * (config.m4 + 1)
    return conv + fc
