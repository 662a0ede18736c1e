"""Small batch-normalized encoder-decoder segmentation network.

The backbone is a stack of conv-BN-ReLU blocks with strides that
downsample the frame; the head is one more block, a 1x1 classifier,
and a nearest-neighbor upsample back to the input resolution.  Every
parameter lives in a named store ("backbone.block0.conv.weight",
"head.block0.bn.scale", ...), which is what lets adaptation methods
select regions (backbone/head) and scopes (BN affine only / all
weights) by name.

BN layers never own their normalization choice: the forward pass is
told whether to use the frozen training statistics, the incoming
batch's moments, or the dynamic interpolation between them.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, conv2d, batchnorm2d, relu, upsample_nearest
from .errors import ConfigError, NumericError, ShapeError
from .optim import ParamStore
from .rng import PURPOSE_MODEL_INIT, stream
from .stats import BNAdaptState, ChannelStats, batch_stats, beta_step, interpolate_stats

BN_MODES = ("source", "batch", "interpolated")


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int = 3
    num_classes: int = 14
    backbone_widths: tuple = (16, 32, 64)
    backbone_strides: tuple = (1, 2, 2)
    head_widths: tuple = (32,)

    def __post_init__(self):
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError(f"need >=1 input channel and >=2 classes, "
                              f"got {self.in_channels}/{self.num_classes}")
        if len(self.backbone_widths) != len(self.backbone_strides):
            raise ConfigError("backbone widths and strides must align")
        if not self.backbone_widths or any(w < 1 for w in self.backbone_widths + self.head_widths):
            raise ConfigError("all widths must be positive")
        if any(s < 1 for s in self.backbone_strides):
            raise ConfigError("all strides must be positive")

    @property
    def downsample(self) -> int:
        out = 1
        for s in self.backbone_strides:
            out *= s
        return out

    def fingerprint(self) -> int:
        text = (f"{self.in_channels}|{self.num_classes}|{list(self.backbone_widths)}|"
                f"{list(self.backbone_strides)}|{list(self.head_widths)}")
        return zlib.crc32(text.encode())


@dataclass(frozen=True)
class ParamSelector:
    region: str  # backbone | head | both
    scope: str   # bn-affine-only | all-weights

    def __post_init__(self):
        if self.region not in ("backbone", "head", "both"):
            raise ConfigError(f"unknown region {self.region!r}")
        if self.scope not in ("bn-affine-only", "all-weights"):
            raise ConfigError(f"unknown scope {self.scope!r}")

    def matches(self, name: str) -> bool:
        if self.region != "both" and not name.startswith(self.region + "."):
            return False
        if self.scope == "bn-affine-only":
            return name.endswith(".bn.scale") or name.endswith(".bn.shift")
        return True


@dataclass
class BNLayer:
    """Frozen source statistics of one BN layer, stored at checkpoint precision."""

    name: str
    channels: int
    src_mu: np.ndarray = None
    src_sigma: np.ndarray = None

    def __post_init__(self):
        if self.src_mu is None:
            self.src_mu = np.zeros(self.channels, dtype=np.float32)
        if self.src_sigma is None:
            self.src_sigma = np.ones(self.channels, dtype=np.float32)

    def source_stats(self) -> ChannelStats:
        return ChannelStats(self.src_mu.astype(np.float64), self.src_sigma.astype(np.float64))


@dataclass
class Block:
    """One conv(-BN-ReLU) unit of the forward walk."""

    conv_name: str
    stride: int
    padding: int
    bn_name: str = None  # None for the classifier
    act: bool = True
    has_bias: bool = False


class Model:
    def __init__(self, spec: ModelSpec, store: ParamStore, blocks: list, bn_layers: list):
        self.spec = spec
        self.store = store
        self.blocks = blocks
        self.bn_layers = {layer.name: layer for layer in bn_layers}
        self.bn_order = [layer.name for layer in bn_layers]
        self.adapt_states: dict[str, BNAdaptState] | None = None

    def make_adapt_states(self, gamma_hp: float = 0.1, alpha_hp: float = 0.005) -> dict:
        self.adapt_states = {
            name: BNAdaptState(source=self.bn_layers[name].source_stats(),
                               gamma_hp=gamma_hp, alpha_hp=alpha_hp)
            for name in self.bn_order
        }
        return self.adapt_states

    def reset_adapt_states(self) -> None:
        if self.adapt_states is not None:
            for st in self.adapt_states.values():
                st.reset()

    def param(self, name: str) -> Tensor:
        return self.store[name].tensor


def build_model(spec: ModelSpec, seed: int) -> Model:
    """He-initialized model; BN scale 1, shift 0; source stats start at (0, 1)."""
    rng = stream(seed, PURPOSE_MODEL_INIT)
    store = ParamStore()
    blocks: list[Block] = []
    bn_layers: list[BNLayer] = []

    def add_conv(name: str, c_in: int, c_out: int, k: int, bias: bool) -> None:
        fan_in = c_in * k * k
        w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)
        store.add(f"{name}.weight", Tensor(w.astype(np.float32)), trainable=True)
        if bias:
            store.add(f"{name}.bias", Tensor(np.zeros(c_out, dtype=np.float32)), trainable=True)

    def add_bn(name: str, c: int) -> BNLayer:
        store.add(f"{name}.scale", Tensor(np.ones(c, dtype=np.float32)), trainable=True)
        store.add(f"{name}.shift", Tensor(np.zeros(c, dtype=np.float32)), trainable=True)
        layer = BNLayer(name=name, channels=c)
        bn_layers.append(layer)
        return layer

    c_prev = spec.in_channels
    for i, (w, s) in enumerate(zip(spec.backbone_widths, spec.backbone_strides)):
        base = f"backbone.block{i}"
        add_conv(f"{base}.conv", c_prev, w, 3, bias=False)
        add_bn(f"{base}.bn", w)
        blocks.append(Block(conv_name=f"{base}.conv", stride=s, padding=1, bn_name=f"{base}.bn"))
        c_prev = w

    for i, w in enumerate(spec.head_widths):
        base = f"head.block{i}"
        add_conv(f"{base}.conv", c_prev, w, 3, bias=False)
        add_bn(f"{base}.bn", w)
        blocks.append(Block(conv_name=f"{base}.conv", stride=1, padding=1, bn_name=f"{base}.bn"))
        c_prev = w

    add_conv("head.classifier", c_prev, spec.num_classes, 1, bias=True)
    blocks.append(Block(conv_name="head.classifier", stride=1, padding=0,
                        bn_name=None, act=False, has_bias=True))

    return Model(spec, store, blocks, bn_layers)


def forward_segment(model: Model, image: Tensor, bn_mode: str = "source",
                    adapt_states: dict | None = None, update_state: bool = True,
                    collect: dict | None = None) -> Tensor:
    """Run the network on N x C x H x W input and return N x K x H x W logits.

    bn_mode picks the normalization statistics per layer:
      source        frozen training stats
      batch         this input's own per-channel moments
      interpolated  the dynamic mix; requires adapt states, whose beta and
                    reference stats advance unless update_state is False

    ``collect``, when given a dict, receives per-layer diagnostics:
    "batch_stats" (list of (layer, ChannelStats)) and "betas"
    (list of (layer, float)).
    """
    if bn_mode not in BN_MODES:
        raise ConfigError(f"unknown bn_mode {bn_mode!r}, expected one of {BN_MODES}")
    if bn_mode == "interpolated":
        if adapt_states is None:
            adapt_states = model.adapt_states
        if adapt_states is None:
            raise ConfigError("interpolated bn_mode needs adapt states; "
                              "call make_adapt_states first or pass them in")

    n, c, h, w = image.data.shape
    if c != model.spec.in_channels:
        raise ShapeError(f"input has {c} channels, model expects {model.spec.in_channels}")
    d = model.spec.downsample
    if h % d or w % d:
        raise ShapeError(f"input {h}x{w} must be divisible by the downsample factor {d}")

    want_batch_stats = bn_mode != "source" or collect is not None
    if collect is not None:
        collect["batch_stats"] = []
        collect["betas"] = []

    x = image
    for blk in model.blocks:
        wt = model.store[blk.conv_name + ".weight"].tensor
        bt = model.store[blk.conv_name + ".bias"].tensor if blk.has_bias else None
        x = conv2d(x, wt, bt, stride=blk.stride, padding=blk.padding)
        if blk.bn_name is not None:
            layer = model.bn_layers[blk.bn_name]
            bstats = batch_stats(x.data) if want_batch_stats else None
            if collect is not None:
                collect["batch_stats"].append((blk.bn_name, bstats))
            if bn_mode == "source":
                mu, sg = layer.src_mu, layer.src_sigma
            elif bn_mode == "batch":
                mu, sg = bstats.mu, bstats.sigma
            else:
                state = adapt_states[blk.bn_name]
                if update_state:
                    beta_step(state, bstats)
                    mixed = interpolate_stats(state, bstats)
                else:
                    mixed = state.current
                mu, sg = mixed.mu, mixed.sigma
                if collect is not None:
                    collect["betas"].append((blk.bn_name, state.beta))
            scale = model.store[blk.bn_name + ".scale"].tensor
            shift = model.store[blk.bn_name + ".shift"].tensor
            x = batchnorm2d(x, mu, sg, scale, shift)
        if blk.act:
            x = relu(x)
    if d > 1:
        x = upsample_nearest(x, d)
    return x


def select_trainable(model: Model, selector: ParamSelector) -> int:
    """Mark exactly the selector's parameters trainable; returns the scalar count."""
    names = [p.name for p in model.store if selector.matches(p.name)]
    model.store.set_trainable(names)
    return sum(model.store[n].tensor.data.size for n in names)


def snapshot(model: Model) -> dict:
    """Capture parameters, Adam moments, BN adaptation state, and source stats."""
    state = {
        "fingerprint": model.spec.fingerprint(),
        "params": {p.name: p.tensor.data.copy() for p in model.store},
        "moments": {p.name: (None if p.m is None else (p.m.copy(), p.v.copy()))
                    for p in model.store},
        "step_count": model.store.step_count,
        "src": {name: (layer.src_mu.copy(), layer.src_sigma.copy())
                for name, layer in model.bn_layers.items()},
        "adapt": None,
    }
    if model.adapt_states is not None:
        state["adapt"] = {
            name: (st.current.mu.copy(), st.current.sigma.copy(), st.beta, st.last_beta_t,
                   st.gamma_hp, st.alpha_hp)
            for name, st in model.adapt_states.items()
        }
    return state


def restore(model: Model, state: dict) -> None:
    if state["fingerprint"] != model.spec.fingerprint():
        raise ConfigError(f"snapshot fingerprint {state['fingerprint']} does not match "
                          f"model spec fingerprint {model.spec.fingerprint()}")
    for p in model.store:
        p.tensor.data = state["params"][p.name].copy()
        p.tensor.grad = None
        mom = state["moments"][p.name]
        if mom is None:
            p.m = None
            p.v = None
        else:
            p.m = mom[0].copy()
            p.v = mom[1].copy()
    model.store.step_count = state["step_count"]
    for name, layer in model.bn_layers.items():
        layer.src_mu = state["src"][name][0].copy()
        layer.src_sigma = state["src"][name][1].copy()
    if state["adapt"] is None:
        model.adapt_states = None
    else:
        model.adapt_states = {}
        for name, (mu, sg, beta, beta_t, gamma_hp, alpha_hp) in state["adapt"].items():
            st = BNAdaptState(source=model.bn_layers[name].source_stats(),
                              gamma_hp=gamma_hp, alpha_hp=alpha_hp)
            st.current = ChannelStats(mu.copy(), sg.copy())
            st.beta = beta
            st.last_beta_t = beta_t
            model.adapt_states[name] = st


def ema_update(teacher: Model, student: Model, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, every parameter."""
    if teacher.spec != student.spec:
        raise ConfigError("teacher and student specs differ")
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"momentum must lie in [0, 1], got {momentum}")
    for p in teacher.store:
        s = student.store[p.name].tensor.data
        p.tensor.data = (momentum * p.tensor.data.astype(np.float64)
                         + (1.0 - momentum) * s.astype(np.float64)).astype(p.tensor.data.dtype)


def stochastic_restore(model: Model, source_params: dict, rate: float, rng) -> int:
    """Independently reset each weight scalar to its source value with probability rate.

    Returns the number of scalars restored.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"restore rate must lie in [0, 1], got {rate}")
    if rate == 0.0:
        return 0
    total = 0
    for p in model.store:
        src = np.asarray(source_params[p.name], dtype=p.tensor.data.dtype)
        if rate == 1.0:
            p.tensor.data = src.copy()
            total += src.size
            continue
        mask = rng.random(p.tensor.data.shape) < rate
        p.tensor.data = np.where(mask, src, p.tensor.data)
        total += int(mask.sum())
    return total
