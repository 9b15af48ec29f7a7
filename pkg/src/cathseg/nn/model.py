"""Residual encoder-decoder segmentation network.

Layout for ``levels`` resolution levels and ``base_filters`` f:

* encoder: per level an n-conv residual block at f*2^level channels,
  followed by a stride-2 3x3 convolution to the next level (except at the
  deepest level).  Optional dropout at the end of selected encoder blocks
  (default: the two deepest).
* decoder: per level a stride-2 transposed convolution (2x2 kernel) halving
  the channels, concatenation with the encoder skip, then an n-conv
  residual block back down to the level's channel count.
* head: 1x1 convolution to a single channel + sigmoid.

Every convolution is followed by batch normalization and ReLU, except the
head.  A residual block computes ``y = F(x) + R(x)`` where F is n times
(conv3x3 -> BN -> ReLU) and R is the identity, or a 1x1 projection when the
channel counts differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from ..imagecore import ProbabilityMap


@dataclass(frozen=True)
class ModelConfig:
    input_frames: int = 4
    levels: int = 4
    base_filters: int = 16
    convs_per_block: int = 2
    dropout_rate: float = 0.5
    dropout_blocks: tuple | None = None  # encoder block indices, default two deepest

    def __post_init__(self):
        if self.input_frames < 1:
            raise ValueError("input_frames must be >= 1")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        blocks = self.dropout_blocks
        if blocks is None:
            blocks = tuple(sorted({self.levels - 2, self.levels - 1}))
        else:
            blocks = tuple(sorted(set(int(b) for b in blocks)))
            if any(b < 0 or b >= self.levels for b in blocks):
                raise ValueError("dropout_blocks indices out of range")
        object.__setattr__(self, "dropout_blocks", blocks)

    def channels(self, level: int) -> int:
        return self.base_filters * (2 ** level)

    def to_dict(self) -> dict:
        return {
            "input_frames": self.input_frames,
            "levels": self.levels,
            "base_filters": self.base_filters,
            "convs_per_block": self.convs_per_block,
            "dropout_rate": self.dropout_rate,
            "dropout_blocks": list(self.dropout_blocks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {"input_frames", "levels", "base_filters", "convs_per_block",
                 "dropout_rate", "dropout_blocks"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        if "dropout_blocks" in kw and kw["dropout_blocks"] is not None:
            kw["dropout_blocks"] = tuple(kw["dropout_blocks"])
        return cls(**kw)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2dLayer:
    def __init__(self, cin, cout, k, stride, pad, rng, dtype):
        self.stride, self.pad = stride, pad
        w = _he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.params = {"kernels": w, "bias": np.zeros(cout, dtype=dtype)}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def forward(self, x, mode="infer", rng=None):
        y, self._cache = ops.conv2d(x, self.params["kernels"],
                                    self.params["bias"], self.stride, self.pad)
        return y

    def backward(self, grad_out):
        gx, gw, gb = ops.conv2d_backward(grad_out, self._cache)
        self.grads = {"kernels": gw, "bias": gb}
        return gx


class TransposedConv2dLayer:
    def __init__(self, cin, cout, k, stride, rng, dtype):
        self.stride = stride
        w = _he_uniform(rng, (cin, cout, k, k), cin * k * k, dtype)
        self.params = {"kernels": w, "bias": np.zeros(cout, dtype=dtype)}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def forward(self, x, mode="infer", rng=None):
        y, self._cache = ops.transposed_conv2d(x, self.params["kernels"],
                                               self.params["bias"], self.stride)
        return y

    def backward(self, grad_out):
        gx, gw, gb = ops.transposed_conv2d_backward(grad_out, self._cache)
        self.grads = {"kernels": gw, "bias": gb}
        return gx


class BatchNorm2dLayer:
    def __init__(self, channels, dtype):
        self.params = {"gamma": np.ones(channels, dtype=dtype),
                       "beta": np.zeros(channels, dtype=dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype=dtype),
                        "running_var": np.ones(channels, dtype=dtype)}
        self.grads = {}
        self._cache = None

    def forward(self, x, mode="infer", rng=None):
        y, self._cache = ops.batchnorm2d(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"], mode)
        return y

    def backward(self, grad_out):
        gx, gg, gb = ops.batchnorm2d_backward(grad_out, self._cache)
        self.grads = {"gamma": gg, "beta": gb}
        return gx


class ReLULayer:
    params: dict = {}
    buffers: dict = {}

    def __init__(self):
        self.grads = {}
        self._cache = None

    def forward(self, x, mode="infer", rng=None):
        y, self._cache = ops.relu(x)
        return y

    def backward(self, grad_out):
        return ops.relu_backward(grad_out, self._cache)


class DropoutLayer:
    params: dict = {}
    buffers: dict = {}

    def __init__(self, rate):
        self.rate = rate
        self.grads = {}
        self._cache = None

    def forward(self, x, mode="infer", rng=None):
        y, self._cache = ops.dropout(x, self.rate, mode, rng)
        return y

    def backward(self, grad_out):
        return ops.dropout_backward(grad_out, self._cache)


class NConvBlock:
    """n x (conv3x3 -> BN -> ReLU) with a residual connection; the shortcut
    is a 1x1 projection when input/output channels differ."""

    def __init__(self, cin, cout, n, rng, dtype):
        self.stages = []
        c = cin
        for _ in range(n):
            self.stages.append((Conv2dLayer(c, cout, 3, 1, 1, rng, dtype),
                                BatchNorm2dLayer(cout, dtype),
                                ReLULayer()))
            c = cout
        self.proj = Conv2dLayer(cin, cout, 1, 1, 0, rng, dtype) if cin != cout else None

    def forward(self, x, mode="infer", rng=None):
        h = x
        for conv, bn, act in self.stages:
            h = act.forward(bn.forward(conv.forward(h), mode), mode)
        r = self.proj.forward(x) if self.proj is not None else x
        return h + r

    def backward(self, grad_out):
        g = grad_out
        for conv, bn, act in reversed(self.stages):
            g = conv.backward(bn.backward(act.backward(g)))
        if self.proj is not None:
            g = g + self.proj.backward(grad_out)
        else:
            g = g + grad_out
        return g

    def sublayers(self, prefix):
        for k, (conv, bn, act) in enumerate(self.stages):
            yield f"{prefix}.conv{k}", conv
            yield f"{prefix}.bn{k}", bn
        if self.proj is not None:
            yield f"{prefix}.proj", self.proj


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class SegModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        cfg = config
        L = cfg.levels
        n = cfg.convs_per_block
        self.enc_blocks = []
        self.enc_dropout = []
        self.downs = []
        for i in range(L):
            cin = cfg.input_frames if i == 0 else cfg.channels(i)
            self.enc_blocks.append(NConvBlock(cin, cfg.channels(i), n, rng, dtype))
            self.enc_dropout.append(
                DropoutLayer(cfg.dropout_rate) if i in cfg.dropout_blocks else None)
            if i < L - 1:
                self.downs.append((
                    Conv2dLayer(cfg.channels(i), cfg.channels(i + 1), 3, 2, 1, rng, dtype),
                    BatchNorm2dLayer(cfg.channels(i + 1), dtype),
                    ReLULayer()))
        self.ups = []
        self.dec_blocks = []
        for i in range(L - 2, -1, -1):
            self.ups.append((
                TransposedConv2dLayer(cfg.channels(i + 1), cfg.channels(i), 2, 2, rng, dtype),
                BatchNorm2dLayer(cfg.channels(i), dtype),
                ReLULayer()))
            self.dec_blocks.append(NConvBlock(2 * cfg.channels(i), cfg.channels(i), n, rng, dtype))
        self.head = Conv2dLayer(cfg.channels(0), 1, 1, 1, 0, rng, dtype)
        self._sigmoid_cache = None
        self._skip_channels = [cfg.channels(i) for i in range(L - 1)]

    # -- plumbing ----------------------------------------------------------

    def named_layers(self):
        """Layers owning state, in declaration order."""
        for i, blk in enumerate(self.enc_blocks):
            yield from blk.sublayers(f"enc{i}")
        for i, (conv, bn, _) in enumerate(self.downs):
            yield f"down{i}.conv", conv
            yield f"down{i}.bn", bn
        for j, (tconv, bn, _) in enumerate(self.ups):
            yield f"up{j}.tconv", tconv
            yield f"up{j}.bn", bn
        for j, blk in enumerate(self.dec_blocks):
            yield from blk.sublayers(f"dec{j}")
        yield "head", self.head

    def named_parameters(self):
        for lname, layer in self.named_layers():
            for pname, arr in layer.params.items():
                yield f"{lname}.{pname}", arr

    def named_buffers(self):
        for lname, layer in self.named_layers():
            for bname, arr in layer.buffers.items():
                yield f"{lname}.{bname}", arr

    def named_state(self):
        """Parameters and running statistics, declaration order."""
        for lname, layer in self.named_layers():
            for pname, arr in layer.params.items():
                yield f"{lname}.{pname}", arr
            for bname, arr in layer.buffers.items():
                yield f"{lname}.{bname}", arr

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def gradients(self) -> dict:
        out = {}
        for lname, layer in self.named_layers():
            for pname in layer.params:
                out[f"{lname}.{pname}"] = layer.grads[pname]
        return out

    def check_input(self, x):
        x = ops.require_nchw(x)
        cfg = self.config
        if x.shape[1] != cfg.input_frames:
            raise ValueError(
                f"expected {cfg.input_frames} input channels, got {x.shape[1]}")
        factor = 2 ** (cfg.levels - 1)
        h, w = x.shape[2], x.shape[3]
        if h % factor or w % factor:
            need_h = (factor - h % factor) % factor
            need_w = (factor - w % factor) % factor
            raise ValueError(
                f"input {h}x{w} not divisible by {factor}; pad by "
                f"{need_h} rows and {need_w} cols (to "
                f"{h + need_h}x{w + need_w})")
        return x

    def shape_schedule(self, h: int, w: int):
        """Spatial size at every encoder/decoder level for an h x w input."""
        L = self.config.levels
        factor = 2 ** (L - 1)
        if h % factor or w % factor:
            raise ValueError(f"input {h}x{w} not divisible by {factor}")
        down = [(h // (2 ** i), w // (2 ** i)) for i in range(L)]
        up = [(h // (2 ** i), w // (2 ** i)) for i in range(L - 2, -1, -1)]
        return down + up

    # -- forward / backward -------------------------------------------------

    def forward(self, x, mode="infer", rng=None):
        x = self.check_input(x)
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        L = self.config.levels
        skips = []
        h = x
        for i in range(L):
            h = self.enc_blocks[i].forward(h, mode, rng)
            if self.enc_dropout[i] is not None:
                h = self.enc_dropout[i].forward(h, mode, rng)
            if i < L - 1:
                skips.append(h)
                conv, bn, act = self.downs[i]
                h = act.forward(bn.forward(conv.forward(h), mode), mode)
        for j in range(L - 1):
            level = L - 2 - j
            tconv, bn, act = self.ups[j]
            h = act.forward(bn.forward(tconv.forward(h), mode), mode)
            h = np.concatenate([h, skips[level]], axis=1)
            h = self.dec_blocks[j].forward(h, mode, rng)
        logits = self.head.forward(h)
        y, self._sigmoid_cache = ops.sigmoid(logits)
        return y

    def backward(self, grad_y):
        L = self.config.levels
        g = ops.sigmoid_backward(grad_y, self._sigmoid_cache)
        g = self.head.backward(g)
        skip_grads = [None] * (L - 1)
        for j in range(L - 2, -1, -1):
            level = L - 2 - j
            g = self.dec_blocks[j].backward(g)
            c = self._skip_channels[level]
            g_up, g_skip = g[:, :c], g[:, c:]
            skip_grads[level] = g_skip
            tconv, bn, act = self.ups[j]
            g = tconv.backward(bn.backward(act.backward(g_up)))
        for i in range(L - 1, -1, -1):
            if i < L - 1:
                conv, bn, act = self.downs[i]
                g = conv.backward(bn.backward(act.backward(g)))
                g = g + skip_grads[i]
            if self.enc_dropout[i] is not None:
                g = self.enc_dropout[i].backward(g)
            g = self.enc_blocks[i].backward(g)
        return g


def build_frame_stack(frames, index: int) -> np.ndarray:
    """Stack frame ``index`` with its three predecessors as channels
    (current first), replicating the earliest frame while history is short.

    ``frames`` is a sequence of 2-d arrays or Image objects.
    """
    arrs = [f.data if hasattr(f, "data") else np.asarray(f) for f in frames]
    if not 0 <= index < len(arrs):
        raise IndexError("frame index out of range")
    chans = [arrs[max(index - k, 0)] for k in range(4)]
    return np.stack(chans, axis=0)


def model_forward(model: SegModel, frame_stack: np.ndarray,
                  mode: str = "infer", rng=None) -> ProbabilityMap:
    """Run one 4-channel frame stack through the model."""
    x = np.asarray(frame_stack)
    if x.ndim != 3 or x.shape[0] != model.config.input_frames:
        raise ValueError(
            f"expected ({model.config.input_frames}, h, w) stack, got {x.shape}")
    y = model.forward(x[None], mode=mode, rng=rng)
    return ProbabilityMap(np.clip(y[0, 0].astype(np.float64), 0.0, 1.0))
