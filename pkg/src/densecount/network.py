"""Assembles the counting network and its ablation variants.

The architecture is ASPDNet-style, a single-column density regressor:

* front-end: the first ten 3x3 convolutions of the VGG16 plan with three
  2x2 max pools, optionally followed by a sequential channel+spatial
  attention gate (``use_cbam``);
* mid-end: optionally a scale pyramid of parallel dilated 3x3 convolutions
  whose outputs are concatenated and reduced back by a 1x1 convolution
  (``use_spm``), then plain 3x3 convolutions;
* back-end: a tapering stack of deformable convolutions (``use_dcm``), or
  plain 3x3 convolutions of the same widths when disabled, finished by a
  1x1 head producing one channel.

Every convolution is followed by a ReLU except the attention gates (which
end in sigmoids) and the offset predictors; the head output goes through a
final ReLU so the density map is non-negative. Summing the map gives the
predicted object count. With the default three-pool front end the output is
exactly 1/8 of the input per side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import (AttentionSpec, ConvSpec, channel_attention, concat_channels,
                     conv2d, deformable_conv2d, max_pool2x2, spatial_attention)
from .tensor import Tensor

POOL = "P"

VGG16_FRONTEND = [64, 64, POOL, 128, 128, POOL, 256, 256, 256, POOL, 512, 512, 512]


@dataclass
class ModelConfig:
    """Declarative architecture description; all widths are configurable."""

    use_cbam: bool = True
    use_spm: bool = True
    use_dcm: bool = True
    frontend_channels: list = field(default_factory=lambda: list(VGG16_FRONTEND))
    spm_rates: list = field(default_factory=lambda: [2, 4, 8, 12])
    spm_branch_channels: int = 512
    midend_channels: list = field(default_factory=lambda: [512, 512, 512])
    backend_channels: list = field(default_factory=lambda: [256, 128, 64])
    attention: AttentionSpec = field(default_factory=AttentionSpec)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        convs = [c for c in self.frontend_channels if c != POOL]
        if not convs:
            raise ConfigError("frontend needs at least one convolution")
        for c in convs:
            if not isinstance(c, int) or c < 1:
                raise ConfigError(f"bad frontend width {c!r}")
        if not self.spm_rates or list(self.spm_rates) != sorted(set(self.spm_rates)):
            raise ConfigError("spm_rates must be non-empty and strictly increasing")
        if self.spm_branch_channels < 1:
            raise ConfigError("spm_branch_channels must be >= 1")
        for c in list(self.midend_channels) + list(self.backend_channels):
            if not isinstance(c, int) or c < 1:
                raise ConfigError(f"bad channel width {c!r}")
        if not self.backend_channels:
            raise ConfigError("backend needs at least one layer")
        if self.use_cbam:
            front_out = convs[-1]
            if front_out % self.attention.reduction_ratio:
                raise ConfigError(
                    f"frontend output {front_out} not divisible by reduction ratio "
                    f"{self.attention.reduction_ratio}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** sum(1 for c in self.frontend_channels if c == POOL)

    def to_json(self) -> str:
        d = {
            "use_cbam": self.use_cbam,
            "use_spm": self.use_spm,
            "use_dcm": self.use_dcm,
            "frontend_channels": list(self.frontend_channels),
            "spm_rates": list(self.spm_rates),
            "spm_branch_channels": self.spm_branch_channels,
            "midend_channels": list(self.midend_channels),
            "backend_channels": list(self.backend_channels),
            "attention": {"reduction_ratio": self.attention.reduction_ratio,
                          "spatial_kernel": self.attention.spatial_kernel},
        }
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        att = d.pop("attention", {})
        return cls(attention=AttentionSpec(**att), **d)


@dataclass
class Model:
    """A config plus its named parameter tensors."""

    config: ModelConfig
    parameters: dict[str, Tensor]
    init_scheme: str = "reference"

    def clone(self) -> "Model":
        return Model(self.config,
                     {n: Tensor(p.values.copy(), name=n) for n, p in self.parameters.items()},
                     init_scheme=self.init_scheme)

    def clear_grads(self) -> None:
        for p in self.parameters.values():
            p.clear_grad()


def layer_plan(config: ModelConfig) -> list[dict]:
    """Flat description of the forward pipeline, shared by build and forward.

    Yields dicts with a ``kind`` of pool / conv / cbam / spm / deform, plus
    the parameter names and ConvSpecs each stage owns.
    """
    plan: list[dict] = []
    channels = 3
    conv_idx = 0
    for entry in config.frontend_channels:
        if entry == POOL:
            plan.append({"kind": "pool"})
            continue
        conv_idx += 1
        plan.append({"kind": "conv", "name": f"frontend.conv{conv_idx}",
                     "spec": ConvSpec(3, channels, entry, padding=1)})
        channels = entry

    if config.use_cbam:
        plan.append({"kind": "cbam", "channels": channels, "attention": config.attention})

    if config.use_spm:
        bc = config.spm_branch_channels
        branches = [{"name": f"spm.branch{i + 1}",
                     "spec": ConvSpec(3, channels, bc, dilation=r, padding=r)}
                    for i, r in enumerate(config.spm_rates)]
        plan.append({"kind": "spm", "branches": branches,
                     "reduce": {"name": "spm.reduce",
                                "spec": ConvSpec(1, bc * len(branches), bc)}})
        channels = bc

    for i, width in enumerate(config.midend_channels):
        plan.append({"kind": "conv", "name": f"midend.conv{i + 1}",
                     "spec": ConvSpec(3, channels, width, padding=1)})
        channels = width

    for i, width in enumerate(config.backend_channels):
        name = f"backend.conv{i + 1}"
        spec = ConvSpec(3, channels, width, padding=1)
        if config.use_dcm:
            plan.append({"kind": "deform", "name": name, "spec": spec,
                         "offset": {"name": f"{name}.offset",
                                    "spec": ConvSpec(3, channels, 2 * 9, padding=1)}})
        else:
            plan.append({"kind": "conv", "name": name, "spec": spec})
        channels = width

    plan.append({"kind": "head", "name": "head", "spec": ConvSpec(1, channels, 1)})
    return plan


def _conv_params(name: str, spec: ConvSpec) -> list[tuple[str, tuple[int, ...]]]:
    k = spec.kernel_size
    return [(f"{name}.weight", (spec.out_channels, spec.in_channels, k, k)),
            (f"{name}.bias", (spec.out_channels,))]


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list for every learnable tensor."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for stage in layer_plan(config):
        kind = stage["kind"]
        if kind == "pool":
            continue
        if kind == "cbam":
            c = stage["channels"]
            hidden = c // stage["attention"].reduction_ratio
            ks = stage["attention"].spatial_kernel
            shapes += [("cbam.channel.w1", (c, hidden)),
                       ("cbam.channel.w2", (hidden, c)),
                       ("cbam.spatial.weight", (1, 2, ks, ks))]
        elif kind == "spm":
            for branch in stage["branches"]:
                shapes += _conv_params(branch["name"], branch["spec"])
            shapes += _conv_params(stage["reduce"]["name"], stage["reduce"]["spec"])
        elif kind == "deform":
            shapes += _conv_params(stage["name"], stage["spec"])
            shapes += _conv_params(stage["offset"]["name"], stage["offset"]["spec"])
        else:  # conv, head
            shapes += _conv_params(stage["name"], stage["spec"])
    return shapes


def build_aspdnet(config: ModelConfig, seed: int, init: str = "reference") -> Model:
    """Create a model whose parameters come from one PCG64 stream.

    ``init="reference"`` (default) draws every parameter from
    Gaussian(0, 0.01), the convention for the full-width model whose front
    end usually starts from converted pretrained weights. That constant is
    far too small for narrow desk-scale models trained from scratch: with
    fan-in below a few hundred the activations shrink by ~10x per layer and
    the head output lands around 1e-9, where no learning rate can move the
    loss. ``init="scaled"`` draws weights from Gaussian(0, sqrt(2/fan_in))
    with zero biases instead, which keeps activations at unit scale at any
    width. The scheme is recorded on the model and in training logs.

    Offset-predictor weights and biases start at zero under both schemes so
    every deformable layer behaves exactly like a plain convolution until
    training moves the offsets. Two builds with the same seed are
    bit-identical.
    """
    if init not in ("reference", "scaled"):
        raise ConfigError(f"unknown init scheme {init!r}")
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        if ".offset." in name:
            params[name] = T.zeros(shape, name=name)
        elif init == "reference":
            params[name] = Tensor(rng.normal(0.0, 0.01, shape), name=name)
        elif name.endswith(".bias"):
            params[name] = T.zeros(shape, name=name)
        else:
            # conv kernels are (out, in, k, k); the attention MLP matrices
            # multiply on the right, so their fan-in is the leading extent
            fan_in = int(shape[0]) if name.startswith("cbam.channel") \
                else int(np.prod(shape[1:]))
            params[name] = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), shape), name=name)
    return Model(config, params, init_scheme=init)


def forward(model: Model, image: Tensor) -> Tensor:
    """Run the pipeline on (B, 3, H, W); returns the (B, 1, H/f, W/f) density map.

    H and W must be divisible by the front-end's downsample factor f (8 for
    the default three-pool plan); callers that cannot guarantee that should
    zero-pad first (see data.pad_to_multiple).
    """
    if image.values.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, H, W) input, got {image.shape}")
    factor = model.config.downsample_factor
    B, _, H, W = image.shape
    if H % factor or W % factor:
        raise ShapeError(f"input extents {H}x{W} not divisible by {factor}")

    p = model.parameters
    x = image
    for stage in layer_plan(model.config):
        kind = stage["kind"]
        if kind == "pool":
            x = max_pool2x2(x)
        elif kind == "conv":
            x = T.relu(conv2d(x, p[f"{stage['name']}.weight"], p[f"{stage['name']}.bias"],
                              stage["spec"]))
        elif kind == "cbam":
            gate_c = channel_attention(x, p["cbam.channel.w1"], p["cbam.channel.w2"],
                                       stage["attention"])
            x = T.mul(x, gate_c)
            gate_s = spatial_attention(x, p["cbam.spatial.weight"], stage["attention"])
            x = T.mul(x, gate_s)
        elif kind == "spm":
            outs = [T.relu(conv2d(x, p[f"{b['name']}.weight"], p[f"{b['name']}.bias"], b["spec"]))
                    for b in stage["branches"]]
            red = stage["reduce"]
            x = T.relu(conv2d(concat_channels(outs), p[f"{red['name']}.weight"],
                              p[f"{red['name']}.bias"], red["spec"]))
        elif kind == "deform":
            off_name = stage["offset"]["name"]
            offsets = conv2d(x, p[f"{off_name}.weight"], p[f"{off_name}.bias"],
                             stage["offset"]["spec"])
            x = T.relu(deformable_conv2d(x, p[f"{stage['name']}.weight"],
                                         p[f"{stage['name']}.bias"], offsets, stage["spec"]))
        elif kind == "head":
            x = T.relu(conv2d(x, p["head.weight"], p["head.bias"], stage["spec"]))
    return x


def predict_count(density) -> float | list[float]:
    """Total predicted count: the sum of the density map.

    Accepts a Tensor or array of shape (H, W), (1, H, W) or (B, 1, H, W);
    returns a float, or a list of per-item floats when B > 1.
    """
    values = density.values if isinstance(density, Tensor) else np.asarray(density)
    if values.ndim == 4:
        sums = [float(np.sum(values[b])) for b in range(values.shape[0])]
        return sums[0] if len(sums) == 1 else sums
    return float(np.sum(values))


# ---------------------------------------------------------------------------
# persistence: parameters in the shared binary format, config as JSON sidecar


def save_model(path, model: Model) -> None:
    """Write parameters to ``path`` and the config to ``<path>.config.json``."""
    path = Path(path)
    ckpt.save_tensors(path, {n: p.values for n, p in model.parameters.items()})
    path.with_suffix(path.suffix + ".config.json").write_text(model.config.to_json())


def load_model(path, config: ModelConfig | None = None) -> Model:
    """Load a model checkpoint; config comes from the sidecar unless given."""
    path = Path(path)
    if config is None:
        sidecar = path.with_suffix(path.suffix + ".config.json")
        if not sidecar.exists():
            raise ConfigError(f"no config given and sidecar {sidecar} is missing")
        config = ModelConfig.from_json(sidecar.read_text())
    arrays = ckpt.load_tensors(path)
    expected = dict(parameter_shapes(config))
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ConfigError(f"checkpoint does not match config (missing {missing}, extra {extra})")
    params = {}
    for name, arr in arrays.items():
        if arr.shape != expected[name]:
            raise ShapeError(f"parameter {name}: shape {arr.shape} != {expected[name]}")
        params[name] = Tensor(arr, name=name)
    return Model(config, params)
