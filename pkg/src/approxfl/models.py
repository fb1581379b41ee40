"""Model builders. Every builder takes a width multiplier so scaled variants
(the S-levels) share layer names and channel spaces with the full model."""
from __future__ import annotations

import numpy as np

from .nn import BatchNorm, Conv2D, Dense, Flatten, GlobalAvgPool, Model, ReLU, ResidualBlock

INPUT_SPACE = None  # image channels are never masked
LOGIT_SPACE = None  # neither are class logits


def _w(c: int, width: float) -> int:
    n = int(np.floor(c * width + 1e-9))
    if n < 1:
        raise ValueError(f"width {width} leaves no channels in a {c}-channel layer")
    return n


def cnn(in_shape=(3, 8, 8), num_classes=10, channels=(8, 16), width=1.0, seed=0) -> Model:
    """conv3x3-BN-ReLU stack (stride 2 after the first layer), global pool, dense."""
    rng = np.random.default_rng(seed)
    layers = []
    prev, prev_space = in_shape[0], INPUT_SPACE
    for i, c in enumerate(channels):
        q = _w(c, width)
        space = f"c{i + 1}"
        layers += [Conv2D(f"conv{i + 1}", prev, q, 3, 1 if i == 0 else 2, in_space=prev_space, out_space=space, rng=rng),
                   BatchNorm(f"bn{i + 1}", q, space),
                   ReLU(f"relu{i + 1}")]
        prev, prev_space = q, space
    layers += [GlobalAvgPool("pool"), Dense("fc", prev, num_classes, in_space=prev_space, out_space=LOGIT_SPACE, rng=rng)]
    return Model(layers, in_shape, num_classes,
                 {"arch": "cnn", "channels": list(channels), "width": width, "seed": seed})


def resnet(depth=20, in_shape=(3, 32, 32), num_classes=10, width=1.0, base=16, seed=0) -> Model:
    """CIFAR-style ResNet with 1x1 projection shortcuts where the shape changes."""
    if (depth - 2) % 6:
        raise ValueError("resnet depth must be 6n + 2")
    n = (depth - 2) // 6
    rng = np.random.default_rng(seed)
    widths = [_w(base * 2 ** i, width) for i in range(3)]
    layers = [Conv2D("stem", in_shape[0], widths[0], 3, 1, in_space=INPUT_SPACE, out_space="stage1", rng=rng),
              BatchNorm("stem_bn", widths[0], "stage1"), ReLU("stem_relu")]
    prev, prev_space = widths[0], "stage1"
    for si, c in enumerate(widths):
        space = f"stage{si + 1}"
        for b in range(n):
            stride = 2 if (si > 0 and b == 0) else 1
            layers.append(ResidualBlock(f"stage{si + 1}.block{b}", prev, c, stride, prev_space,
                                        f"{space}.block{b}.mid", space, rng=rng))
            prev, prev_space = c, space
    layers += [GlobalAvgPool("pool"), Dense("fc", prev, num_classes, in_space=prev_space, out_space=LOGIT_SPACE, rng=rng)]
    return Model(layers, in_shape, num_classes,
                 {"arch": "resnet", "depth": depth, "width": width, "base": base, "seed": seed})


def mlp(in_shape=(3, 8, 8), num_classes=10, hidden=32, width=1.0, seed=0) -> Model:
    rng = np.random.default_rng(seed)
    d = int(np.prod(in_shape))
    h = _w(hidden, width)
    layers = [Flatten("flatten"), Dense("fc1", d, h, in_space=INPUT_SPACE, out_space="h1", rng=rng),
              ReLU("relu1"), Dense("fc2", h, num_classes, in_space="h1", out_space=LOGIT_SPACE, rng=rng)]
    return Model(layers, in_shape, num_classes, {"arch": "mlp", "hidden": hidden, "width": width, "seed": seed})


BUILDERS = {"cnn": cnn, "resnet": resnet, "mlp": mlp}
MODEL_KEYS = {"cnn": {"channels", "width"}, "resnet": {"depth", "base", "width"}, "mlp": {"hidden", "width"}}


def check_model_spec(spec: dict) -> None:
    """Raise ValueError naming the first problem in a model config dict."""
    arch = spec.get("arch")
    if arch not in BUILDERS:
        raise ValueError(f"unknown architecture {arch!r}")
    extra = sorted(set(spec) - MODEL_KEYS[arch] - {"arch"})
    if extra:
        raise ValueError(f"unknown key(s) {', '.join(map(repr, extra))} for arch {arch!r}")
    width = spec.get("width", 1.0)
    if not isinstance(width, (int, float)) or not 0 < width <= 1:
        raise ValueError(f"width must be in (0, 1], got {width!r}")
    if arch == "resnet" and (spec.get("depth", 20) - 2) % 6:
        raise ValueError(f"resnet depth must be 6n+2, got {spec['depth']}")


def build_model(spec: dict, in_shape, num_classes: int, width: float = 1.0, seed: int = 0) -> Model:
    """Build from a config dict such as {"arch": "resnet", "depth": 20}."""
    check_model_spec(spec)
    spec = dict(spec)
    arch = spec.pop("arch")
    width = width * spec.pop("width", 1.0)
    return BUILDERS[arch](in_shape=tuple(in_shape), num_classes=num_classes, width=width, seed=seed, **spec)
