"""
Continuous Disparity Refinement Network

Two convolutional encoders (reference image, noisy disparity) feed a
decoder whose levels are bilinearly sampled at continuous coordinates;
the concatenated point features go to two sine MLPs:

    disparity = argmax(MLP_C(f)) + tanh(MLP_O(f ++ argmax / max_disp))

so the output at any location is an integer bin plus an offset in [-1, 1].
The "l1" head replaces both MLPs with a single regressor for ablations.

Disparities inside the network are in bins, one bin per left-image pixel.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import autodiff as ad
from errors import ConfigError, DomainError, InputError
from stereo_core import DisparityMap, PixelGrid, StereoPair, source_positions
from stereo_io import to_gray

logger = logging.getLogger(__name__)

MODEL_CARD_VERSION = 1
_NORMALIZATION_SLACK = 1e-6


class NetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    levels: int = Field(4, ge=2)
    channels: List[int] = Field(default_factory=lambda: [16, 32, 64, 96])
    max_disp: int = Field(32, ge=1, description="disparity normalization constant, bins = max_disp + 1")
    mlp_hidden: List[int] = Field(default_factory=lambda: [64, 64, 64])
    head: Literal["classification", "l1"] = "classification"
    image_channels: Literal[1, 3] = 1
    conv_activation: Literal["elu", "relu", "tanh"] = "elu"
    sine_omega: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _consistent(self) -> "NetConfig":
        if len(self.channels) != self.levels:
            raise ValueError(f"{self.levels} levels need {self.levels} channel widths, got {self.channels}")
        if any(c < 1 for c in self.channels + self.mlp_hidden):
            raise ValueError("layer widths must be positive")
        if not self.mlp_hidden:
            raise ValueError("the MLP heads need at least one hidden layer")
        return self

    @property
    def d_bins(self) -> int:
        return self.max_disp + 1

    @property
    def feature_width(self) -> int:
        return sum(self.channels)

    @classmethod
    def full(cls) -> "NetConfig":
        """Full-size configuration: VGG13-like widths and 256 disparities"""
        return cls(
            levels=5,
            channels=[64, 128, 256, 512, 512],
            max_disp=256,
            mlp_hidden=[1024, 512, 256, 128],
            image_channels=3,
        )


@dataclass
class FeaturePyramid:
    """Per-level (C, H, W) feature maps; level l is at scale 2^-l of the input"""

    levels: List[ad.Tensor]
    input_size: Tuple[int, int]

    @property
    def scales(self) -> List[float]:
        return [0.5**level for level in range(len(self.levels))]

    @property
    def widths(self) -> List[int]:
        return [f.shape[0] for f in self.levels]


@dataclass
class PointPrediction:
    """Batch of point predictions in bins; logits/bins are None for the l1 head"""

    disparity: np.ndarray
    offset: np.ndarray
    logits: Optional[np.ndarray] = None
    bins: Optional[np.ndarray] = None


@dataclass
class HeadOutput:
    """Differentiable head outputs for one batch of points"""

    logits: Optional[ad.Tensor]
    offset: Optional[ad.Tensor]
    regression: Optional[ad.Tensor]
    prediction: PointPrediction


_ACTIVATIONS = {"elu": ad.elu, "relu": ad.relu, "tanh": ad.tanh}


class Conv:
    def __init__(self, name: str, c_in: int, c_out: int, k: int, stride: int, rng: np.random.Generator):
        bound = math.sqrt(6.0 / (c_in * k * k))
        self.weight = ad.Parameter(rng.uniform(-bound, bound, (c_out, c_in, k, k)), f"{name}.weight")
        self.bias = ad.Parameter(np.zeros(c_out), f"{name}.bias")
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> List[ad.Parameter]:
        return [self.weight, self.bias]


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, weight: np.ndarray):
        self.weight = ad.Parameter(weight.reshape(n_in, n_out), f"{name}.weight")
        self.bias = ad.Parameter(np.zeros(n_out), f"{name}.bias")

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self) -> List[ad.Parameter]:
        return [self.weight, self.bias]


class SineMLP:
    """MLP with sine hidden activations and sinusoidal-network initialization"""

    def __init__(self, name: str, n_in: int, hidden: List[int], n_out: int, omega: float, rng: np.random.Generator):
        self.omega = omega
        self.layers: List[Linear] = []
        widths = [n_in] + list(hidden)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            if i == 0:
                bound = 1.0 / a
            else:
                bound = math.sqrt(6.0 / a) / omega
            self.layers.append(Linear(f"{name}.layer{i}", a, b, rng.uniform(-bound, bound, (a, b))))
        # xavier uniform output layer
        bound = math.sqrt(6.0 / (widths[-1] + n_out))
        self.layers.append(
            Linear(f"{name}.layer{len(hidden)}", widths[-1], n_out, rng.uniform(-bound, bound, (widths[-1], n_out)))
        )

    @property
    def n_in(self) -> int:
        return self.layers[0].weight.shape[0]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        for layer in self.layers[:-1]:
            x = ad.sine(layer(x), self.omega)
        return self.layers[-1](x)

    def parameters(self) -> List[ad.Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class Encoder:
    """Per level: a 3x3 conv (stride 2 below level 0) followed by a 3x3 conv"""

    def __init__(self, name: str, c_in: int, config: NetConfig, rng: np.random.Generator):
        self.activation = _ACTIVATIONS[config.conv_activation]
        self.blocks: List[Tuple[Conv, Conv]] = []
        previous = c_in
        for level, width in enumerate(config.channels):
            stride = 1 if level == 0 else 2
            self.blocks.append(
                (
                    Conv(f"{name}.level{level}.conv1", previous, width, 3, stride, rng),
                    Conv(f"{name}.level{level}.conv2", width, width, 3, 1, rng),
                )
            )
            previous = width

    def __call__(self, x: ad.Tensor) -> List[ad.Tensor]:
        features = []
        for conv1, conv2 in self.blocks:
            x = self.activation(conv2(self.activation(conv1(x))))
            features.append(x)
        return features

    def parameters(self) -> List[ad.Parameter]:
        return [p for block in self.blocks for conv in block for p in conv.parameters()]


class Decoder:
    """Coarse-to-fine merge of both encoders with 1x1 projected skip connections"""

    def __init__(self, name: str, config: NetConfig, rng: np.random.Generator):
        self.activation = _ACTIVATIONS[config.conv_activation]
        channels = config.channels
        self.levels: List[Dict[str, Conv]] = []
        for level, width in enumerate(channels):
            incoming = channels[level + 1] if level + 1 < len(channels) else width
            self.levels.append(
                {
                    "proj_img": Conv(f"{name}.level{level}.proj_img", width, incoming, 1, 1, rng),
                    "proj_disp": Conv(f"{name}.level{level}.proj_disp", width, incoming, 1, 1, rng),
                    "conv1": Conv(f"{name}.level{level}.conv1", incoming, width, 3, 1, rng),
                    "conv2": Conv(f"{name}.level{level}.conv2", width, width, 3, 1, rng),
                }
            )

    def parameters(self) -> List[ad.Parameter]:
        return [p for level in self.levels for conv in level.values() for p in conv.parameters()]


def _check_normalized(values: np.ndarray, what: str) -> None:
    if values.min() < -_NORMALIZATION_SLACK or values.max() > 1.0 + _NORMALIZATION_SLACK:
        raise DomainError(f"{what} must be normalized to [0, 1], got [{values.min():.4f}, {values.max():.4f}]")


def encode(image: PixelGrid, encoder: Encoder) -> FeaturePyramid:
    """Image features; `image` holds [0, 1] intensities"""
    _check_normalized(image.data, "image")
    x = ad.Tensor(image.data.transpose(2, 0, 1))
    return FeaturePyramid(encoder(x), image.shape)


def encode_disp(d_norm: PixelGrid, encoder: Encoder) -> FeaturePyramid:
    """Disparity features from [0, 1] normalized disparity plus a validity channel"""
    _check_normalized(d_norm.data, "disparity input")
    x = ad.Tensor(d_norm.data.transpose(2, 0, 1))
    return FeaturePyramid(encoder(x), d_norm.shape)


def decode(f_img: FeaturePyramid, f_disp: FeaturePyramid, decoder: Decoder) -> FeaturePyramid:
    n_levels = len(decoder.levels)
    if len(f_img.levels) != n_levels or len(f_disp.levels) != n_levels:
        raise DomainError("encoder pyramids and decoder differ in depth")
    for a, b in zip(f_img.levels, f_disp.levels):
        if a.shape != b.shape:
            raise DomainError(f"misaligned pyramid levels {a.shape} and {b.shape}")

    act = decoder.activation
    outputs: List[Optional[ad.Tensor]] = [None] * n_levels
    for level in range(n_levels - 1, -1, -1):
        layers = decoder.levels[level]
        skip = ad.mul_scalar(
            ad.add(layers["proj_img"](f_img.levels[level]), layers["proj_disp"](f_disp.levels[level])),
            0.5,
        )
        if level == n_levels - 1:
            x = skip
        else:
            _, h, w = f_img.levels[level].shape
            x = ad.add(ad.upsample_nearest(outputs[level + 1], h, w), skip)
        outputs[level] = act(layers["conv2"](act(layers["conv1"](x))))
    return FeaturePyramid(outputs, f_img.input_size)


def sample_point_features(pyramid: FeaturePyramid, xs: np.ndarray, ys: np.ndarray) -> ad.Tensor:
    """(N, sum of level widths) features at reference-frame coordinates"""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    h, w = pyramid.input_size
    if (
        xs.size == 0
        or np.any(xs < 0)
        or np.any(ys < 0)
        or np.any(xs > w - 1)
        or np.any(ys > h - 1)
    ):
        raise DomainError(f"sample coordinates outside the {w}x{h} reference frame")
    samples = []
    for feature, scale in zip(pyramid.levels, pyramid.scales):
        _, level_h, level_w = feature.shape
        # positions beyond the last stride-2 center clamp to the border
        lx = np.minimum(xs * scale, level_w - 1)
        ly = np.minimum(ys * scale, level_h - 1)
        samples.append(ad.bilinear_gather(feature, lx, ly))
    return ad.concat(samples, axis=1)


def run_heads(features: ad.Tensor, model: "RefinementModel") -> HeadOutput:
    config = model.config
    if features.ndim != 2 or features.shape[1] != config.feature_width:
        raise DomainError(f"expected (N, {config.feature_width}) point features, got {features.shape}")

    if config.head == "l1":
        regression = ad.reshape(model.mlp_c(features), (features.shape[0],))
        disparity = regression.values * config.max_disp
        return HeadOutput(
            logits=None,
            offset=None,
            regression=regression,
            prediction=PointPrediction(disparity=disparity, offset=np.zeros_like(disparity)),
        )

    logits = model.mlp_c(features)
    bins = np.argmax(logits.values, axis=1)
    # the argmax conditioning is a constant: no gradient flows back into MLP_C through it
    condition = ad.Tensor((bins / config.max_disp)[:, None])
    offset = ad.reshape(ad.tanh(model.mlp_o(ad.concat([features, condition], axis=1))), (features.shape[0],))
    return HeadOutput(
        logits=logits,
        offset=offset,
        regression=None,
        prediction=PointPrediction(
            disparity=bins + offset.values,
            offset=offset.values.copy(),
            logits=logits.values.copy(),
            bins=bins,
        ),
    )


def predict_point(features: Union[ad.Tensor, np.ndarray], model: "RefinementModel") -> PointPrediction:
    with ad.no_grad():
        return run_heads(ad.as_tensor(features), model).prediction


def prepare_image(image: PixelGrid, config: NetConfig) -> PixelGrid:
    if config.image_channels == 1:
        return to_gray(image)
    if image.channels == 1:
        return PixelGrid(np.repeat(image.data, 3, axis=2))
    return image


def prepare_disparity_input(d_raw: DisparityMap, max_disp: int) -> PixelGrid:
    """[0, 1] normalized disparity with holes set to 0, plus a binary validity channel"""
    valid = d_raw.valid
    values = np.where(valid, d_raw.values, 0.0)
    if values.max() > max_disp:
        logger.warning("raw disparities up to %.1f clipped to max_disp=%d", values.max(), max_disp)
    normalized = np.clip(values / max_disp, 0.0, 1.0)
    return PixelGrid(np.stack([normalized, valid.astype(np.float64)], axis=2))


class RefinementModel:
    def __init__(self, config: NetConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.enc_img = Encoder("enc_img", config.image_channels, config, rng)
        self.enc_disp = Encoder("enc_disp", 2, config, rng)
        self.decoder = Decoder("dec", config, rng)
        if config.head == "classification":
            self.mlp_c = SineMLP("mlp_c", config.feature_width, config.mlp_hidden, config.d_bins, config.sine_omega, rng)
            self.mlp_o: Optional[SineMLP] = SineMLP(
                "mlp_o", config.feature_width + 1, config.mlp_hidden, 1, config.sine_omega, rng
            )
        else:
            self.mlp_c = SineMLP("mlp_c", config.feature_width, config.mlp_hidden, 1, config.sine_omega, rng)
            self.mlp_o = None

    def parameters(self) -> List[ad.Parameter]:
        params = self.enc_img.parameters() + self.enc_disp.parameters() + self.decoder.parameters()
        params += self.mlp_c.parameters()
        if self.mlp_o is not None:
            params += self.mlp_o.parameters()
        return params

    def named_parameters(self) -> Dict[str, ad.Parameter]:
        return {p.name: p for p in self.parameters()}

    def pyramid(self, image: PixelGrid, disparity_input: PixelGrid) -> FeaturePyramid:
        if image.shape != disparity_input.shape:
            raise DomainError(f"image {image.shape} and disparity {disparity_input.shape} differ in size")
        f_img = encode(prepare_image(image, self.config), self.enc_img)
        f_disp = encode_disp(disparity_input, self.enc_disp)
        return decode(f_img, f_disp, self.decoder)

    def forward_points(
        self, image: PixelGrid, disparity_input: PixelGrid, xs: np.ndarray, ys: np.ndarray
    ) -> HeadOutput:
        pyramid = self.pyramid(image, disparity_input)
        return run_heads(sample_point_features(pyramid, xs, ys), self)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters().items()}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if missing or unexpected:
            raise ConfigError(
                f"checkpoint does not match the network config (missing {missing[:3]}, unexpected {unexpected[:3]})"
            )
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ConfigError(f"checkpoint {name} has shape {arrays[name].shape}, expected {p.shape}")
            p.values = np.array(arrays[name], dtype=np.float64)


def model_card_path(checkpoint: Union[str, Path]) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.name + ".card.json")


def save_checkpoint(model: RefinementModel, path: Union[str, Path], extra: Optional[Dict] = None) -> Path:
    path = ad.save_parameters(model.parameters(), path)
    card = {
        "card_version": MODEL_CARD_VERSION,
        "net_config": model.config.model_dump(),
        "init_seed": model.seed,
        "parameter_count": int(sum(p.size for p in model.parameters())),
    }
    card.update(extra or {})
    with open(model_card_path(path), "w", encoding="utf-8") as f:
        json.dump(card, f, indent=2, default=str)
    return path


def load_checkpoint(path: Union[str, Path], expected: Optional[NetConfig] = None) -> RefinementModel:
    card_path = model_card_path(path)
    if not card_path.exists():
        raise InputError(f"model card not found: {card_path}")
    try:
        with open(card_path, "r", encoding="utf-8") as f:
            card = json.load(f)
        config = NetConfig(**card["net_config"])
    except (ValueError, KeyError) as e:
        raise ConfigError(f"invalid model card {card_path}: {e}") from e
    if expected is not None and expected != config:
        raise ConfigError(f"checkpoint {path} was trained with a different network config")
    model = RefinementModel(config, seed=card.get("init_seed", 0))
    model.load_state(ad.load_parameters(path))
    logger.info("loaded %s head model from %s", config.head, path)
    return model


def refine_grid(
    pair: StereoPair,
    d_raw: DisparityMap,
    model: RefinementModel,
    out_w: int,
    out_h: int,
    chunk: int = 8192,
) -> DisparityMap:
    """Refined disparity on a regular out_w x out_h grid, in output-pixel units"""
    left = pair.left
    if (d_raw.width, d_raw.height) != (left.width, left.height):
        raise DomainError(
            f"raw disparity is {d_raw.width}x{d_raw.height}, expected left resolution {left.width}x{left.height}"
        )
    xs = source_positions(left.width, out_w)
    ys = source_positions(left.height, out_h)
    gx, gy = np.meshgrid(xs, ys)
    gx, gy = gx.ravel(), gy.ravel()

    disparity = np.empty(gx.size)
    with ad.no_grad():
        pyramid = model.pyramid(left, prepare_disparity_input(d_raw, model.config.max_disp))
        for start in range(0, gx.size, chunk):
            stop = start + chunk
            features = sample_point_features(pyramid, gx[start:stop], gy[start:stop])
            disparity[start:stop] = run_heads(features, model).prediction.disparity

    disparity *= out_w / left.width
    return DisparityMap.from_array(np.maximum(disparity, 0.0).reshape(out_h, out_w))
