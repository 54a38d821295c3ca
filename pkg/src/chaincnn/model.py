"""Sequence labeling models: windowed fully-connected and multi-scale conv.

A convolutional model is a chain of blocks. Each block runs its parallel
multi-scale convolutions, depth-concatenates them, applies batch norm,
ReLU and dropout, then optionally a single follow-up convolution with
the same norm/ReLU/dropout treatment. With skip connections enabled,
block k >= 2 additionally projects the previous block's output through a
width-1 convolution and depth-concatenates that onto its own output.
The head gathers a centered window of trunk features per position and
runs it through fully-connected layers into 9-class logits (8 structure
classes plus no-seq, which only padding targets would use).

Padding is inert by construction: the mask zeroes the raw input and
every block output, so convolutions near a sequence edge see zeros, and
a record's padded tail can never influence a masked-in position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import NUM_CLASSES, NUM_FEATURES, NUM_PSSM
from .errors import ConfigError, ModeError, ShapeError


@dataclass(frozen=True)
class BlockSpec:
    """One conv block: parallel (width, depth) filters plus an optional
    single follow-up convolution."""

    multi_scale: tuple[tuple[int, int], ...] = ()
    single_scale: tuple[int, int] | None = None
    skip_projection_depth: int = 96

    def validate(self):
        if not self.multi_scale and self.single_scale is None:
            raise ConfigError("a block needs at least one convolution")
        for width, depth in list(self.multi_scale) + (
            [self.single_scale] if self.single_scale else []
        ):
            if width < 1 or width % 2 == 0:
                raise ConfigError(f"filter width {width} must be odd and positive")
            if depth < 1:
                raise ConfigError(f"filter depth {depth} must be positive")
        if self.skip_projection_depth < 1:
            raise ConfigError("skip projection depth must be positive")

    def max_width(self) -> int:
        widths = [w for w, _ in self.multi_scale]
        if self.single_scale:
            widths.append(self.single_scale[0])
        return max(widths)


@dataclass(frozen=True)
class ModelConfig:
    kind: str  # "fully_connected" | "convolutional"
    fc_window: int
    fc_layers: int
    fc_width: int = 455
    blocks: tuple[BlockSpec, ...] = ()
    skip_connections: bool = False
    conditioned: bool = False
    dropout_rate: float = 0.4
    fc_max_norm: float = 0.150

    def validate(self):
        if self.kind not in ("fully_connected", "convolutional"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.fc_window < 1 or self.fc_window % 2 == 0:
            raise ConfigError(f"fc_window {self.fc_window} must be odd and positive")
        if self.fc_layers < 1 or self.fc_width < 1:
            raise ConfigError("fc_layers and fc_width must be positive")
        if self.kind == "convolutional" and not self.blocks:
            raise ConfigError("convolutional models need at least one block")
        if self.kind == "fully_connected" and self.blocks:
            raise ConfigError("fully_connected models take no blocks")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate {self.dropout_rate} outside [0, 1)")
        if self.fc_max_norm <= 0:
            raise ConfigError("fc_max_norm must be positive")
        for b in self.blocks:
            b.validate()

    @property
    def input_channels(self) -> int:
        return NUM_FEATURES + (NUM_CLASSES if self.conditioned else 0)


@dataclass(frozen=True)
class ReceptiveField:
    width: int
    radius: int
    conditioning_shift: int  # radius + 1: the closest visible label is y[i-1]


def receptive_field(config: ModelConfig) -> ReceptiveField:
    """Input width visible to one output position, down the deepest path."""
    width = config.fc_window
    for b in config.blocks:
        if b.multi_scale:
            width += max(w for w, _ in b.multi_scale) - 1
        if b.single_scale:
            width += b.single_scale[0] - 1
    radius = (width - 1) // 2
    return ReceptiveField(width=width, radius=radius, conditioning_shift=radius + 1)


def _block_channels(config: ModelConfig) -> list[dict]:
    """Per-block channel arithmetic; returns dicts of the intermediate widths."""
    plans = []
    c = config.input_channels
    prev_out = None
    for k, b in enumerate(config.blocks, start=1):
        plan = {"in": c}
        mid = sum(d for _, d in b.multi_scale) if b.multi_scale else c
        plan["concat"] = mid
        out = b.single_scale[1] if b.single_scale else mid
        plan["single_out"] = out
        if config.skip_connections and k >= 2:
            plan["skip_in"] = prev_out
            out = out + b.skip_projection_depth
        plan["out"] = out
        plans.append(plan)
        prev_out = c = out
    return plans


def parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for a config."""
    total = 0
    plans = _block_channels(config)
    for b, plan in zip(config.blocks, plans):
        c_in = plan["in"]
        for width, depth in b.multi_scale:
            total += width * c_in * depth + depth
        mid = plan["concat"]
        if b.multi_scale:
            total += 2 * mid  # norm scale + shift
        if b.single_scale:
            width, depth = b.single_scale
            total += width * mid * depth + depth + 2 * depth
        if "skip_in" in plan:
            total += plan["skip_in"] * b.skip_projection_depth + b.skip_projection_depth
    trunk_out = plans[-1]["out"] if plans else config.input_channels
    n_in = config.fc_window * trunk_out
    for _ in range(config.fc_layers):
        total += n_in * config.fc_width + config.fc_width
        n_in = config.fc_width
    total += n_in * NUM_CLASSES + NUM_CLASSES
    return total


class Model:
    """A built model: config plus named layers and non-trainable buffers."""

    def __init__(self, config: ModelConfig, layers: dict[str, T.LayerParams], buffers: dict[str, T.Tensor]):
        self.config = config
        self.layers = layers
        self.buffers = buffers

    # -- parameter bookkeeping ------------------------------------------

    def named_tensors(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        for lp in self.layers.values():
            out.update(lp.tensors())
        out.update(self.buffers)
        return out

    def trainable(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        for lp in self.layers.values():
            out.update(lp.trainable())
        return out

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.trainable().values())

    def dense_layers(self) -> list[T.LayerParams]:
        """The max-norm constrained layers: the FC stack and the output layer."""
        names = [f"fc{i + 1}" for i in range(self.config.fc_layers)] + ["output"]
        return [self.layers[n] for n in names]

    def receptive_field(self) -> ReceptiveField:
        return receptive_field(self.config)

    # -- forward passes -------------------------------------------------

    def forward(
        self,
        features: np.ndarray,
        mask: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> T.Tensor:
        """Per-position logits [batch, length, 9]."""
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 3 or features.shape[2] != self.config.input_channels:
            raise ShapeError(
                f"expected [batch, length, {self.config.input_channels}] features, "
                f"got {features.shape}"
            )
        cfg = self.config
        drop = cfg.dropout_rate
        h = T.apply_mask(T.Tensor(features), mask)
        for k in range(1, len(cfg.blocks) + 1):
            b = cfg.blocks[k - 1]
            block_in = h
            if b.multi_scale:
                branches = [
                    T.conv1d(block_in, self.layers[f"block{k}.multi{i}"].weights,
                             self.layers[f"block{k}.multi{i}"].biases)
                    for i in range(len(b.multi_scale))
                ]
                m = T.concat_channels(branches)
                m = T.batch_norm(m, mask, self.layers[f"block{k}.multi_norm"], train)
                m = T.dropout(T.relu(m), drop, train, rng)
                m = T.apply_mask(m, mask)
            else:
                m = block_in
            if b.single_scale:
                s = T.conv1d(m, self.layers[f"block{k}.single"].weights,
                             self.layers[f"block{k}.single"].biases)
                s = T.batch_norm(s, mask, self.layers[f"block{k}.single_norm"], train)
                s = T.dropout(T.relu(s), drop, train, rng)
                s = T.apply_mask(s, mask)
            else:
                s = m
            if cfg.skip_connections and k >= 2:
                proj = T.conv1d(block_in, self.layers[f"block{k}.skip"].weights,
                                self.layers[f"block{k}.skip"].biases)
                h = T.apply_mask(T.concat_channels([s, proj]), mask)
            else:
                h = s
        h = T.gather_windows(h, cfg.fc_window)
        for i in range(cfg.fc_layers):
            lp = self.layers[f"fc{i + 1}"]
            h = T.dropout(T.relu(T.dense(h, lp.weights, lp.biases)), drop, train, rng)
        out = self.layers["output"]
        return T.dense(h, out.weights, out.biases)

    def forward_window(
        self,
        features: np.ndarray,
        mask: np.ndarray,
        context: np.ndarray | None = None,
    ) -> np.ndarray:
        """Log probabilities at the center of a receptive-field-sized window.

        features: [width, 42] or [batch, width, 42] raw (unconditioned)
        features; mask marks real positions inside the window; for
        conditioned models ``context`` gives, per window position, the
        already-shifted label index (0..8) to one-hot into the
        conditioning channels. Returns [9] or [batch, 9] float64.
        """
        features = np.asarray(features, dtype=np.float32)
        squeeze = features.ndim == 2
        if squeeze:
            features = features[None]
            mask = np.asarray(mask)[None]
            context = None if context is None else np.asarray(context)[None]
        width = self.receptive_field().width
        if features.shape[1] != width:
            raise ShapeError(
                f"window length {features.shape[1]} != receptive field width {width}"
            )
        if self.config.conditioned:
            if context is None:
                raise ModeError("conditioned model needs a label context")
            chans = np.zeros(features.shape[:2] + (NUM_CLASSES,), dtype=np.float32)
            b_idx, p_idx = np.indices(features.shape[:2])
            chans[b_idx, p_idx, np.asarray(context, dtype=np.int64)] = 1.0
            features = np.concatenate([features, chans], axis=2)
        elif context is not None:
            raise ModeError("unconditioned model takes no label context")
        logits = self.forward(features, np.asarray(mask, dtype=np.float32), train=False)
        center = T.log_softmax(logits.data[:, width // 2, :])
        return center[0] if squeeze else center


def build(config: ModelConfig, rng: np.random.Generator) -> Model:
    """Initialize all layers; creation order is fixed, so equal seeds give
    bit-identical models."""
    config.validate()
    layers: dict[str, T.LayerParams] = {}

    def conv_layer(name, width, c_in, c_out):
        layers[name] = T.LayerParams(
            name=name,
            weights=T.init_weights((width, c_in, c_out), fan_in=width * c_in, rng=rng),
            biases=T.init_bias((c_out,)),
        )

    def norm_layer(name, ch):
        layers[name] = T.LayerParams(
            name=name,
            weights=T.Tensor(np.ones(ch, dtype=np.float32), requires_grad=True),
            biases=T.Tensor(np.zeros(ch, dtype=np.float32), requires_grad=True),
            extra={
                "running_mean": T.Tensor(np.zeros(ch, dtype=np.float32)),
                "running_var": T.Tensor(np.ones(ch, dtype=np.float32)),
            },
        )

    def dense_layer(name, n_in, n_out):
        layers[name] = T.LayerParams(
            name=name,
            weights=T.init_weights((n_in, n_out), fan_in=n_in, rng=rng),
            biases=T.init_bias((n_out,)),
        )

    plans = _block_channels(config)
    for k, (b, plan) in enumerate(zip(config.blocks, plans), start=1):
        for i, (width, depth) in enumerate(b.multi_scale):
            conv_layer(f"block{k}.multi{i}", width, plan["in"], depth)
        if b.multi_scale:
            norm_layer(f"block{k}.multi_norm", plan["concat"])
        if b.single_scale:
            width, depth = b.single_scale
            conv_layer(f"block{k}.single", width, plan["concat"], depth)
            norm_layer(f"block{k}.single_norm", depth)
        if "skip_in" in plan:
            conv_layer(f"block{k}.skip", 1, plan["skip_in"], b.skip_projection_depth)

    trunk_out = plans[-1]["out"] if plans else config.input_channels
    n_in = config.fc_window * trunk_out
    for i in range(config.fc_layers):
        dense_layer(f"fc{i + 1}", n_in, config.fc_width)
        n_in = config.fc_width
    dense_layer("output", n_in, NUM_CLASSES)

    buffers = {
        "input_norm.pssm_mean": T.Tensor(np.zeros(NUM_PSSM, dtype=np.float32)),
        "input_norm.pssm_std": T.Tensor(np.ones(NUM_PSSM, dtype=np.float32)),
    }
    return Model(config, layers, buffers)


def ablation_model_config(row: int, conditioned: bool = False) -> ModelConfig:
    """Model structure for ablation ladder rows 1..9 (row 9 is the final
    convolutional architecture)."""
    if not 1 <= row <= 9:
        raise ConfigError(f"ablation row must be in 1..9, got {row}")
    if row == 1:
        return ModelConfig(
            kind="fully_connected", fc_window=17, fc_layers=5,
            conditioned=conditioned, dropout_rate=0.2, fc_max_norm=0.04614,
        )
    small_multi = ((3, 32), (5, 32), (7, 32))
    big_multi = ((3, 64), (7, 64), (9, 64))
    structure = {
        2: ((BlockSpec(single_scale=(7, 32)),) * 1, 17, 5, False),
        3: ((BlockSpec(single_scale=(7, 32)),) * 2, 17, 5, False),
        4: ((BlockSpec(multi_scale=small_multi),) * 1, 11, 5, False),
        5: ((BlockSpec(multi_scale=small_multi),) * 1, 11, 2, False),
        6: ((BlockSpec(multi_scale=small_multi, single_scale=(7, 32)),) * 1, 11, 2, False),
        7: ((BlockSpec(multi_scale=big_multi, single_scale=(9, 24)),) * 2, 11, 2, False),
        8: ((BlockSpec(multi_scale=big_multi, single_scale=(9, 24)),) * 5, 11, 2, False),
        9: ((BlockSpec(multi_scale=big_multi, single_scale=(9, 24)),) * 2, 11, 2, True),
    }
    blocks, window, n_fc, residual = structure[row]
    return ModelConfig(
        kind="convolutional", fc_window=window, fc_layers=n_fc,
        blocks=blocks, skip_connections=residual, conditioned=conditioned,
        dropout_rate=0.4, fc_max_norm=0.150,
    )
