"""Dense-connectivity backbone, attention block placement, classifier head.

Each dense layer is batch-norm -> relu -> 3x3 same conv producing the growth
rate's worth of channels, concatenated onto its input; transitions compress
channels by a 1x1 conv and halve the spatial extent with 2x2 average pooling.
The attention block sits between the last feature map and global average
pooling, and the head is the fixed chain
GAP -> batch-norm -> fc+relu -> dropout -> fc+relu -> dropout -> fc -> softmax.

Freezing follows platform semantics: a frozen layer's parameters receive no
gradient and its batch-norm runs with (and never updates) the running stats,
even in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import CbamBlock, cbam_forward, init_cbam
from .tensor import ParameterSet, ShapeError, Tensor


@dataclass(frozen=True)
class StemConfig:
    kernel: int = 3
    channels: int = 16
    stride: int = 1
    max_pool: bool = False  # 3x3 stride-2 max pool after the stem conv


@dataclass(frozen=True)
class BackboneConfig:
    stem: StemConfig
    blocks: tuple[tuple[int, int], ...]  # (layers, growth rate) per dense block
    compression: float = 0.5
    input_side: int = 64

    def channel_trace(self) -> list[int]:
        """Channel count entering/leaving each stage; asserts the bookkeeping."""
        trace = [self.stem.channels]
        channels = self.stem.channels
        for i, (layers, growth) in enumerate(self.blocks):
            channels = channels + layers * growth
            trace.append(channels)
            if i < len(self.blocks) - 1:
                channels = int(np.floor(self.compression * channels))
                trace.append(channels)
        return trace

    def final_channels(self) -> int:
        return self.channel_trace()[-1]

    def side_trace(self) -> list[int]:
        side = -(-self.input_side // self.stem.stride)  # same-padded stem conv
        trace = [side]
        if self.stem.max_pool:
            side = -(-side // 2)
            trace.append(side)
        for i in range(len(self.blocks) - 1):
            side = (side - 2) // 2 + 1  # 2x2 avg pool, stride 2, valid
            trace.append(side)
        return trace

    def final_side(self) -> int:
        return self.side_trace()[-1]


@dataclass(frozen=True)
class HeadConfig:
    widths: tuple[int, int] = (512, 256)
    dropout_rates: tuple[float, float] = (0.5, 0.3)
    classes: int = 3


@dataclass(frozen=True)
class CbamConfig:
    ratio: int = 8
    kernel: int = 7


PRESETS: dict[str, BackboneConfig] = {
    "dense-tiny": BackboneConfig(
        stem=StemConfig(kernel=3, channels=16, stride=1, max_pool=False),
        blocks=((4, 12), (4, 12), (4, 12)),
        compression=0.5,
        input_side=64,
    ),
    "densenet121": BackboneConfig(
        stem=StemConfig(kernel=7, channels=64, stride=2, max_pool=True),
        blocks=((6, 32), (12, 32), (24, 32), (16, 32)),
        compression=0.5,
        input_side=224,
    ),
}


def get_preset(name: str, input_side: int | None = None) -> BackboneConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    cfg = PRESETS[name]
    if input_side is not None and input_side != cfg.input_side:
        cfg = BackboneConfig(stem=cfg.stem, blocks=cfg.blocks,
                             compression=cfg.compression, input_side=input_side)
    return cfg


@dataclass
class LayerEntry:
    """One parameter-bearing layer in forward order; the freeze unit."""

    name: str
    scope: str  # backbone | cbam | head
    param_names: tuple[str, ...]
    bn_names: tuple[str, ...] = ()
    frozen: bool = False


class Model:
    """Layer graph with named parameters, freeze flags, and activation taps."""

    def __init__(self, backbone: BackboneConfig, head: HeadConfig, cbam: CbamConfig,
                 seed: int = 0):
        if backbone.final_side() < 1:
            raise ShapeError(
                f"spatial extent collapses below 1 before the final block: {backbone.side_trace()}")
        if not 0.0 < backbone.compression <= 1.0:
            raise ValueError(f"compression must be in (0, 1], got {backbone.compression}")
        self.backbone = backbone
        self.head = head
        self.cbam_config = cbam
        self.seed = seed
        self.params = ParameterSet()
        self.bn_states: dict[str, ops.BatchNormState] = {}
        self.layers: list[LayerEntry] = []
        self._rng = np.random.default_rng(seed)
        self._build()

    # -- construction ------------------------------------------------------

    def _glorot(self, shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(self._rng.uniform(-limit, limit, shape))

    def _add_conv(self, name, kh, kw, cin, cout):
        self.params.add(f"{name}.w", self._glorot((kh, kw, cin, cout), kh * kw * cin, cout))
        self.params.add(f"{name}.b", Tensor(np.zeros(cout)))
        return (f"{name}.w", f"{name}.b")

    def _add_bn(self, name, channels):
        self.params.add(f"{name}.gamma", Tensor(np.ones(channels)))
        self.params.add(f"{name}.beta", Tensor(np.zeros(channels)))
        self.bn_states[name] = ops.BatchNormState(channels)
        return (f"{name}.gamma", f"{name}.beta")

    def _build(self):
        bb = self.backbone
        channels = bb.stem.channels
        stem_params = self._add_conv("stem.conv", bb.stem.kernel, bb.stem.kernel, 3, channels)
        stem_params += self._add_bn("stem.bn", channels)
        self.layers.append(LayerEntry("stem", "backbone", stem_params, ("stem.bn",)))

        for b, (n_layers, growth) in enumerate(bb.blocks, start=1):
            for l in range(1, n_layers + 1):
                name = f"block{b}.layer{l}"
                names = self._add_bn(f"{name}.bn", channels)
                names += self._add_conv(f"{name}.conv", 3, 3, channels, growth)
                self.layers.append(LayerEntry(name, "backbone", names, (f"{name}.bn",)))
                channels += growth
            if b < len(bb.blocks):
                out_ch = int(np.floor(bb.compression * channels))
                name = f"trans{b}"
                names = self._add_bn(f"{name}.bn", channels)
                names += self._add_conv(f"{name}.conv", 1, 1, channels, out_ch)
                self.layers.append(LayerEntry(name, "backbone", names, (f"{name}.bn",)))
                channels = out_ch

        assert channels == bb.final_channels()
        self.final_channels = channels

        block = init_cbam(channels, ratio=self.cbam_config.ratio,
                          kernel_size=self.cbam_config.kernel, rng=self._rng)
        cbam_names = []
        for suffix, tensor in block.parameters():
            self.params.add(f"cbam.{suffix}", tensor)
            cbam_names.append(f"cbam.{suffix}")
        self.cbam: CbamBlock = block
        self.layers.append(LayerEntry("cbam", "cbam", tuple(cbam_names)))

        w1, w2 = self.head.widths
        k = self.head.classes
        head_names = self._add_bn("head.bn", channels)
        for fc_name, cin, cout in (("head.fc1", channels, w1), ("head.fc2", w1, w2),
                                   ("head.out", w2, k)):
            self.params.add(f"{fc_name}.w", self._glorot((cin, cout), cin, cout))
            self.params.add(f"{fc_name}.b", Tensor(np.zeros(cout)))
            head_names += (f"{fc_name}.w", f"{fc_name}.b")
        self.layers.append(LayerEntry("head", "head", head_names, ("head.bn",)))

    # -- forward -----------------------------------------------------------

    def _bn(self, name: str, x: Tensor, mode: str, frozen: bool) -> Tensor:
        effective = "infer" if (mode == "infer" or frozen) else "train"
        return ops.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                              self.bn_states[name], effective)

    def forward(self, batch: Tensor, mode: str,
                rng: np.random.Generator | None = None,
                retain_tap_grads: bool = False) -> tuple[Tensor, dict[str, Tensor]]:
        """Run the full network; returns (probabilities, named activation taps)."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        side = self.backbone.input_side
        if batch.data.ndim != 4 or batch.data.shape[1:] != (side, side, 3):
            raise ShapeError(
                f"expected input batch of shape (B, {side}, {side}, 3), got {batch.shape}")
        if mode == "train" and rng is None and max(self.head.dropout_rates) > 0:
            raise ValueError("train-mode forward needs an rng stream for dropout")

        frozen = {e.name: e.frozen for e in self.layers}
        bb = self.backbone

        x = ops.conv2d(batch, self.params["stem.conv.w"], self.params["stem.conv.b"],
                       stride=bb.stem.stride, padding="same")
        x = ops.relu(self._bn("stem.bn", x, mode, frozen["stem"]))
        if bb.stem.max_pool:
            x = ops.max_pool2d(x, size=3, stride=2, padding="same")

        for b, (n_layers, growth) in enumerate(bb.blocks, start=1):
            for l in range(1, n_layers + 1):
                name = f"block{b}.layer{l}"
                h = ops.relu(self._bn(f"{name}.bn", x, mode, frozen[name]))
                h = ops.conv2d(h, self.params[f"{name}.conv.w"], self.params[f"{name}.conv.b"],
                               stride=1, padding="same")
                x = ops.concat_channels([x, h])
            if b < len(bb.blocks):
                name = f"trans{b}"
                h = ops.relu(self._bn(f"{name}.bn", x, mode, frozen[name]))
                h = ops.conv2d(h, self.params[f"{name}.conv.w"], self.params[f"{name}.conv.b"],
                               stride=1, padding="same")
                x = ops.avg_pool2d(h, size=2, stride=2)

        taps: dict[str, Tensor] = {}
        if retain_tap_grads:
            x.requires_grad = True
        taps["final_feature_map"] = x

        x = cbam_forward(x, self.cbam)
        if retain_tap_grads:
            x.requires_grad = True
        taps["post_cbam"] = x

        batch_size = batch.data.shape[0]
        x = ops.reshape(ops.pool(x, "global_avg"), (batch_size, self.final_channels))
        x = self._bn("head.bn", x, mode, frozen["head"])
        for fc, rate in zip(("head.fc1", "head.fc2"), self.head.dropout_rates):
            x = ops.relu(ops.affine(x, self.params[f"{fc}.w"], self.params[f"{fc}.b"]))
            x = ops.dropout(x, rate, mode, rng)
        logits = ops.affine(x, self.params["head.out.w"], self.params["head.out.b"])
        if retain_tap_grads:
            logits.requires_grad = True
        taps["logits"] = logits
        return ops.softmax(logits), taps

    # -- freeze control ----------------------------------------------------

    def backbone_layers(self) -> list[LayerEntry]:
        return [e for e in self.layers if e.scope == "backbone"]

    def set_trainable(self, unfreeze_last_n: int):
        """Freeze all backbone layers except the last n; attention and head stay trainable."""
        backbone = self.backbone_layers()
        if not 0 <= unfreeze_last_n <= len(backbone):
            raise ValueError(
                f"unfreeze_last_n must be in [0, {len(backbone)}], got {unfreeze_last_n}")
        cut = len(backbone) - unfreeze_last_n
        for i, entry in enumerate(backbone):
            entry.frozen = i < cut
        for entry in self.layers:
            if entry.scope != "backbone":
                entry.frozen = False
            for pname in entry.param_names:
                self.params.set_frozen(pname, entry.frozen)


def build_model(backbone: BackboneConfig, head: HeadConfig | None = None,
                cbam: CbamConfig | None = None, seed: int = 0) -> Model:
    return Model(backbone, head or HeadConfig(), cbam or CbamConfig(), seed=seed)


def count_parameters(model: Model) -> tuple[int, int]:
    """(total, trainable) parameter scalars; trainable respects freeze flags."""
    return model.params.total_count(), model.params.trainable_count()
