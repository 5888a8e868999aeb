"""Four-block 2D U-Net with batch norm and leaky ReLU, applied slice by slice."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .grid import N_CLASSES, LabelMap, Volume


@dataclass
class UNetConfig:
    base_width: int = 8
    depth: int = 4
    in_channels: int = 2
    out_channels: int = N_CLASSES
    leaky_slope: float = 0.01

    def validate(self):
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.out_channels != N_CLASSES:
            raise ValueError(f"out_channels is fixed at {N_CLASSES}")


class UNet:
    """Encoder of ``depth`` conv blocks (pooling between them), mirrored decoder.

    Each conv block is (3x3 conv, BN, leaky ReLU) twice. Decoder stages
    upsample by nearest-neighbour x2, apply a 3x3 conv, concatenate the skip
    connection and run a conv block. A final 1x1 conv gives class logits that
    are softmaxed over channels.
    """

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, dc.Tensor] = {}
        self.bn: dict[str, dc.BatchNormState] = {}
        self.training = True
        widths = [cfg.base_width * 2**i for i in range(cfg.depth)]
        self.widths = widths

        c_in = cfg.in_channels
        for i, w in enumerate(widths):
            self._block(f"enc{i + 1}", c_in, w, rng)
            c_in = w
        for i in reversed(range(cfg.depth - 1)):
            w = widths[i]
            self._conv(f"up{i + 1}.conv", c_in, w, 3, rng)
            self._block(f"dec{i + 1}", 2 * w, w, rng)
            c_in = w
        self._conv("head", c_in, cfg.out_channels, 1, rng)

    # -- construction ---------------------------------------------------------

    def _conv(self, name, c_in, c_out, k, rng):
        limit = np.sqrt(6.0 / (c_in * k * k))
        self.params[f"{name}.w"] = dc.parameter(rng.uniform(-limit, limit, size=(c_out, c_in, k, k)))
        self.params[f"{name}.b"] = dc.parameter(np.zeros(c_out))

    def _block(self, name, c_in, c_out, rng):
        for j, ci in ((1, c_in), (2, c_out)):
            self._conv(f"{name}.conv{j}", ci, c_out, 3, rng)
            self.params[f"{name}.bn{j}.gamma"] = dc.parameter(np.ones(c_out))
            self.params[f"{name}.bn{j}.beta"] = dc.parameter(np.zeros(c_out))
            self.bn[f"{name}.bn{j}"] = dc.BatchNormState.fresh(c_out)

    # -- forward --------------------------------------------------------------

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _apply_conv(self, name, x):
        return dc.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _apply_block(self, name, x):
        for j in (1, 2):
            x = self._apply_conv(f"{name}.conv{j}", x)
            bn = f"{name}.bn{j}"
            x = dc.batchnorm(x, self.params[f"{bn}.gamma"], self.params[f"{bn}.beta"], self.bn[bn], self.training)
            x = dc.leaky_relu(x, self.cfg.leaky_slope)
        return x

    def _layer(self, name, fn, *args):
        try:
            return fn(*args)
        except dc.NonFiniteError as exc:
            raise dc.NonFiniteError(f"layer {name}: {exc}") from None

    def logits(self, x) -> dc.Tensor:
        x = dc.as_tensor(x)
        factor = 2 ** (self.cfg.depth - 1)
        if x.ndim != 4 or x.shape[0] != self.cfg.in_channels:
            raise ValueError(f"expected input ({self.cfg.in_channels}, N, H, W), got {x.shape}")
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {factor}")
        skips = []
        for i in range(self.cfg.depth):
            name = f"enc{i + 1}"
            x = self._layer(name, self._apply_block, name, x)
            if i < self.cfg.depth - 1:
                skips.append(x)
                x = dc.maxpool2(x)
        for i in reversed(range(self.cfg.depth - 1)):
            up = dc.upsample2_nearest(x)
            up = self._layer(f"up{i + 1}", self._apply_conv, f"up{i + 1}.conv", up)
            x = dc.concat_channels(up, skips[i])
            x = self._layer(f"dec{i + 1}", self._apply_block, f"dec{i + 1}", x)
        return self._layer("head", self._apply_conv, "head", x)

    def forward(self, x) -> dc.Tensor:
        """Class probabilities (6, N, H, W) for a batch of (2, N, H, W) slices."""
        return self._layer("softmax", dc.softmax_channels, self.logits(x))

    __call__ = forward

    # -- parameters and checkpoints -----------------------------------------

    def parameters(self) -> list[dc.Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.params.items()}
        for name, s in self.bn.items():
            state[f"{name}.running_mean"] = s.mean
            state[f"{name}.running_var"] = s.var
        return state

    def load_state_dict(self, state: dict):
        for name, p in self.params.items():
            p.data = np.array(state[name], dtype=p.data.dtype).reshape(p.shape)
        for name, s in self.bn.items():
            s.mean[...] = state[f"{name}.running_mean"]
            s.var[...] = state[f"{name}.running_var"]

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_dict().items()}

    def save(self, path):
        path = Path(path)
        dc.save_checkpoint(self.state_dict(), path)
        index = json.loads(path.with_suffix(".json").read_text())
        index["unet"] = asdict(self.cfg)
        path.with_suffix(".json").write_text(json.dumps(index, indent=1))

    @classmethod
    def load(cls, path) -> "UNet":
        path = Path(path)
        index = json.loads(path.with_suffix(".json").read_text())
        model = cls(UNetConfig(**index["unet"]), np.random.default_rng(0))
        model.load_state_dict(dc.load_checkpoint(path))
        return model.eval()


def build(cfg: UNetConfig, rng: np.random.Generator) -> UNet:
    return UNet(cfg, rng)


def predict_volume(model: UNet, v: Volume, batch_size: int = 8):
    """Slice-wise inference assembled into a (6, D, H, W) probability field.

    Returns the probabilities and the argmax LabelMap; ties go to the lower
    class index.
    """
    was_training = model.training
    model.eval()
    D = v.data.shape[1]
    data = v.data.astype(np.float32, copy=False)
    chunks = []
    try:
        with dc.no_grad():
            for start in range(0, D, batch_size):
                chunks.append(model.forward(data[:, start : start + batch_size]).data)
    finally:
        model.train(was_training)
    probs = np.concatenate(chunks, axis=1)
    labels = probs.argmax(axis=0).astype(np.uint8)
    return probs, LabelMap(labels, v.in_plane_spacing_mm, v.slice_thickness_mm)
