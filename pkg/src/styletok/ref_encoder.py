"""Reference encoder: variable-length log-mel in, fixed-length vector out.

Six stride-2 3x3 convolutions (batch norm + ReLU after each) treat the
spectrogram as a one-channel image, then a unidirectional GRU consumes the
time axis of the reduced map (frequency and channels flattened per step);
the final GRU state is the reference embedding. Ceil-division 'same'
padding keeps at least one frame alive at every stage, so references as
short as a single frame are legal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import BatchNorm, Conv2dSame, GRUCell, Module
from .tensor import Tensor, mul, relu, reshape, sub

FULL_SCALE_CHANNELS = (32, 32, 64, 64, 128, 128)
DESK_CHANNELS = (8, 8, 16, 16, 32, 32)


@dataclass(frozen=True)
class RefEncoderConfig:
    conv_channels: tuple = DESK_CHANNELS
    gru_units: int = 32
    n_mels: int = 80

    def __post_init__(self):
        if len(self.conv_channels) != 6:
            raise ConfigError(
                f"reference encoder needs exactly 6 conv layers, got {len(self.conv_channels)}")
        if any(c <= 0 for c in self.conv_channels) or self.gru_units <= 0:
            raise ConfigError("reference encoder sizes must be positive")

    def stage_extents(self, extent: int) -> list:
        """Per-stage ceil-halved extents, e.g. 100 -> [50, 25, 13, 7, 4, 2]."""
        out = []
        for _ in self.conv_channels:
            extent = -(-extent // 2)
            out.append(extent)
        return out

    @property
    def freq_out(self) -> int:
        return self.stage_extents(self.n_mels)[-1]

    @property
    def gru_input_size(self) -> int:
        return self.conv_channels[-1] * self.freq_out


class ReferenceEncoder(Module):
    def __init__(self, cfg: RefEncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.cfg = cfg
        self.convs = []
        self.norms = []
        c_in = 1
        for c_out in cfg.conv_channels:
            self.convs.append(Conv2dSame(c_in, c_out, rng, dtype=dtype))
            self.norms.append(BatchNorm(c_out, dtype=dtype))
            c_in = c_out
        self.gru = GRUCell(cfg.gru_input_size, cfg.gru_units, rng, dtype=dtype)

    def __call__(self, mel: Tensor, mode: str,
                 frame_lengths: np.ndarray | None = None,
                 zoneout_rng=None) -> Tensor:
        """Encode a batch ``[B, T, n_mels]`` of log-mel spectrograms.

        ``frame_lengths`` gives each item's true frame count when the batch
        is padded; GRU updates freeze once an item's reduced time axis is
        exhausted.
        """
        if mel.ndim != 3 or mel.data.shape[2] != self.cfg.n_mels:
            raise ShapeError(
                f"reference encoder expects [B, T, {self.cfg.n_mels}], got {mel.shape}")
        b, t, f = mel.data.shape
        x = reshape(mel, (b, t, f, 1))
        for conv, norm in zip(self.convs, self.norms):
            x = relu(norm(conv(x), mode))
        bt, tt, ft, ct = x.data.shape
        x = reshape(x, (bt, tt, ft * ct))
        h = self.gru.initial_state(b, dtype=mel.data.dtype)
        if frame_lengths is not None:
            steps_per_item = np.ceil(np.asarray(frame_lengths) / 64.0).astype(int)
        else:
            steps_per_item = np.full(b, tt)
        for step in range(tt):
            h_new = self.gru.step(x[:, step, :], h)
            active = (step < steps_per_item).astype(mel.data.dtype)[:, None]
            if np.all(active == 1.0):
                h = h_new
            else:
                keep = Tensor(active)
                h = mul(h_new, keep) + mul(h, sub(1.0, keep))
        return h


def encode_reference(encoder: ReferenceEncoder, mel: np.ndarray,
                     mode: str = "eval") -> np.ndarray:
    """Single-spectrogram convenience wrapper; returns a plain vector."""
    mel = np.asarray(mel)
    if mel.ndim != 2:
        raise ShapeError(f"expected a [T, n_mels] spectrogram, got shape {mel.shape}")
    out = encoder(Tensor(mel[None, :, :].astype(np.float32)), mode)
    return out.data[0]
