"""Text-to-spectrogram model with style conditioning at the encoder states.

Architecture (desk scale): symbol embedding -> bidirectional GRU (summed
directions, tanh) -> per-symbol style addition -> autoregressive decoder
(prenet, content-based tanh attention, two zoneout-LSTM layers, linear
projection emitting two mel frames per step) -> dilated 1-D conv post-net
producing linear magnitudes.

The model works in normalized feature units: mel features are
``(log_mel - log(1e-5)) / 10`` so silence is exactly 0, and linear features
are magnitudes scaled by ``4 / win_length`` so a full-scale tone peaks near
1. Public results are converted back to true log-mel / magnitude.

Three conditioning modes share every non-style parameter name: ``gst``
(reference encoder + token bank), ``direct`` (reference encoder + learned
projection), and ``none`` (text only).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import DspConfig
from .errors import ConfigError, ShapeError
from .nn import Embedding, GRUCell, LSTMCell, Linear, Module, glorot
from .ref_encoder import RefEncoderConfig, ReferenceEncoder
from .style_tokens import (DirectProjection, StyleConfig, TokenBank, resolve)
from .tensor import (Parameter, Tape, Tensor, absolute, add, concat, dropout,
                     getitem, matmul, mul, pad, relu, reshape, softmax,
                     softplus, sub, tanh, tsum, zoneout)

FLOOR_LOG = float(np.log(1e-5))
FEAT_SCALE = 10.0
MODES = ("gst", "direct", "none")
END_SILENCE_FRAMES = 4


def mel_to_feat(log_mel: np.ndarray) -> np.ndarray:
    return ((log_mel - FLOOR_LOG) / FEAT_SCALE).astype(np.float32)


def feat_to_mel(feat: np.ndarray) -> np.ndarray:
    return feat * FEAT_SCALE + FLOOR_LOG


def lin_gain(dsp: DspConfig) -> float:
    # periodic Hann sums to win/2, so 4/win maps a unit sine peak to ~1
    return 4.0 / dsp.win_length


def mag_to_feat(mag: np.ndarray, dsp: DspConfig) -> np.ndarray:
    return (mag * lin_gain(dsp)).astype(np.float32)


def feat_to_mag(feat: np.ndarray, dsp: DspConfig) -> np.ndarray:
    return np.maximum(feat, 0.0) / lin_gain(dsp)


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "gst"
    vocab: int = 16
    sym_embed_dim: int = 64
    enc_units: int = 128
    dec_cells: int = 64
    frames_per_step: int = 2
    n_mels: int = 80
    n_lin_bins: int = 513
    prenet_dim: int = 64
    prenet_dropout: float = 0.5
    zoneout_prob: float = 0.1
    att_dim: int = 64
    postnet_hidden: int = 64
    stop_threshold: float = 0.12
    max_steps: int = 200
    style: StyleConfig = field(default_factory=StyleConfig)
    ref: RefEncoderConfig = field(default_factory=RefEncoderConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"model mode must be one of {MODES}, got {self.mode!r}")
        if self.enc_units != self.style.style_dim:
            raise ConfigError(
                f"text encoder state size {self.enc_units} must equal the "
                f"style embedding size {self.style.style_dim}")
        if self.style.ref_dim != self.ref.gru_units:
            raise ConfigError(
                f"style query size {self.style.ref_dim} must equal the "
                f"reference embedding size {self.ref.gru_units}")
        if self.frames_per_step < 1:
            raise ConfigError("frames_per_step must be >= 1")

    @property
    def pad_id(self) -> int:
        return self.vocab


@dataclass
class SynthesisResult:
    """Free-running synthesis output in physical units."""

    mel: np.ndarray        # [T, n_mels] log-mel
    linear: np.ndarray     # [T, n_lin_bins] magnitude
    alignment: np.ndarray  # [decoder_steps, n_symbols]
    stop_step: int


class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Embedding(cfg.vocab + 1, cfg.sym_embed_dim, rng)
        self.fwd = GRUCell(cfg.sym_embed_dim, cfg.enc_units, rng)
        self.bwd = GRUCell(cfg.sym_embed_dim, cfg.enc_units, rng)

    def __call__(self, symbols: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Encode padded symbol ids ``[B, N]`` into states ``[B, N, d_enc]``."""
        symbols = np.asarray(symbols)
        if symbols.size and symbols.max() > self.cfg.vocab:
            raise ShapeError(f"symbol id {symbols.max()} outside vocabulary")
        b, n = symbols.shape
        lengths = np.asarray(lengths)
        # per-item reversal indices: valid prefix reversed, padding untouched
        rev = np.empty((b, n), dtype=int)
        for i, ln in enumerate(lengths):
            rev[i, :ln] = np.arange(ln - 1, -1, -1)
            rev[i, ln:] = np.arange(ln, n)
        emb = self.embed(symbols)
        emb_rev = getitem(emb, (np.arange(b)[:, None], rev))
        fwd_states = self._run(self.fwd, emb, lengths, b, n)
        bwd_states = self._run(self.bwd, emb_rev, lengths, b, n)
        bwd_unrev = getitem(bwd_states, (np.arange(b)[:, None], rev))
        return tanh(add(fwd_states, bwd_unrev))

    def _run(self, cell: GRUCell, emb: Tensor, lengths, b: int, n: int) -> Tensor:
        h = cell.initial_state(b, dtype=emb.data.dtype)
        outs = []
        for step in range(n):
            h_new = cell.step(emb[:, step, :], h)
            active = (step < lengths).astype(emb.data.dtype)[:, None]
            if np.all(active == 1.0):
                h = h_new
            else:
                keep = Tensor(active)
                h = add(mul(h_new, keep), mul(h, sub(1.0, keep)))
            outs.append(reshape(h, (b, 1, -1)))
        return concat(outs, axis=1)


def condition(states: Tensor, assignment: Tensor) -> Tensor:
    """Add one style vector to every text encoder state (pure addition).

    ``assignment`` is ``[B, 1, d]`` (broadcast) or ``[B, N, d]`` (per-symbol,
    e.g. morphing).
    """
    if states.data.shape[-1] != assignment.data.shape[-1]:
        raise ShapeError(
            f"style dim {assignment.data.shape[-1]} does not match encoder "
            f"state dim {states.data.shape[-1]}")
    return add(states, assignment)


class ContentAttention(Module):
    """Additive (tanh) attention over the conditioned text states."""

    def __init__(self, d_states: int, d_query: int, att_dim: int,
                 rng: np.random.Generator):
        self.w_states = Parameter(glorot(rng, (d_states, att_dim), d_states, att_dim))
        self.w_query = Parameter(glorot(rng, (d_query, att_dim), d_query, att_dim))
        self.v = Parameter(glorot(rng, (att_dim, 1), att_dim, 1))

    def keys(self, states: Tensor) -> Tensor:
        return matmul(states, self.w_states)

    def __call__(self, query: Tensor, keys: Tensor, states: Tensor,
                 mask_bias: np.ndarray | None):
        b, n, att = keys.data.shape
        q = matmul(query, self.w_query)
        hidden = tanh(add(keys, reshape(q, (b, 1, att))))
        scores = reshape(matmul(hidden, self.v), (b, n))
        if mask_bias is not None:
            scores = add(scores, Tensor(mask_bias))
        w = softmax(scores, axis=-1)
        ctx = reshape(matmul(reshape(w, (b, 1, n)), states), (b, -1))
        return ctx, w


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        r, nm = cfg.frames_per_step, cfg.n_mels
        self.prenet = Linear(r * nm, cfg.prenet_dim, rng)
        self.att = ContentAttention(cfg.enc_units, cfg.prenet_dim + cfg.dec_cells,
                                    cfg.att_dim, rng)
        self.lstm1 = LSTMCell(cfg.prenet_dim + cfg.enc_units, cfg.dec_cells, rng)
        self.lstm2 = LSTMCell(cfg.dec_cells + cfg.enc_units, cfg.dec_cells, rng)
        self.out = Linear(cfg.dec_cells + cfg.enc_units, r * nm, rng)

    def initial_state(self, batch: int):
        return {
            "lstm1": self.lstm1.initial_state(batch),
            "lstm2": self.lstm2.initial_state(batch),
        }

    def step(self, frames_in: Tensor, keys: Tensor, states: Tensor,
             mask_bias, state: dict, mode: str, rng):
        p = relu(self.prenet(frames_in))
        p = dropout(p, self.cfg.prenet_dropout, rng, train=(mode == "train"))
        h2_prev = state["lstm2"][0]
        ctx, w = self.att(concat([p, h2_prev], axis=1), keys, states, mask_bias)
        zp = self.cfg.zoneout_prob
        h1n, c1n = self.lstm1.step(concat([p, ctx], axis=1), state["lstm1"])
        h1 = zoneout(state["lstm1"][0], h1n, zp, mode, rng)
        c1 = zoneout(state["lstm1"][1], c1n, zp, mode, rng)
        h2n, c2n = self.lstm2.step(concat([h1, ctx], axis=1), state["lstm2"])
        h2 = zoneout(state["lstm2"][0], h2n, zp, mode, rng)
        c2 = zoneout(state["lstm2"][1], c2n, zp, mode, rng)
        y = self.out(concat([h2, ctx], axis=1))
        return y, w, {"lstm1": (h1, c1), "lstm2": (h2, c2)}


class Conv1dSame(Module):
    """Kernel-3 dilated 1-D convolution along time, channels last."""

    def __init__(self, c_in: int, c_out: int, dilation: int,
                 rng: np.random.Generator):
        self.dilation = dilation
        self.w = Parameter(glorot(rng, (3, c_in, c_out), 3 * c_in, 3 * c_out))
        self.b = Parameter(np.zeros(c_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        b, t, c = x.data.shape
        d = self.dilation
        xp = pad(x, ((0, 0), (d, d), (0, 0)))
        y = None
        for k in range(3):
            term = matmul(xp[:, k * d:k * d + t, :], self.w[k])
            y = term if y is None else add(y, term)
        return add(y, self.b)


class Postnet(Module):
    """Dilated conv stack (dilations 1/2/4) mapping mel to linear features."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.conv1 = Conv1dSame(cfg.n_mels, cfg.postnet_hidden, 1, rng)
        self.conv2 = Conv1dSame(cfg.postnet_hidden, cfg.postnet_hidden, 2, rng)
        self.conv3 = Conv1dSame(cfg.postnet_hidden, cfg.n_lin_bins, 4, rng)

    def __call__(self, mel: Tensor) -> Tensor:
        x = tanh(self.conv1(mel))
        x = tanh(self.conv2(x))
        return softplus(self.conv3(x))


def masked_l1(pred: Tensor, target: np.ndarray, frame_mask: np.ndarray) -> Tensor:
    """Mean absolute error over unmasked frames (all channels)."""
    diff = absolute(sub(pred, Tensor(target)))
    masked = mul(diff, Tensor(frame_mask[:, :, None].astype(target.dtype)))
    denom = float(frame_mask.sum()) * target.shape[-1]
    return mul(tsum(masked), 1.0 / denom)


def reconstruction_loss(pred_mel: Tensor, pred_linear: Tensor,
                        target_mel: np.ndarray, target_linear: np.ndarray,
                        frame_mask: np.ndarray | None = None) -> Tensor:
    """Mel L1 plus half-weighted linear L1, padded frames masked out."""
    if pred_mel.data.shape != target_mel.shape:
        raise ShapeError(f"mel shapes differ: {pred_mel.shape} vs {target_mel.shape}")
    if frame_mask is None:
        frame_mask = np.ones(target_mel.shape[:2], dtype=target_mel.dtype)
    mel_term = masked_l1(pred_mel, target_mel, frame_mask)
    lin_term = masked_l1(pred_linear, target_linear, frame_mask)
    return add(mel_term, mul(lin_term, 0.5))


class Synthesizer(Module):
    """Full model; construction order keeps parameter names mode-stable."""

    def __init__(self, cfg: ModelConfig, dsp: DspConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
        self.cfg = cfg
        self.dsp = dsp
        self.text_encoder = TextEncoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.postnet = Postnet(cfg, rng)
        if cfg.mode != "none":
            self.ref_encoder = ReferenceEncoder(cfg.ref, rng)
        if cfg.mode == "gst":
            self.token_bank = TokenBank(cfg.style, rng)
        if cfg.mode == "direct":
            self.direct_proj = DirectProjection(cfg.ref.gru_units,
                                                cfg.style.style_dim, rng)

    # -- style paths ---------------------------------------------------------

    def style_from_reference(self, ref_mel: Tensor, mode: str,
                             frame_lengths=None, zoneout_rng=None):
        """Reference log-mel batch -> (style [B, d], attention weights or None)."""
        ref_emb = self.ref_encoder(ref_mel, mode, frame_lengths)
        if self.cfg.mode == "gst":
            weights, style = self.token_bank.attend(ref_emb)
            return style, weights
        return self.direct_proj(ref_emb), None

    # -- training ------------------------------------------------------------

    def training_loss(self, batch: dict, rng, mode: str = "train"):
        """Teacher-forced reconstruction loss for one padded batch.

        The batch dict carries ``symbols [B,N]``, ``sym_lengths``,
        ``mel [B,T,n_mels]`` and ``linear [B,T,bins]`` feature targets,
        ``frame_mask [B,T]``, and ``frame_lengths`` for the reference path.
        Returns ``(loss, stats)``.
        """
        cfg = self.cfg
        symbols = batch["symbols"]
        b, n = symbols.shape
        states = self.text_encoder(symbols, batch["sym_lengths"])
        weights = None
        if cfg.mode != "none":
            ref_mel = Tensor(feat_to_mel(batch["mel"]).astype(np.float32))
            style, weights = self.style_from_reference(
                ref_mel, mode, frame_lengths=batch["frame_lengths"])
            states = condition(states, reshape(style, (b, 1, -1)))
        mask_bias = _attention_bias(batch["sym_lengths"], n)
        pred_mel, align = self.decode_teacher_forced(
            states, batch["mel"], mask_bias, mode, rng)
        pred_lin = self.postnet(pred_mel)
        loss = reconstruction_loss(pred_mel, pred_lin, batch["mel"],
                                   batch["linear"], batch["frame_mask"])
        stats = {"alignment": align}
        if weights is not None:
            stats["attention_weights"] = weights.data.copy()
        return loss, stats

    def decode_teacher_forced(self, states: Tensor, mel_feat: np.ndarray,
                              mask_bias, mode: str, rng):
        cfg = self.cfg
        b, t, nm = mel_feat.shape
        r = cfg.frames_per_step
        if t % r != 0:
            raise ShapeError(f"target frame count {t} not a multiple of r={r}")
        steps = t // r
        keys = self.decoder.att.keys(states)
        state = self.decoder.initial_state(b)
        x = Tensor(np.zeros((b, r * nm), dtype=np.float32))  # silent go frames
        outputs = []
        align = np.empty((b, steps, states.data.shape[1]), dtype=np.float32)
        for step in range(steps):
            y, w, state = self.decoder.step(x, keys, states, mask_bias, state,
                                            mode, rng)
            outputs.append(y)
            align[:, step, :] = w.data
            x = Tensor(mel_feat[:, step * r:(step + 1) * r, :].reshape(b, r * nm))
        pred = reshape(concat(outputs, axis=1), (b, t, nm))
        return pred, align

    def decode_free(self, states: Tensor, mask_bias, max_steps: int):
        """Autoregressive decoding with the silence stop rule (eval mode)."""
        cfg = self.cfg
        b = states.data.shape[0]
        r, nm = cfg.frames_per_step, cfg.n_mels
        keys = self.decoder.att.keys(states)
        state = self.decoder.initial_state(b)
        x = Tensor(np.zeros((b, r * nm), dtype=np.float32))
        frames = []
        align_rows = []
        frame_means = []
        quiet_steps = 0
        stop_step = max_steps
        for step in range(max_steps):
            y, w, state = self.decoder.step(x, keys, states, mask_bias, state,
                                            "eval", None)
            step_frames = y.data.reshape(b, r, nm)
            frames.append(step_frames)
            align_rows.append(w.data)
            frame_means.extend(step_frames[0].mean(axis=1))
            if len(frame_means) >= 4 and max(frame_means[-4:]) < cfg.stop_threshold:
                quiet_steps += 1
            else:
                quiet_steps = 0
            if quiet_steps >= 2:
                stop_step = step + 1
                break
            x = Tensor(y.data)
        mel_feat = np.concatenate(frames, axis=1)
        align = np.stack(align_rows, axis=1)
        return mel_feat, align, stop_step

    # -- inference -----------------------------------------------------------

    def synthesize(self, symbols, style_spec=None, max_steps: int | None = None,
                   load_mel=None) -> SynthesisResult:
        """Render a symbol sequence under a style directive (deterministic)."""
        cfg = self.cfg
        symbols = np.asarray(list(symbols), dtype=int)
        if symbols.size == 0:
            raise ConfigError("cannot synthesize an empty symbol sequence")
        n = symbols.size
        if cfg.mode == "none":
            if style_spec is not None:
                raise ConfigError(
                    "this checkpoint was trained without style conditioning; "
                    "drop the style spec")
        elif style_spec is None:
            raise ConfigError(f"mode {cfg.mode!r} needs a style spec to synthesize")
        states = self.text_encoder(symbols[None, :], np.array([n]))
        if style_spec is not None:
            assignment = resolve(
                style_spec, n,
                bank=getattr(self, "token_bank", None),
                ref_encoder=getattr(self, "ref_encoder", None),
                direct_proj=getattr(self, "direct_proj", None),
                load_mel=load_mel)
            states = condition(states, Tensor(assignment[None, :, :]))
        mel_feat, align, stop_step = self.decode_free(
            states, None, max_steps or cfg.max_steps)
        pred_lin = self.postnet(Tensor(mel_feat))
        return SynthesisResult(
            mel=feat_to_mel(mel_feat[0]),
            linear=feat_to_mag(pred_lin.data[0], self.dsp),
            alignment=align[0],
            stop_step=stop_step,
        )


def _attention_bias(lengths: np.ndarray, n: int) -> np.ndarray | None:
    """-1e9 bias on padded symbol positions (exact zero after softmax)."""
    lengths = np.asarray(lengths)
    if np.all(lengths == n):
        return None
    bias = np.zeros((lengths.size, n), dtype=np.float32)
    for i, ln in enumerate(lengths):
        bias[i, ln:] = -1e9
    return bias
