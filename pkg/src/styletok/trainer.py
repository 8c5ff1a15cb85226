"""Training loop, evaluation, and checkpoint assembly.

Teacher-forced Adam training: the reference input is each target's own
log-mel spectrogram, the loss is the masked mel+linear L1, gradients are
clipped to unit global norm, and the learning rate halves at 60% and again
at 80% of the configured steps. Every run is bit-reproducible from
``(config, seed)``: batch sampling, dropout, and zoneout all draw from one
seeded generator that is checkpointed alongside the parameters.

Progress is logged as JSON lines ``{step, loss, grad_norm, lr, wall_ms}``.
A non-finite loss aborts immediately after dumping the offending batch ids.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .corpus import Manifest, Utterance, load_manifest
from .dsp import DspConfig, log_mel, magnitude, mel_filterbank
from .errors import CheckpointError, ConfigError, NumericError
from .optim import Adam, clip_grad_norm
from .ref_encoder import RefEncoderConfig
from .style_tokens import StyleConfig
from .synthesizer import (END_SILENCE_FRAMES, ModelConfig, Synthesizer,
                          mag_to_feat, mel_to_feat)
from .tensor import Tape, finite_checks
from .utils import worker_count

MODE_ALIASES = {"gst": "gst", "direct": "direct", "direct-baseline": "direct",
                "none": "none", "no-style": "none"}


@dataclass(frozen=True)
class TrainConfig:
    corpus: str = ""
    out_dir: str = ""
    mode: str = "gst"
    seed: int = 0
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    grad_clip: float = 1.0
    eval_interval: int = 500
    checkpoint_interval: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.mode not in MODE_ALIASES:
            raise ConfigError(f"mode must be one of {sorted(MODE_ALIASES)}")

    @property
    def model_mode(self) -> str:
        return MODE_ALIASES[self.mode]

    def lr_at(self, step: int) -> float:
        if self.steps <= 0:
            return self.lr
        frac = step / self.steps
        if frac >= 0.8:
            return self.lr * 0.25
        if frac >= 0.6:
            return self.lr * 0.5
        return self.lr


# ---------------------------------------------------------------------------
# feature preparation


@dataclass
class PreparedUtterance:
    id: str
    symbols: tuple
    mel: np.ndarray      # [T, n_mels] feature units, T a multiple of r
    linear: np.ndarray   # [T, n_lin_bins] feature units
    n_frames: int        # == mel.shape[0] (includes trailing silence)


def prepare_utterance(utt: Utterance, manifest: Manifest, dsp: DspConfig,
                      r: int, fb: np.ndarray) -> PreparedUtterance:
    samples = manifest.load_audio(utt)
    mag = magnitude(samples, dsp)
    mel = mel_to_feat(log_mel(mag, dsp, fb))
    lin = mag_to_feat(mag, dsp)
    # trailing silence teaches the decoder to end; also rounds T up to r
    t = mel.shape[0] + END_SILENCE_FRAMES
    t += (-t) % r
    extra = t - mel.shape[0]
    mel = np.pad(mel, ((0, extra), (0, 0)))
    lin = np.pad(lin, ((0, extra), (0, 0)))
    return PreparedUtterance(id=utt.id, symbols=utt.symbols, mel=mel, linear=lin,
                             n_frames=t)


def prepare_split(manifest: Manifest, split: str, dsp: DspConfig, r: int):
    fb = mel_filterbank(dsp)
    utts = manifest.split(split)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(
            lambda u: prepare_utterance(u, manifest, dsp, r, fb), utts))


def assemble_batch(items: list, pad_id: int) -> dict:
    """Pad a list of prepared utterances into one training batch."""
    b = len(items)
    n = max(len(it.symbols) for it in items)
    t = max(it.n_frames for it in items)
    nm = items[0].mel.shape[1]
    nl = items[0].linear.shape[1]
    symbols = np.full((b, n), pad_id, dtype=int)
    sym_lengths = np.empty(b, dtype=int)
    mel = np.zeros((b, t, nm), dtype=np.float32)
    lin = np.zeros((b, t, nl), dtype=np.float32)
    mask = np.zeros((b, t), dtype=np.float32)
    frame_lengths = np.empty(b, dtype=int)
    for i, it in enumerate(items):
        symbols[i, :len(it.symbols)] = it.symbols
        sym_lengths[i] = len(it.symbols)
        mel[i, :it.n_frames] = it.mel
        lin[i, :it.n_frames] = it.linear
        mask[i, :it.n_frames] = 1.0
        frame_lengths[i] = it.n_frames
    return {"symbols": symbols, "sym_lengths": sym_lengths, "mel": mel,
            "linear": lin, "frame_mask": mask, "frame_lengths": frame_lengths,
            "ids": [it.id for it in items]}


# ---------------------------------------------------------------------------
# config <-> dict


def _strict_fields(cls, d: dict, where: str) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {where} config")
    return d


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["ref"]["conv_channels"] = list(cfg.ref.conv_channels)
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(_strict_fields(ModelConfig, d, "model"))
    if "style" in d:
        d["style"] = StyleConfig(**_strict_fields(StyleConfig, d["style"], "model.style"))
    if "ref" in d:
        rd = dict(_strict_fields(RefEncoderConfig, d["ref"], "model.ref"))
        if "conv_channels" in rd:
            rd["conv_channels"] = tuple(rd["conv_channels"])
        d["ref"] = RefEncoderConfig(**rd)
    return ModelConfig(**d)


def dsp_config_from_dict(d: dict) -> DspConfig:
    return DspConfig(**_strict_fields(DspConfig, d, "dsp"))


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**_strict_fields(TrainConfig, d, "train"))


def full_config_dict(model_cfg: ModelConfig, dsp: DspConfig,
                     train_cfg: TrainConfig) -> dict:
    return {"model": model_config_to_dict(model_cfg),
            "dsp": dataclasses.asdict(dsp),
            "train": dataclasses.asdict(train_cfg)}


# ---------------------------------------------------------------------------
# checkpoint <-> model


def checkpoint_from_model(model: Synthesizer, train_cfg: TrainConfig,
                          opt: Adam | None, rng: np.random.Generator,
                          step: int) -> ckpt_io.Checkpoint:
    tensors = [(name, p.data) for name, p in model.named_parameters()]
    adam_t = 0
    if opt is not None:
        adam_t = opt.t
        state = opt.state_tensors()
        tensors.extend(sorted(state.items()))
    config = full_config_dict(model.cfg, model.dsp, train_cfg)
    return ckpt_io.make_checkpoint(config, step, adam_t, tensors,
                                   rng.bit_generator.state)


def model_from_checkpoint(ckpt: ckpt_io.Checkpoint) -> Synthesizer:
    try:
        model_cfg = model_config_from_dict(ckpt.config["model"])
        dsp = dsp_config_from_dict(ckpt.config["dsp"])
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"checkpoint config is unusable: {e}") from e
    model = Synthesizer(model_cfg, dsp, seed=0)
    tensor_map = ckpt.tensor_map()
    for name, p in model.named_parameters():
        if name not in tensor_map:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = tensor_map[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, model expects {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    return model


# ---------------------------------------------------------------------------
# training


def train(train_cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          dsp: DspConfig | None = None, log_fn=None) -> Path:
    """Run the full loop; returns the final checkpoint path."""
    dsp = dsp or DspConfig()
    manifest = load_manifest(train_cfg.corpus)
    out_dir = Path(train_cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    base_model_cfg = model_cfg or ModelConfig()
    items = prepare_split(manifest, "train", dsp, base_model_cfg.frames_per_step)
    longest = max(it.n_frames for it in items)
    max_steps = 2 * (longest // base_model_cfg.frames_per_step)
    model_cfg = dataclasses.replace(base_model_cfg, mode=train_cfg.model_mode,
                                    max_steps=max_steps)

    model = Synthesizer(model_cfg, dsp, seed=train_cfg.seed)
    trainable = model.trainable_parameters()
    opt = Adam(trainable, lr=train_cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 999]))

    log_path = out_dir / "train_log.jsonl"
    config_echo = full_config_dict(model_cfg, dsp, train_cfg)
    (out_dir / "config_echo.json").write_text(
        json.dumps(config_echo, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    with open(log_path, "w", encoding="utf-8") as log:
        def emit(record):
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
            if log_fn:
                log_fn(record)

        for step in range(train_cfg.steps):
            t0 = time.perf_counter()
            ids = rng.integers(0, len(items), size=train_cfg.batch_size)
            batch = assemble_batch([items[i] for i in ids], model_cfg.pad_id)
            opt.lr = train_cfg.lr_at(step)
            model.zero_grad()
            with finite_checks(False):
                with Tape() as tape:
                    loss, _ = model.training_loss(batch, rng, mode="train")
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    dump = {"step": step, "batch_ids": batch["ids"],
                            "loss": repr(loss_val)}
                    (out_dir / "nan_dump.json").write_text(
                        json.dumps(dump, indent=2) + "\n", encoding="utf-8")
                    raise NumericError(
                        f"non-finite loss at step {step}; "
                        f"offending batch dumped to {out_dir / 'nan_dump.json'}")
                tape.backward(loss, parameters=trainable)
            grad_norm = clip_grad_norm(trainable, train_cfg.grad_clip)
            opt.step()
            wall_ms = (time.perf_counter() - t0) * 1000.0
            emit({"step": step, "loss": loss_val, "grad_norm": grad_norm,
                  "lr": opt.lr, "wall_ms": round(wall_ms, 3)})
            done = step + 1
            if train_cfg.checkpoint_interval and done % train_cfg.checkpoint_interval == 0:
                ckpt_io.save(checkpoint_from_model(model, train_cfg, opt, rng, done),
                             out_dir / f"step{done:07d}.ckpt")
            if train_cfg.eval_interval and done % train_cfg.eval_interval == 0:
                metrics = evaluate_prepared(model, items)
                emit({"step": step, "eval_loss": metrics["loss"],
                      "align_entropy": metrics["alignment_entropy"]})

    final = checkpoint_from_model(model, train_cfg, opt, rng, train_cfg.steps)
    return ckpt_io.save(final, out_dir / "final.ckpt")


def evaluate_prepared(model: Synthesizer, items: list,
                      batch_size: int = 16) -> dict:
    """Eval-mode teacher-forced metrics over prepared utterances."""
    losses = []
    entropies = []
    weights = {}
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        batch = assemble_batch(chunk, model.cfg.pad_id)
        loss, stats = model.training_loss(batch, rng=None, mode="eval")
        losses.append(float(loss.data) * len(chunk))
        align = stats["alignment"]
        mask = batch["frame_mask"][:, ::model.cfg.frames_per_step]
        ent = -np.sum(align * np.log(align + 1e-12), axis=2)
        entropies.append(float((ent * mask).sum() / mask.sum()))
        if "attention_weights" in stats:
            for uid, w in zip(batch["ids"], stats["attention_weights"]):
                weights[uid] = w
    out = {"loss": sum(losses) / len(items),
           "alignment_entropy": float(np.mean(entropies))}
    if weights:
        out["attention_weights"] = weights
    return out


def evaluate(ckpt_path, manifest_path, split: str,
             batch_size: int = 16) -> dict:
    """Load a checkpoint and report eval metrics on a corpus split."""
    ckpt = ckpt_io.load(ckpt_path)
    model = model_from_checkpoint(ckpt)
    manifest = load_manifest(manifest_path)
    items = prepare_split(manifest, split, model.dsp, model.cfg.frames_per_step)
    return evaluate_prepared(model, items, batch_size)
