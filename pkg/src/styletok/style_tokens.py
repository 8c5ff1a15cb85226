"""Token bank, attention over it, and inference-time style directives.

A bank of randomly initialized token embeddings is shared across all
sequences and trained end to end. The reference embedding queries the bank
through content-based attention; tokens pass through tanh before scoring
and before the weighted combination, so a single token's contribution stays
interpretable as ``scale * tanh(token)``. Single-head scoring is additive
(v . tanh(Wq q + Wk k)); multi-head uses per-head projected dot products
with a per-head value projection and concatenated outputs, keeping the
style embedding the same length for any head count.

Inference-time conditioning is described by a ``StyleSpec`` with a tagged
JSON encoding:

    {"token": {"index": 2, "scale": 0.3}}
    {"weights": {"per_head": [[0.7, 0.3, ...]]}}
    {"sample": {"temperature": 0.5, "seed": 7}}
    {"reference": {"wav": "clip.wav"}}
    {"direct": {"wav": "clip.wav"}}
    {"morph": [{"range": [0, 5], "spec": {...}}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Linear, Module, glorot
from .tensor import (Parameter, Tensor, concat, matmul, mul, reshape, softmax,
                     tanh, transpose)


@dataclass(frozen=True)
class StyleConfig:
    n_tokens: int = 10
    heads: int = 1
    style_dim: int = 128
    att_dim: int = 64
    ref_dim: int = 32
    token_init_std: float = 0.3
    token_init_seed: int = 7321

    def __post_init__(self):
        if self.n_tokens < 1:
            raise ConfigError("need at least one token")
        if self.style_dim % self.heads != 0:
            raise ConfigError(
                f"style_dim {self.style_dim} not divisible by heads {self.heads}")

    @property
    def token_dim(self) -> int:
        return self.style_dim // self.heads


class TokenBank(Module):
    """Trainable token table plus attention projections."""

    def __init__(self, cfg: StyleConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        init = np.random.default_rng(cfg.token_init_seed)
        self.tokens = Parameter(
            (init.standard_normal((cfg.n_tokens, cfg.token_dim))
             * cfg.token_init_std).astype(dtype))
        if cfg.heads == 1:
            # additive (tanh) attention
            self.w_query = Parameter(glorot(rng, (cfg.ref_dim, cfg.att_dim),
                                            cfg.ref_dim, cfg.att_dim, dtype))
            self.w_key = Parameter(glorot(rng, (cfg.token_dim, cfg.att_dim),
                                          cfg.token_dim, cfg.att_dim, dtype))
            self.v = Parameter(glorot(rng, (cfg.att_dim, 1), cfg.att_dim, 1, dtype))
        else:
            d_k = cfg.token_dim
            self.q_proj = [Linear(cfg.ref_dim, d_k, rng, bias=False, dtype=dtype)
                           for _ in range(cfg.heads)]
            self.k_proj = [Linear(cfg.token_dim, d_k, rng, bias=False, dtype=dtype)
                           for _ in range(cfg.heads)]
            self.v_proj = [Linear(cfg.token_dim, cfg.token_dim, rng, bias=False,
                                  dtype=dtype)
                           for _ in range(cfg.heads)]

    # -- attention ---------------------------------------------------------

    def attend(self, ref: Tensor) -> tuple:
        """Score the reference against the bank.

        ``ref`` is ``[B, ref_dim]``; returns ``(weights, style)`` with
        weights ``[B, heads, n_tokens]`` (rows on the simplex) and style
        ``[B, style_dim]``.
        """
        if ref.ndim != 2 or ref.data.shape[1] != self.cfg.ref_dim:
            raise ShapeError(
                f"attend expects reference [B, {self.cfg.ref_dim}], got {ref.shape}")
        values = tanh(self.tokens)  # tanh before attention and combination
        if self.cfg.heads == 1:
            q = matmul(ref, self.w_query)                       # [B, att]
            k = matmul(values, self.w_key)                      # [n, att]
            hidden = tanh(reshape(q, (-1, 1, self.cfg.att_dim)) + k)
            scores = reshape(matmul(hidden, self.v), (-1, self.cfg.n_tokens))
            w = softmax(scores, axis=-1)                        # [B, n]
            style = matmul(w, values)                           # [B, token_dim]
            weights = reshape(w, (-1, 1, self.cfg.n_tokens))
            return weights, style
        per_head_w = []
        per_head_style = []
        scale = 1.0 / np.sqrt(self.cfg.token_dim)
        for h in range(self.cfg.heads):
            q = self.q_proj[h](ref)                             # [B, dk]
            k = self.k_proj[h](values)                          # [n, dk]
            scores = mul(matmul(q, transpose(k)), scale)        # [B, n]
            w = softmax(scores, axis=-1)
            per_head_w.append(reshape(w, (-1, 1, self.cfg.n_tokens)))
            per_head_style.append(matmul(w, self.v_proj[h](values)))
        return concat(per_head_w, axis=1), concat(per_head_style, axis=1)

    def combine(self, per_head_weights: np.ndarray) -> np.ndarray:
        """Value path only: weighted token combination for given weights.

        ``per_head_weights`` is ``[heads, n_tokens]`` on the simplex; the
        result is a plain ``[style_dim]`` vector.
        """
        w = normalize_weights(per_head_weights, self.cfg)
        values = np.tanh(self.tokens.data)
        if self.cfg.heads == 1:
            return (w[0] @ values).astype(values.dtype)
        parts = [w[h] @ values @ self.v_proj[h].weight.data
                 for h in range(self.cfg.heads)]
        return np.concatenate(parts).astype(values.dtype)


def normalize_weights(raw, cfg: StyleConfig) -> np.ndarray:
    """Validate/normalize per-head combination weights to simplex rows."""
    w = np.asarray(raw, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    if w.shape != (cfg.heads, cfg.n_tokens):
        raise ConfigError(
            f"weights must be [heads={cfg.heads}, n_tokens={cfg.n_tokens}], "
            f"got {w.shape}")
    if np.any(w < 0):
        raise ConfigError("combination weights must be non-negative")
    sums = w.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ConfigError("combination weights must not be all zero")
    return w / sums


def style_from_weights(bank: TokenBank, per_head_weights) -> np.ndarray:
    """Style embedding from explicit combination weights (scoring bypassed)."""
    return bank.combine(per_head_weights)


def style_from_token(bank: TokenBank, index: int, scale: float = 1.0) -> np.ndarray:
    """A single (optionally scaled) token's style: scale * value(token)."""
    if not 0 <= index < bank.cfg.n_tokens:
        raise ConfigError(
            f"token index {index} out of range [0, {bank.cfg.n_tokens})")
    one_hot = np.zeros((bank.cfg.heads, bank.cfg.n_tokens))
    one_hot[:, index] = 1.0
    return (scale * style_from_weights(bank, one_hot)).astype(np.float32)


def sample_weights(cfg: StyleConfig, temperature: float, seed: int) -> np.ndarray:
    """Random simplex weights per head: softmax of N(0,1) logits over tau."""
    if not temperature > 0:
        raise ConfigError(f"sampling temperature must be positive, got {temperature}")
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((cfg.heads, cfg.n_tokens)) / temperature
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class DirectProjection(Module):
    """Baseline conditioning: learned linear map from reference embedding."""

    def __init__(self, ref_dim: int, style_dim: int, rng: np.random.Generator,
                 bias: bool = False, dtype=np.float32):
        self.proj = Linear(ref_dim, style_dim, rng, bias=bias, dtype=dtype)

    def __call__(self, ref: Tensor) -> Tensor:
        return self.proj(ref)


# ---------------------------------------------------------------------------
# style specs


@dataclass(frozen=True)
class TokenSpec:
    index: int
    scale: float = 1.0


@dataclass(frozen=True)
class WeightsSpec:
    per_head: tuple


@dataclass(frozen=True)
class SampleSpec:
    temperature: float
    seed: int


@dataclass(frozen=True)
class ReferenceSpec:
    wav: str


@dataclass(frozen=True)
class DirectSpec:
    wav: str


@dataclass(frozen=True)
class MorphSpec:
    segments: tuple  # of (start, stop, StyleSpec)


StyleSpec = Union[TokenSpec, WeightsSpec, SampleSpec, ReferenceSpec,
                  DirectSpec, MorphSpec]


def parse_style_spec(source) -> StyleSpec:
    """Parse the canonical tagged-union JSON form of a style spec."""
    if isinstance(source, str):
        try:
            source = json.loads(source)
        except json.JSONDecodeError as e:
            raise ConfigError(f"style spec is not valid JSON: {e}") from e
    if not isinstance(source, dict) or len(source) != 1:
        raise ConfigError(
            "style spec must be an object with exactly one variant key "
            "(token | weights | sample | reference | direct | morph)")
    tag, body = next(iter(source.items()))
    if tag == "token":
        _require_keys(body, {"index"}, {"scale"}, "token")
        return TokenSpec(index=int(body["index"]), scale=float(body.get("scale", 1.0)))
    if tag == "weights":
        _require_keys(body, {"per_head"}, set(), "weights")
        per_head = body["per_head"]
        if not isinstance(per_head, list) or not per_head:
            raise ConfigError("weights.per_head must be a non-empty list of rows")
        rows = tuple(tuple(float(v) for v in row) for row in per_head)
        return WeightsSpec(per_head=rows)
    if tag == "sample":
        _require_keys(body, {"temperature", "seed"}, set(), "sample")
        return SampleSpec(temperature=float(body["temperature"]), seed=int(body["seed"]))
    if tag == "reference":
        _require_keys(body, {"wav"}, set(), "reference")
        return ReferenceSpec(wav=str(body["wav"]))
    if tag == "direct":
        _require_keys(body, {"wav"}, set(), "direct")
        return DirectSpec(wav=str(body["wav"]))
    if tag == "morph":
        if not isinstance(body, list) or not body:
            raise ConfigError("morph must be a non-empty list of segments")
        segments = []
        for seg in body:
            _require_keys(seg, {"range", "spec"}, set(), "morph segment")
            rng = seg["range"]
            if (not isinstance(rng, list) or len(rng) != 2
                    or not all(isinstance(v, int) for v in rng)):
                raise ConfigError("morph segment range must be [start, stop]")
            child = parse_style_spec(seg["spec"])
            if isinstance(child, MorphSpec):
                raise ConfigError("morph segments do not nest")
            segments.append((rng[0], rng[1], child))
        return MorphSpec(segments=tuple(segments))
    raise ConfigError(f"unknown style spec variant {tag!r}")


def _require_keys(body, required: set, optional: set, where: str):
    if not isinstance(body, dict):
        raise ConfigError(f"{where} spec body must be an object")
    missing = required - set(body)
    if missing:
        raise ConfigError(f"{where} spec missing field {sorted(missing)[0]!r}")
    unknown = set(body) - required - optional
    if unknown:
        raise ConfigError(f"{where} spec has unknown field {sorted(unknown)[0]!r}")


def style_spec_to_json(spec: StyleSpec) -> str:
    if isinstance(spec, TokenSpec):
        return json.dumps({"token": {"index": spec.index, "scale": spec.scale}})
    if isinstance(spec, WeightsSpec):
        return json.dumps({"weights": {"per_head": [list(r) for r in spec.per_head]}})
    if isinstance(spec, SampleSpec):
        return json.dumps({"sample": {"temperature": spec.temperature, "seed": spec.seed}})
    if isinstance(spec, ReferenceSpec):
        return json.dumps({"reference": {"wav": spec.wav}})
    if isinstance(spec, DirectSpec):
        return json.dumps({"direct": {"wav": spec.wav}})
    if isinstance(spec, MorphSpec):
        return json.dumps({"morph": [{"range": [a, b], "spec": json.loads(style_spec_to_json(s))}
                                     for a, b, s in spec.segments]})
    raise ConfigError(f"not a style spec: {spec!r}")


def resolve(spec: StyleSpec, n_symbols: int, bank: TokenBank | None = None,
            ref_encoder=None, direct_proj: DirectProjection | None = None,
            load_mel=None) -> np.ndarray:
    """Per-symbol style assignment ``[n_symbols, style_dim]`` for a spec.

    Non-morph variants broadcast one embedding to every symbol; morph
    assigns each segment its own resolved embedding. Reference-driven
    variants need ``ref_encoder`` plus a ``load_mel(path)`` callable;
    the direct variant additionally needs the baseline projection.
    """
    if n_symbols < 1:
        raise ConfigError("style resolution needs at least one symbol")
    if isinstance(spec, MorphSpec):
        validate_morph_partition(spec, n_symbols)
        first = resolve_single(spec.segments[0][2], bank, ref_encoder,
                               direct_proj, load_mel)
        out = np.empty((n_symbols, first.size), dtype=np.float32)
        for start, stop, child in spec.segments:
            out[start:stop] = resolve_single(child, bank, ref_encoder,
                                             direct_proj, load_mel)
        return out
    vec = resolve_single(spec, bank, ref_encoder, direct_proj, load_mel)
    return np.broadcast_to(vec, (n_symbols, vec.size)).astype(np.float32)


def resolve_single(spec: StyleSpec, bank: TokenBank | None, ref_encoder,
                   direct_proj, load_mel) -> np.ndarray:
    """One style embedding for a non-morph spec."""

    def need_bank():
        if bank is None:
            raise ConfigError(
                "this model has no token bank (trained without the token layer)")
        return bank

    def reference_embedding(path):
        if ref_encoder is None or load_mel is None:
            raise ConfigError(
                "this model has no reference encoder; reference specs are unavailable")
        from .ref_encoder import encode_reference
        return encode_reference(ref_encoder, load_mel(path), mode="eval")

    if isinstance(spec, TokenSpec):
        return style_from_token(need_bank(), spec.index, spec.scale)
    if isinstance(spec, WeightsSpec):
        return style_from_weights(need_bank(), spec.per_head).astype(np.float32)
    if isinstance(spec, SampleSpec):
        b = need_bank()
        return style_from_weights(
            b, sample_weights(b.cfg, spec.temperature, spec.seed)).astype(np.float32)
    if isinstance(spec, ReferenceSpec):
        b = need_bank()
        ref = reference_embedding(spec.wav)
        _, style = b.attend(Tensor(ref[None, :]))
        return style.data[0].astype(np.float32)
    if isinstance(spec, DirectSpec):
        if direct_proj is None:
            raise ConfigError(
                "direct conditioning requires a model trained in direct-baseline mode")
        ref = reference_embedding(spec.wav)
        return direct_proj(Tensor(ref[None, :])).data[0].astype(np.float32)
    raise ConfigError(f"not a resolvable style spec: {spec!r}")


def validate_morph_partition(spec: MorphSpec, n_symbols: int) -> None:
    segments = sorted(spec.segments, key=lambda s: s[0])
    cursor = 0
    for start, stop, _ in segments:
        if start != cursor:
            raise ConfigError(
                f"morph ranges must partition [0, {n_symbols}): "
                f"gap or overlap at symbol {cursor}")
        if stop <= start:
            raise ConfigError(f"morph range [{start}, {stop}) is empty")
        cursor = stop
    if cursor != n_symbols:
        raise ConfigError(
            f"morph ranges must partition [0, {n_symbols}): they end at {cursor}")
