"""Deterministic decoder-only transformer with grouped-query attention,
rotary positions, and probe hooks for importance profiling.

Architecture per layer (pre-norm): RMS norm -> GQA attention -> residual,
RMS norm -> SiLU MLP -> residual; a final RMS norm feeds an output
projection tied to the token embedding. All computation is float32.

Weight initialization scheme (fixed; same seed gives bit-identical
weights): a single numpy default_rng(seed) stream draws every projection
matrix and the embedding as normal(mean 0, std 0.02) float64 values in
C order, cast to float32. Draw order: embedding, then per layer
attn_q, attn_k, attn_v, attn_out, mlp_in, mlp_out. Normalization gains
are ones and are not drawn from the stream.

Rotary convention: head vectors are split in halves (x1, x2); position p
rotates pair j by angle p * theta**(-2j/head_dim). Rotation is applied to
Q and K before caching; evicted stores keep original absolute positions
(no re-rotation).
"""

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .cache import CacheSet, append_and_evict, attend_with_cache
from .config import ModelConfig
from .errors import ConfigError, FormatError, InputError, ShapeError
from .numerics import softmax

RMS_EPS = 1e-5
WEIGHT_STD = 0.02
WEIGHT_FORMAT_VERSION = "bklv1"


@dataclass
class LayerWeights:
    attn_q: np.ndarray  # (d_model, num_q_heads * head_dim)
    attn_k: np.ndarray  # (d_model, num_kv_heads * head_dim)
    attn_v: np.ndarray  # (d_model, num_kv_heads * head_dim)
    attn_out: np.ndarray  # (num_q_heads * head_dim, d_model)
    mlp_in: np.ndarray  # (d_model, d_ff)
    mlp_out: np.ndarray  # (d_ff, d_model)
    norm1: np.ndarray  # (d_model,)
    norm2: np.ndarray  # (d_model,)


@dataclass
class Model:
    """Immutable after construction; safe to share across readers."""

    config: ModelConfig
    embedding: np.ndarray  # (vocab_size, d_model); output projection is its transpose
    layers: list[LayerWeights]
    final_norm: np.ndarray  # (d_model,)


@dataclass
class ProbeCapture:
    """Per-head and per-layer tensors captured for the processed tokens.

    head_input_v duplicates the shared group V across the query heads of
    one KV group so each (layer, head) pair carries a like-shaped input
    and output.
    """

    head_input_v: np.ndarray  # (layers, q_heads, tokens, head_dim)
    head_output: np.ndarray  # (layers, q_heads, tokens, head_dim)
    layer_input: np.ndarray  # (layers, tokens, d_model)
    layer_output: np.ndarray  # (layers, tokens, d_model)


def _layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("attn_q", (cfg.d_model, cfg.num_q_heads * cfg.head_dim)),
        ("attn_k", (cfg.d_model, cfg.num_kv_heads * cfg.head_dim)),
        ("attn_v", (cfg.d_model, cfg.num_kv_heads * cfg.head_dim)),
        ("attn_out", (cfg.num_q_heads * cfg.head_dim, cfg.d_model)),
        ("mlp_in", (cfg.d_model, cfg.d_ff)),
        ("mlp_out", (cfg.d_ff, cfg.d_model)),
        ("norm1", (cfg.d_model,)),
        ("norm2", (cfg.d_model,)),
    ]


def init_model(config: ModelConfig) -> Model:
    """Build a model with weights generated by the documented scheme."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    def draw(shape):
        return rng.normal(0.0, WEIGHT_STD, size=shape).astype(np.float32)

    embedding = draw((config.vocab_size, config.d_model))
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                attn_q=draw((config.d_model, config.num_q_heads * config.head_dim)),
                attn_k=draw((config.d_model, config.num_kv_heads * config.head_dim)),
                attn_v=draw((config.d_model, config.num_kv_heads * config.head_dim)),
                attn_out=draw((config.num_q_heads * config.head_dim, config.d_model)),
                mlp_in=draw((config.d_model, config.d_ff)),
                mlp_out=draw((config.d_ff, config.d_model)),
                norm1=np.ones(config.d_model, dtype=np.float32),
                norm2=np.ones(config.d_model, dtype=np.float32),
            )
        )
    final_norm = np.ones(config.d_model, dtype=np.float32)
    return Model(config, embedding, layers, final_norm)


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + np.float32(RMS_EPS))
    return x * scale * gain


def _silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def rope_rotate(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Rotate per-head vectors by their absolute positions.

    x: (tokens, heads, head_dim). Angles are computed in float64 and the
    rotation applied in float32.
    """
    head_dim = x.shape[-1]
    half = head_dim // 2
    inv_freq = theta ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(np.float32)[:, None, :]
    sin = np.sin(angles).astype(np.float32)[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V with causal masking when len(q) > 1.

    Queries are taken to be the last len(q) positions of the key sequence:
    query i attends to keys 0 .. (len(k) - len(q) + i).
    """
    q = np.asarray(q, dtype=np.float32)
    k = np.asarray(k, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("q, k, v must be 2-D")
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise ShapeError(f"incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    t_q, t_k = q.shape[0], k.shape[0]
    if t_q > 1 and t_k < t_q:
        raise ShapeError(f"causal attention needs len(k) >= len(q), got {t_k} < {t_q}")
    scores = (q @ k.T) / np.float32(math.sqrt(q.shape[1]))
    if t_q > 1:
        key_pos = np.arange(t_k)
        query_pos = np.arange(t_k - t_q, t_k)
        scores = np.where(
            key_pos[None, :] > query_pos[:, None], np.float32(-np.inf), scores
        )
    return softmax(scores, axis=-1) @ v


def forward_chunk(
    model: Model,
    tokens,
    caches: CacheSet,
    capture: bool = False,
) -> tuple[np.ndarray, ProbeCapture | None]:
    """Run new tokens through the model under budgeted caches.

    K/V projections of the new tokens are appended to the caches (evicting
    as the budgets require) and every query attends over exactly the
    retained tokens. Tokens are processed in segments sized so that no
    eviction can happen inside a segment; once some cache is full the
    remainder goes one token at a time, which reproduces the exact
    interleaved append/attend semantics of generation.

    Returns (logits, probes): logits is (len(tokens), vocab_size); probes
    is a ProbeCapture for the new tokens when capture is set, else None.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise InputError("tokens must be a non-empty 1-D sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError(
            f"token id out of range [0, {cfg.vocab_size}): {int(tokens.max())}"
        )
    if caches.config != cfg:
        raise ConfigError("cache set was built for a different model configuration")
    if len(caches.caches) != cfg.num_layers:
        raise ConfigError(
            f"cache layer count {len(caches.caches)} != num_layers {cfg.num_layers}"
        )
    start = caches.total_seen
    if start + tokens.size > cfg.max_context:
        raise InputError(
            f"context length exceeded: {start} + {tokens.size} > {cfg.max_context}"
        )

    logits_parts = []
    probe_parts = []
    offset = 0
    while offset < tokens.size:
        n = min(tokens.size - offset, caches.min_free())
        if n < 1:
            n = 1  # some cache is full: single-token step with eviction
        seg = tokens[offset : offset + n]
        seg_logits, seg_probes = _forward_segment(model, seg, caches, start + offset, capture)
        logits_parts.append(seg_logits)
        if capture:
            probe_parts.append(seg_probes)
        offset += n

    logits = np.concatenate(logits_parts, axis=0)
    if not capture:
        return logits, None
    probes = ProbeCapture(
        head_input_v=np.concatenate([p[0] for p in probe_parts], axis=2),
        head_output=np.concatenate([p[1] for p in probe_parts], axis=2),
        layer_input=np.concatenate([p[2] for p in probe_parts], axis=1),
        layer_output=np.concatenate([p[3] for p in probe_parts], axis=1),
    )
    return logits, probes


def _forward_segment(model, seg_tokens, caches, start_pos, capture):
    cfg = model.config
    n = seg_tokens.size
    g = cfg.group_size
    positions = np.arange(start_pos, start_pos + n, dtype=np.int64)
    x = model.embedding[seg_tokens].astype(np.float32, copy=True)

    if capture:
        head_v = np.empty((cfg.num_layers, cfg.num_q_heads, n, cfg.head_dim), np.float32)
        head_out = np.empty_like(head_v)
        layer_in = np.empty((cfg.num_layers, n, cfg.d_model), np.float32)
        layer_out = np.empty_like(layer_in)

    for li, layer in enumerate(model.layers):
        if capture:
            layer_in[li] = x
        h = rms_norm(x, layer.norm1)
        q = (h @ layer.attn_q).reshape(n, cfg.num_q_heads, cfg.head_dim)
        k = (h @ layer.attn_k).reshape(n, cfg.num_kv_heads, cfg.head_dim)
        v = (h @ layer.attn_v).reshape(n, cfg.num_kv_heads, cfg.head_dim)
        q = rope_rotate(q, positions, cfg.rope_theta)
        k = rope_rotate(k, positions, cfg.rope_theta)

        for grp in range(cfg.num_kv_heads):
            append_and_evict(caches.caches[li][grp], k[:, grp], v[:, grp], positions)

        heads = np.empty((n, cfg.num_q_heads, cfg.head_dim), dtype=np.float32)
        for head in range(cfg.num_q_heads):
            grp = head // g
            heads[:, head] = attend_with_cache(caches.caches[li][grp], q[:, head])
            if capture:
                head_v[li, head] = v[:, grp]
                head_out[li, head] = heads[:, head]
        x = x + heads.reshape(n, cfg.num_q_heads * cfg.head_dim) @ layer.attn_out

        h2 = rms_norm(x, layer.norm2)
        x = x + _silu(h2 @ layer.mlp_in) @ layer.mlp_out
        if capture:
            layer_out[li] = x

    logits = rms_norm(x, model.final_norm) @ model.embedding.T
    if capture:
        return logits, (head_v, head_out, layer_in, layer_out)
    return logits, None


def greedy_generate(model: Model, prompt, steps: int, caches: CacheSet) -> list[int]:
    """Generate `steps` tokens greedily, feeding each one back in.

    Ties in the argmax resolve to the lowest token id. The prompt and all
    generated tokens must fit in max_context positions.
    """
    if steps < 0:
        raise InputError(f"steps must be >= 0, got {steps}")
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size == 0:
        raise InputError("prompt must be non-empty")
    if caches.total_seen + prompt.size + steps > model.config.max_context:
        raise InputError(
            f"prompt ({prompt.size}) + steps ({steps}) exceed max_context "
            f"{model.config.max_context}"
        )
    logits, _ = forward_chunk(model, prompt, caches)
    out: list[int] = []
    for _ in range(steps):
        next_id = int(np.argmax(logits[-1]))
        out.append(next_id)
        logits, _ = forward_chunk(model, [next_id], caches)
    return out


# Weight file format: one newline-terminated ASCII header line
#   bklv1 key=value ... (sorted keys, every ModelConfig field)
# followed by raw little-endian float32 tensors in canonical order:
# embedding, then per layer attn_q, attn_k, attn_v, attn_out, mlp_in,
# mlp_out, norm1, norm2, then final_norm. Row-major within each tensor.

_HEADER_INT_FIELDS = (
    "num_layers",
    "num_q_heads",
    "num_kv_heads",
    "head_dim",
    "d_model",
    "d_ff",
    "vocab_size",
    "max_context",
    "seed",
)


def serialize_model(model: Model) -> bytes:
    cfg = model.config
    pairs = {f: getattr(cfg, f) for f in _HEADER_INT_FIELDS}
    pairs["rope_theta"] = cfg.rope_theta
    header = WEIGHT_FORMAT_VERSION + " " + " ".join(
        f"{k}={pairs[k]}" for k in sorted(pairs)
    ) + "\n"
    chunks = [header.encode("ascii")]
    for tensor in _canonical_tensors(model):
        chunks.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(chunks)


def _canonical_tensors(model: Model):
    yield model.embedding
    for layer in model.layers:
        for name, _ in _layer_shapes(model.config):
            yield getattr(layer, name)
    yield model.final_norm


def deserialize_model(data: bytes) -> Model:
    newline = data.find(b"\n")
    if newline < 0:
        raise FormatError("missing header line")
    try:
        header = data[:newline].decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError("header is not ASCII") from exc
    parts = header.split()
    if not parts or parts[0] != WEIGHT_FORMAT_VERSION:
        raise FormatError(
            f"format version: expected {WEIGHT_FORMAT_VERSION!r}, got {parts[0] if parts else ''!r}"
        )
    fields: dict[str, str] = {}
    for item in parts[1:]:
        if "=" not in item:
            raise FormatError(f"malformed header item {item!r}")
        key, value = item.split("=", 1)
        fields[key] = value

    kwargs = {}
    for name in _HEADER_INT_FIELDS:
        if name not in fields:
            raise FormatError(f"header missing field {name!r}")
        try:
            kwargs[name] = int(fields[name])
        except ValueError as exc:
            raise FormatError(f"header field {name!r} is not an integer") from exc
    if "rope_theta" not in fields:
        raise FormatError("header missing field 'rope_theta'")
    try:
        kwargs["rope_theta"] = float(fields["rope_theta"])
    except ValueError as exc:
        raise FormatError("header field 'rope_theta' is not a number") from exc
    unknown = set(fields) - set(_HEADER_INT_FIELDS) - {"rope_theta"}
    if unknown:
        raise FormatError(f"unknown header fields {sorted(unknown)}")

    cfg = ModelConfig(**kwargs)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise FormatError(f"header describes an invalid config: {exc}") from exc

    body = data[newline + 1 :]
    shapes = [(cfg.vocab_size, cfg.d_model)]
    for _ in range(cfg.num_layers):
        shapes.extend(shape for _, shape in _layer_shapes(cfg))
    shapes.append((cfg.d_model,))
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    if len(body) != expected:
        raise FormatError(f"weight payload is {len(body)} bytes, expected {expected}")

    flat = np.frombuffer(body, dtype="<f4")
    if not np.all(np.isfinite(flat)):
        raise FormatError("weight payload contains non-finite values")
    tensors = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        tensors.append(flat[offset : offset + size].reshape(shape).copy())
        offset += size

    embedding = tensors[0]
    per_layer = len(_layer_shapes(cfg))
    layers = []
    for li in range(cfg.num_layers):
        block = tensors[1 + li * per_layer : 1 + (li + 1) * per_layer]
        layers.append(LayerWeights(*block))
    return Model(cfg, embedding, layers, tensors[-1])


def model_checksum(model: Model) -> str:
    """sha256 of the canonical weight-file bytes."""
    return hashlib.sha256(serialize_model(model)).hexdigest()
