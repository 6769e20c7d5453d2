"""Stain-agnostic slide encoder: forward pass and exact analytic backward.

Pipeline for one bag of patch embeddings X (N x d_patch):

    [concat stain encoding]           -> N x (d_patch + d_se)
    pre-attention, n_pre_layers of
        linear -> layer norm -> GELU -> dropout
                                      -> N x d_hidden
    per head m of n_heads:
        logits_j = w_m . (tanh(V_m h_j) * sigmoid(U_m h_j))
        a_m      = softmax(logits)    (over patches, f64, max-subtracted)
        h_m      = sum_j a_m[j] h_j   -> d_hidden
    concat heads                      -> n_heads * d_hidden
    post-attention: linear -> GELU -> linear
                                      -> d_out

One shared parameter set encodes every stain; the only stain-specific
pathway is the learnable per-stain encoding row concatenated to each patch.
Dropout uses inverted scaling and is active only in train mode, with masks
drawn from the caller's generator so training runs are seed-reproducible.

`encoder_backward` differentiates the full pipeline by hand; gradients are
exact (checked against central finite differences in the test suite).

Checkpoint format (one directory)::

    manifest.json   # config, step, RankMe history
    params.bin      # magic 'MSCK', u32 version=1, then all parameter
                    # blocks flattened in `EncoderParams.block_names()`
                    # order, little-endian float64
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import PatchEmbeddingBag, StainId
from .numerics import Matrix, Rng, gelu, gelu_grad

CHECKPOINT_MAGIC = b"MSCK"
CHECKPOINT_VERSION = 1


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    d_patch: int = 512
    d_se: int = 32
    d_hidden: int = 512
    n_heads: int = 4
    n_pre_layers: int = 3
    post_hidden: int = 2048
    d_out: int = 512
    dropout_pre: float = 0.1
    dropout_attn: float = 0.25
    use_stain_encoding: bool = True
    n_stains: int = 5
    layer_norm_eps: float = 1e-5

    def validate(self):
        dims = {
            "d_patch": self.d_patch,
            "d_se": self.d_se,
            "d_hidden": self.d_hidden,
            "n_heads": self.n_heads,
            "n_pre_layers": self.n_pre_layers,
            "post_hidden": self.post_hidden,
            "d_out": self.d_out,
            "n_stains": self.n_stains,
        }
        bad = [k for k, v in dims.items() if v < 1]
        for k, p in (("dropout_pre", self.dropout_pre), ("dropout_attn", self.dropout_attn)):
            if not (0.0 <= p < 1.0):
                bad.append(k)
        if not self.layer_norm_eps > 0:
            bad.append("layer_norm_eps")
        if bad:
            raise EncoderError(f"invalid EncoderConfig field(s): {', '.join(bad)}")

    @property
    def d_in(self) -> int:
        return self.d_patch + (self.d_se if self.use_stain_encoding else 0)


@dataclass
class EncoderParams:
    """All learnable weights, stored as named float64 blocks.

    Serialization and the optimizer walk blocks in `block_names()` order;
    that order is the declared on-disk layout of `params.bin`.
    """

    cfg: EncoderConfig
    blocks: dict[str, np.ndarray]

    @staticmethod
    def block_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
        shapes = [("stain_enc", (cfg.n_stains, cfg.d_se))]
        d_in = cfg.d_in
        for i in range(cfg.n_pre_layers):
            shapes += [
                (f"pre{i}_w", (d_in, cfg.d_hidden)),
                (f"pre{i}_b", (cfg.d_hidden,)),
                (f"pre{i}_ln_scale", (cfg.d_hidden,)),
                (f"pre{i}_ln_shift", (cfg.d_hidden,)),
            ]
            d_in = cfg.d_hidden
        shapes += [
            ("attn_V", (cfg.n_heads, cfg.d_hidden, cfg.d_hidden)),
            ("attn_U", (cfg.n_heads, cfg.d_hidden, cfg.d_hidden)),
            ("attn_w", (cfg.n_heads, cfg.d_hidden)),
            ("post1_w", (cfg.n_heads * cfg.d_hidden, cfg.post_hidden)),
            ("post1_b", (cfg.post_hidden,)),
            ("post2_w", (cfg.post_hidden, cfg.d_out)),
            ("post2_b", (cfg.d_out,)),
        ]
        return shapes

    def block_names(self) -> list[str]:
        return [name for name, _ in self.block_shapes(self.cfg)]

    def n_params(self) -> int:
        return sum(b.size for b in self.blocks.values())

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.cfg, {k: v.copy() for k, v in self.blocks.items()})

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.blocks[n].ravel() for n in self.block_names()])

    @classmethod
    def from_flat(cls, cfg: EncoderConfig, flat: np.ndarray) -> "EncoderParams":
        blocks = {}
        offset = 0
        for name, shape in cls.block_shapes(cfg):
            size = int(np.prod(shape))
            blocks[name] = np.asarray(flat[offset : offset + size], dtype=np.float64).reshape(shape).copy()
            offset += size
        if offset != flat.size:
            raise EncoderError(
                f"flat parameter vector has {flat.size} entries, expected {offset}"
            )
        return cls(cfg, blocks)


def zero_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.blocks.items()}


def accumulate_grads(into: dict[str, np.ndarray], grads: dict[str, np.ndarray], scale: float = 1.0):
    for k, g in grads.items():
        into[k] += scale * g


def init_params(cfg: EncoderConfig, rng: Rng) -> EncoderParams:
    """Fan-in-scaled uniform weights, zero biases, identity layer norms.

    Linear weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in)); stain encodings
    are N(0, 0.02^2).  Draw order is the block order, so equal seeds give
    identical parameters.
    """
    cfg.validate()
    blocks = {}
    for name, shape in EncoderParams.block_shapes(cfg):
        if name == "stain_enc":
            blocks[name] = 0.02 * rng.standard_normal(shape)
        elif name.endswith("_b") or name.endswith("_ln_shift"):
            blocks[name] = np.zeros(shape)
        elif name.endswith("_ln_scale"):
            blocks[name] = np.ones(shape)
        elif name in ("attn_V", "attn_U"):
            bound = 1.0 / np.sqrt(shape[2])
            blocks[name] = rng.uniform(-bound, bound, size=shape)
        elif name == "attn_w":
            bound = 1.0 / np.sqrt(shape[1])
            blocks[name] = rng.uniform(-bound, bound, size=shape)
        else:  # linear weight, shape (fan_in, fan_out)
            bound = 1.0 / np.sqrt(shape[0])
            blocks[name] = rng.uniform(-bound, bound, size=shape)
    return EncoderParams(cfg, blocks)


@dataclass
class SlideEmbedding:
    case_id: str
    stain: StainId
    vector: np.ndarray


@dataclass
class AttentionRecord:
    """Per-head, per-patch attention weights of one encoded bag."""

    case_id: str
    stain: StainId
    weights: np.ndarray  # (n_heads, N), rows sum to 1


@dataclass
class BagCache:
    """Forward intermediates needed by the analytic backward pass."""

    x_in: Matrix
    stain_index: int
    pre: list[dict]          # per layer: inputs, layer-norm stats, masks
    hidden: Matrix           # pre-attention output, N x d_hidden
    heads: list[dict]        # per head: branch activations and attention
    concat: np.ndarray
    post_u: np.ndarray
    post_v: np.ndarray
    out: np.ndarray
    train: bool


def _softmax_1d(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _dropout_mask(shape, p: float, rng: Rng) -> np.ndarray | None:
    if p <= 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def attention_scores(hidden: Matrix, head: int, params: EncoderParams) -> np.ndarray:
    """Gated-attention weights of one head over the rows of `hidden`.

    Deterministic (no dropout); nonnegative and summing to 1.
    """
    cfg = params.cfg
    if not 0 <= head < cfg.n_heads:
        raise EncoderError(f"head {head} out of range [0, {cfg.n_heads})")
    if hidden.ndim != 2 or hidden.shape[1] != cfg.d_hidden:
        raise EncoderError(
            f"hidden shape {hidden.shape} incompatible with d_hidden={cfg.d_hidden}"
        )
    v = np.tanh(hidden @ params.blocks["attn_V"][head].T)
    u = 1.0 / (1.0 + np.exp(-(hidden @ params.blocks["attn_U"][head].T)))
    logits = (v * u) @ params.blocks["attn_w"][head]
    return _softmax_1d(logits)


def pre_attention_forward(
    x: Matrix,
    stain_index: int,
    params: EncoderParams,
    cfg: EncoderConfig,
    train: bool = False,
    rng: Rng | None = None,
) -> tuple[Matrix, dict]:
    """Stain-encoding concat plus the pre-attention stack; returns (hidden, cache)."""
    if x.shape[1] != cfg.d_patch:
        raise EncoderError(
            f"bag width {x.shape[1]} does not match d_patch={cfg.d_patch}"
        )
    if train and rng is None:
        raise EncoderError("train mode requires an rng for dropout masks")
    if cfg.use_stain_encoding:
        if not 0 <= stain_index < cfg.n_stains:
            raise EncoderError(
                f"unknown stain index {stain_index} (n_stains={cfg.n_stains})"
            )
        se = params.blocks["stain_enc"][stain_index]
        x_in = np.hstack([x, np.broadcast_to(se, (x.shape[0], cfg.d_se))])
    else:
        x_in = np.asarray(x, dtype=np.float64)

    layers = []
    h = x_in
    for i in range(cfg.n_pre_layers):
        w = params.blocks[f"pre{i}_w"]
        b = params.blocks[f"pre{i}_b"]
        scale = params.blocks[f"pre{i}_ln_scale"]
        shift = params.blocks[f"pre{i}_ln_shift"]
        z = h @ w + b
        mu = z.mean(axis=1, keepdims=True)
        var = z.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + cfg.layer_norm_eps)
        xhat = (z - mu) * inv
        a = scale * xhat + shift
        g = gelu(a)
        mask = _dropout_mask(g.shape, cfg.dropout_pre, rng) if train else None
        out = g if mask is None else g * mask
        layers.append({"input": h, "xhat": xhat, "inv": inv, "a": a, "mask": mask})
        h = out
    return h, {"x_in": x_in, "layers": layers}


def pre_attention_backward(
    g_hidden: Matrix,
    cache: dict,
    params: EncoderParams,
    cfg: EncoderConfig,
    grads: dict[str, np.ndarray],
    stain_index: int,
) -> Matrix:
    """Backprop through the pre-attention stack; accumulates into `grads`.

    Returns the gradient w.r.t. the raw input patches (stain-encoding
    columns stripped off and accumulated into the stain-encoding row).
    """
    g = g_hidden
    for i in reversed(range(cfg.n_pre_layers)):
        layer = cache["layers"][i]
        if layer["mask"] is not None:
            g = g * layer["mask"]
        g_a = g * gelu_grad(layer["a"])
        grads[f"pre{i}_ln_scale"] += (g_a * layer["xhat"]).sum(axis=0)
        grads[f"pre{i}_ln_shift"] += g_a.sum(axis=0)
        g_xhat = g_a * params.blocks[f"pre{i}_ln_scale"]
        xhat = layer["xhat"]
        g_z = layer["inv"] * (
            g_xhat
            - g_xhat.mean(axis=1, keepdims=True)
            - xhat * (g_xhat * xhat).mean(axis=1, keepdims=True)
        )
        grads[f"pre{i}_w"] += layer["input"].T @ g_z
        grads[f"pre{i}_b"] += g_z.sum(axis=0)
        g = g_z @ params.blocks[f"pre{i}_w"].T
    if cfg.use_stain_encoding:
        grads["stain_enc"][stain_index] += g[:, cfg.d_patch :].sum(axis=0)
        return g[:, : cfg.d_patch]
    return g


def encode_forward(
    x: Matrix,
    stain_index: int,
    params: EncoderParams,
    cfg: EncoderConfig | None = None,
    train: bool = False,
    rng: Rng | None = None,
) -> tuple[np.ndarray, BagCache]:
    """Full encoder forward for one bag; returns (embedding, cache)."""
    cfg = cfg or params.cfg
    hidden, pre_cache = pre_attention_forward(x, stain_index, params, cfg, train, rng)

    heads = []
    pooled = []
    for m in range(cfg.n_heads):
        p = hidden @ params.blocks["attn_V"][m].T
        t = np.tanh(p)
        q = hidden @ params.blocks["attn_U"][m].T
        s = 1.0 / (1.0 + np.exp(-q))
        mask_t = _dropout_mask(t.shape, cfg.dropout_attn, rng) if train else None
        mask_s = _dropout_mask(s.shape, cfg.dropout_attn, rng) if train else None
        td = t if mask_t is None else t * mask_t
        sd = s if mask_s is None else s * mask_s
        gated = td * sd
        logits = gated @ params.blocks["attn_w"][m]
        a = _softmax_1d(logits)
        h_m = a @ hidden
        pooled.append(h_m)
        heads.append(
            {
                "t": t,
                "s": s,
                "mask_t": mask_t,
                "mask_s": mask_s,
                "td": td,
                "sd": sd,
                "gated": gated,
                "a": a,
            }
        )

    concat = np.concatenate(pooled)
    u = concat @ params.blocks["post1_w"] + params.blocks["post1_b"]
    v = gelu(u)
    out = v @ params.blocks["post2_w"] + params.blocks["post2_b"]

    cache = BagCache(
        x_in=pre_cache["x_in"],
        stain_index=stain_index,
        pre=pre_cache["layers"],
        hidden=hidden,
        heads=heads,
        concat=concat,
        post_u=u,
        post_v=v,
        out=out,
        train=train,
    )
    return out, cache


def backward_bag(
    cache: BagCache,
    g_out: np.ndarray,
    params: EncoderParams,
    cfg: EncoderConfig | None = None,
    grads: dict[str, np.ndarray] | None = None,
    g_hidden_extra: Matrix | None = None,
) -> tuple[dict[str, np.ndarray], Matrix]:
    """Analytic backward for one bag.

    `g_out` is the upstream gradient on the slide embedding; an optional
    `g_hidden_extra` is injected at the pre-attention output (used when a
    loss consumes those features directly).  Returns (grads, g_input) with
    g_input the gradient w.r.t. the raw patch rows.
    """
    if cache is None:
        raise EncoderError("backward requires the forward cache")
    cfg = cfg or params.cfg
    if grads is None:
        grads = zero_grads(params)

    dh = cfg.d_hidden
    g_out = np.asarray(g_out, dtype=np.float64)

    grads["post2_w"] += np.outer(cache.post_v, g_out)
    grads["post2_b"] += g_out
    g_v = params.blocks["post2_w"] @ g_out
    g_u = g_v * gelu_grad(cache.post_u)
    grads["post1_w"] += np.outer(cache.concat, g_u)
    grads["post1_b"] += g_u
    g_concat = params.blocks["post1_w"] @ g_u

    hidden = cache.hidden
    g_hidden = np.zeros_like(hidden)
    for m in range(cfg.n_heads):
        hc = cache.heads[m]
        g_hm = g_concat[m * dh : (m + 1) * dh]
        a = hc["a"]
        # pooling h_m = a @ hidden
        g_a = hidden @ g_hm
        g_hidden += np.outer(a, g_hm)
        # softmax over patches
        g_logits = a * (g_a - float(g_a @ a))
        # logits = gated @ w_m
        grads["attn_w"][m] += hc["gated"].T @ g_logits
        g_gated = np.outer(g_logits, params.blocks["attn_w"][m])
        g_td = g_gated * hc["sd"]
        g_sd = g_gated * hc["td"]
        g_t = g_td if hc["mask_t"] is None else g_td * hc["mask_t"]
        g_s = g_sd if hc["mask_s"] is None else g_sd * hc["mask_s"]
        g_p = g_t * (1.0 - hc["t"] ** 2)
        g_q = g_s * hc["s"] * (1.0 - hc["s"])
        grads["attn_V"][m] += g_p.T @ hidden
        grads["attn_U"][m] += g_q.T @ hidden
        g_hidden += g_p @ params.blocks["attn_V"][m]
        g_hidden += g_q @ params.blocks["attn_U"][m]

    if g_hidden_extra is not None:
        g_hidden = g_hidden + g_hidden_extra

    pre_cache = {"x_in": cache.x_in, "layers": cache.pre}
    g_input = pre_attention_backward(
        g_hidden, pre_cache, params, cfg, grads, cache.stain_index
    )
    return grads, g_input


def encoder_backward(
    caches: list[BagCache],
    upstream: list[np.ndarray],
    params: EncoderParams,
    cfg: EncoderConfig | None = None,
    hidden_grads: list[Matrix | None] | None = None,
) -> tuple[dict[str, np.ndarray], list[Matrix]]:
    """Backward over a batch of bags, reduced in fixed list order."""
    if len(caches) != len(upstream):
        raise EncoderError(
            f"{len(caches)} caches but {len(upstream)} upstream gradients"
        )
    cfg = cfg or params.cfg
    grads = zero_grads(params)
    input_grads = []
    for i, (cache, g_out) in enumerate(zip(caches, upstream)):
        extra = hidden_grads[i] if hidden_grads is not None else None
        _, g_in = backward_bag(cache, g_out, params, cfg, grads, extra)
        input_grads.append(g_in)
    return grads, input_grads


def encode_slide(
    bag: PatchEmbeddingBag,
    params: EncoderParams,
    cfg: EncoderConfig | None = None,
    mode: str = "eval",
    rng: Rng | None = None,
    case_id: str = "",
) -> tuple[SlideEmbedding, AttentionRecord]:
    """Encode one bag into a slide embedding plus its attention weights.

    Eval mode is fully deterministic; train mode applies dropout using
    `rng`.  The attention record stores all per-head weights (softmax of
    the gated-attention logits, computed without dropout so the exported
    weights match what `attention_scores` reports).
    """
    if mode not in ("train", "eval"):
        raise EncoderError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = cfg or params.cfg
    out, cache = encode_forward(
        bag.embeddings, bag.stain.index, params, cfg, train=(mode == "train"), rng=rng
    )
    if mode == "train":
        weights = np.stack(
            [attention_scores(cache.hidden, m, params) for m in range(cfg.n_heads)]
        )
    else:
        weights = np.stack([hc["a"] for hc in cache.heads])
    emb = SlideEmbedding(case_id=case_id, stain=bag.stain, vector=out)
    rec = AttentionRecord(case_id=case_id, stain=bag.stain, weights=weights)
    return emb, rec


def save_checkpoint(
    dirpath: str | Path,
    params: EncoderParams,
    step: int,
    rankme_history: list | None = None,
    extra: dict | None = None,
) -> Path:
    """Write manifest.json + params.bin under `dirpath`."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "slide-encoder-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.cfg),
        "step": step,
        "rankme_history": rankme_history or [],
        "block_order": params.block_names(),
    }
    if extra:
        manifest.update(extra)
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    flat = params.to_flat()
    with open(root / "params.bin", "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(flat.astype("<f8").tobytes(order="C"))
    return root


def load_checkpoint(dirpath: str | Path) -> tuple[EncoderParams, dict]:
    root = Path(dirpath)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    cfg = EncoderConfig(**manifest["config"])
    raw = (root / "params.bin").read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise EncoderError("checkpoint params.bin: bad magic bytes")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise EncoderError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    flat = np.frombuffer(raw[8:], dtype="<f8").astype(np.float64)
    params = EncoderParams.from_flat(cfg, flat)
    return params, manifest
