"""Tiny decoder-only causal LM with low-rank adapters on attention projections.

Architecture (pre-norm residual blocks, row-activation convention, X: T x d):

    x = tok_embed[ids] + pos_embed[positions]
    per layer: x += attn(LN1(x));  x += mlp(LN2(x))   # mlp = relu(x W1) W2
    logits = LN_f(x) @ head

Adapted projections compute ``x @ W + (x @ A) @ B`` with A (d_in x r) drawn
from N(0, init_std^2) and B (r x d_out) zero at initialization, so a fresh
adapter leaves the forward pass bit-identical to the frozen base. Base
weights are immutable (ndarray writeable=False); training touches only the
A/B factors, and gradients are materialized only for them (backprop flows
through the base without forming base weight gradients).

Batches are packed: documents are concatenated along the time axis and
attention runs per document segment, so no padding enters the math and
per-document results are independent of how documents are batched.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS, VOCAB_SIZE
from . import numerics as nm

ATTN_TARGETS = ("attn_q", "attn_k", "attn_v", "attn_o")
DELTA_MAGIC = b"CLLR"
DELTA_VERSION = 1
EVAL_BATCH_DOCS = 32


class ConfigError(ValueError):
    """Invalid model configuration."""


class FingerprintError(ValueError):
    """Delta does not match the receiving model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 128
    lora_rank: int = 2
    lora_targets: tuple[str, ...] = ("attn_q", "attn_v")
    lora_init_std: float = 0.02

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads,
               self.d_ff, self.max_seq_len) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not self.lora_targets:
            raise ConfigError("lora_targets must not be empty")
        if len(set(self.lora_targets)) != len(self.lora_targets):
            raise ConfigError("lora_targets must be unique")
        for t in self.lora_targets:
            if t not in ATTN_TARGETS:
                raise ConfigError(f"unknown lora target {t!r}; valid: {ATTN_TARGETS}")
        if not 1 <= self.lora_rank or 2 * self.lora_rank > self.d_model:
            raise ConfigError(
                f"lora_rank {self.lora_rank} must satisfy 1 <= r <= d_model/2"
            )
        if not self.lora_init_std > 0:
            raise ConfigError("lora_init_std must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def adapter_keys(self) -> list[tuple[int, str]]:
        """Canonical (layer, target) order: layer-major, config target order."""
        return [(layer, t) for layer in range(self.n_layers)
                for t in self.lora_targets]

    def canonical_string(self) -> str:
        return "|".join([
            f"vocab={self.vocab_size}", f"d_model={self.d_model}",
            f"n_layers={self.n_layers}", f"n_heads={self.n_heads}",
            f"d_ff={self.d_ff}", f"max_seq_len={self.max_seq_len}",
            f"rank={self.lora_rank}", f"targets={','.join(self.lora_targets)}",
            f"init_std={self.lora_init_std!r}",
        ])

    def fingerprint(self) -> int:
        digest = hashlib.sha256(self.canonical_string().encode()).digest()
        return struct.unpack("<Q", digest[:8])[0]


def _base_param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    d, ff = cfg.d_model, cfg.d_ff
    shapes = [("tok_embed", (cfg.vocab_size, d)), ("pos_embed", (cfg.max_seq_len, d))]
    for i in range(cfg.n_layers):
        shapes += [
            (f"layer{i}/ln1_gamma", (1, d)), (f"layer{i}/ln1_beta", (1, d)),
            (f"layer{i}/wq", (d, d)), (f"layer{i}/wk", (d, d)),
            (f"layer{i}/wv", (d, d)), (f"layer{i}/wo", (d, d)),
            (f"layer{i}/ln2_gamma", (1, d)), (f"layer{i}/ln2_beta", (1, d)),
            (f"layer{i}/mlp_w1", (d, ff)), (f"layer{i}/mlp_w2", (ff, d)),
        ]
    shapes += [("lnf_gamma", (1, d)), ("lnf_beta", (1, d)),
               ("head", (d, cfg.vocab_size))]
    return shapes


BASE_INIT_STD = 0.02


@dataclass
class FrozenBase:
    """Immutable base weights; arrays are read-only ndarrays."""
    config: ModelConfig
    params: dict[str, np.ndarray]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.params[key]


@dataclass
class LoraAdapter:
    """Trainable rank-r factors, keyed by (layer, target) in canonical order."""
    config: ModelConfig
    factors: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            config=self.config,
            factors={k: (a.copy(), b.copy()) for k, (a, b) in self.factors.items()},
        )


@dataclass
class LoraDelta:
    """Wire/disk form of an adapter: float32 factor pairs in canonical order."""
    fingerprint: int
    pairs: list[tuple[np.ndarray, np.ndarray]]

    def n_params(self) -> int:
        return sum(a.size + b.size for a, b in self.pairs)

    def payload_bytes(self) -> int:
        return 4 * self.n_params()


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def init(config: ModelConfig, seed: int) -> tuple[FrozenBase, LoraAdapter]:
    """Deterministic base + adapter initialization from a single seed.

    Each parameter draws from its own (seed, name)-derived stream, so the
    initialization of one tensor never shifts another's. Layer-norm affine
    params start at identity (gamma=1, beta=0); every other base weight is
    N(0, 0.02^2). Adapter A factors are N(0, lora_init_std^2); B factors are
    exactly zero.
    """
    rng = nm.Rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, (rows, cols) in _base_param_shapes(config):
        if name.endswith("gamma"):
            arr = np.ones((rows, cols))
        elif name.endswith("beta"):
            arr = np.zeros((rows, cols))
        else:
            arr = rng.split(f"init/{name}").normal(rows, cols, BASE_INIT_STD)
        params[name] = _freeze(arr)
    base = FrozenBase(config=config, params=params)

    d, r = config.d_model, config.lora_rank
    factors = {}
    for layer, target in config.adapter_keys():
        a = rng.split(f"init/lora/{layer}/{target}/A").normal(
            d, r, config.lora_init_std
        )
        b = np.zeros((r, d))
        factors[(layer, target)] = (a, b)
    return base, LoraAdapter(config=config, factors=factors)


def count_trainable(layers: int, d_model: int, r: int,
                    targets=("attn_q", "attn_v")) -> int:
    """Adapter parameter count: layers * sum_targets r * (d_in + d_out).

    Attention projections are square, so each target contributes
    2 * r * d_model per layer.
    """
    if min(layers, d_model, r) < 1:
        raise ConfigError("layers, d_model and r must be positive")
    per_layer = 0
    for t in targets:
        if t not in ATTN_TARGETS:
            raise ConfigError(f"unknown lora target {t!r}")
        per_layer += r * (d_model + d_model)
    return layers * per_layer


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _adapter_bypass(x: np.ndarray, a: np.ndarray, b: np.ndarray):
    """(x @ A, (x @ A) @ B). The bypass is exactly zero while A or B is."""
    xa = nm.matmul(x, a)
    return xa, nm.matmul(xa, b)


def _add_bypass(y: np.ndarray, bypass: np.ndarray) -> np.ndarray:
    # Skipping an all-zero bypass keeps fresh-adapter forwards bit-identical
    # to the base-only forward (0.0 + -0.0 would flip signed zeros).
    if not bypass.any():
        return y
    return y + bypass


def _projection(x, base, adapter, layer, target, cache):
    """x @ W[target] plus the LoRA bypass when (layer, target) is adapted."""
    w = base[f"layer{layer}/w{target[-1]}"]
    y = nm.matmul(x, w)
    key = (layer, target)
    if key in adapter.factors:
        a, b = adapter.factors[key]
        xa, bypass = _adapter_bypass(x, a, b)
        if cache is not None:
            cache[f"xa{target[-1]}"] = xa
            cache[f"xin{target[-1]}"] = x
        y = _add_bypass(y, bypass)
    return y


@dataclass
class _LayerCache:
    x_in: np.ndarray = None
    h1: np.ndarray = None
    ln1: tuple = None
    q: np.ndarray = None
    k: np.ndarray = None
    v: np.ndarray = None
    probs: list = field(default_factory=list)  # per (segment, head) softmax
    attn: np.ndarray = None
    x_mid: np.ndarray = None
    h2: np.ndarray = None
    ln2: tuple = None
    u: np.ndarray = None
    act: np.ndarray = None
    proj: dict = field(default_factory=dict)   # adapter inputs / xa caches


def _forward_packed(base: FrozenBase, adapter: LoraAdapter,
                    token_rows: list[np.ndarray], need_cache: bool):
    cfg = base.config
    bounds = []
    start = 0
    for row in token_rows:
        t = int(row.shape[0])
        if t == 0:
            raise ValueError("empty token sequence in batch")
        if t > cfg.max_seq_len:
            raise ValueError(
                f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}"
            )
        bounds.append((start, start + t))
        start += t
    ids = np.concatenate(token_rows).astype(np.int64)
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        bad = int(ids[(ids < 0) | (ids >= cfg.vocab_size)][0])
        raise ValueError(f"token id {bad} outside [0, {cfg.vocab_size})")
    pos = np.concatenate([np.arange(e - s) for s, e in bounds])

    x = base["tok_embed"][ids] + base["pos_embed"][pos]
    scale = 1.0 / math.sqrt(cfg.d_head)
    caches: list[_LayerCache] = []

    for layer in range(cfg.n_layers):
        lc = _LayerCache()
        lc.x_in = x
        h1, m1, r1 = nm.layernorm(x, base[f"layer{layer}/ln1_gamma"],
                                  base[f"layer{layer}/ln1_beta"])
        lc.h1, lc.ln1 = h1, (m1, r1)
        proj_cache = lc.proj if need_cache else None
        q = _projection(h1, base, adapter, layer, "attn_q", proj_cache)
        k = _projection(h1, base, adapter, layer, "attn_k", proj_cache)
        v = _projection(h1, base, adapter, layer, "attn_v", proj_cache)
        lc.q, lc.k, lc.v = q, k, v

        attn = np.empty_like(x)
        dh = cfg.d_head
        for (s, e) in bounds:
            for h in range(cfg.n_heads):
                cols = slice(h * dh, (h + 1) * dh)
                qs = np.ascontiguousarray(q[s:e, cols]) * scale
                ks = np.ascontiguousarray(k[s:e, cols])
                vs = np.ascontiguousarray(v[s:e, cols])
                scores = nm.matmul(qs, nm.transpose(ks))
                probs = nm.causal_row_softmax(scores)
                attn[s:e, cols] = nm.matmul(probs, vs)
                if need_cache:
                    lc.probs.append(probs)
        lc.attn = attn
        attn_out = _projection(attn, base, adapter, layer, "attn_o", proj_cache)
        x = x + attn_out

        lc.x_mid = x
        h2, m2, r2 = nm.layernorm(x, base[f"layer{layer}/ln2_gamma"],
                                  base[f"layer{layer}/ln2_beta"])
        lc.h2, lc.ln2 = h2, (m2, r2)
        u = nm.matmul(h2, base[f"layer{layer}/mlp_w1"])
        act = nm.relu(u)
        lc.u, lc.act = u, act
        x = x + nm.matmul(act, base[f"layer{layer}/mlp_w2"])
        caches.append(lc)

    hf, mf, rf = nm.layernorm(x, base["lnf_gamma"], base["lnf_beta"])
    logits = nm.matmul(hf, base["head"])
    cache = {
        "bounds": bounds,
        "layers": caches,
        "x_final": x,
        "lnf": (mf, rf),
    } if need_cache else None
    return logits, cache


def forward(base: FrozenBase, adapter: LoraAdapter, tokens) -> np.ndarray:
    """Logits (T x vocab) for one token sequence under causal masking."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValueError("tokens must be a 1-D sequence of ids")
    logits, _ = _forward_packed(base, adapter, [tokens], need_cache=False)
    return logits


def _proj_backward(dy, x, base, adapter, grads, layer, target, cache):
    """Input gradient of an adapted projection; records the adapter grads."""
    w = base[f"layer{layer}/w{target[-1]}"]
    dx = nm.matmul(dy, nm.transpose(w))
    key = (layer, target)
    if key in adapter.factors:
        a, b = adapter.factors[key]
        xa = cache[f"xa{target[-1]}"]
        dxa = nm.matmul(dy, nm.transpose(b))           # T x r
        da = nm.matmul(nm.transpose(x), dxa)
        db = nm.matmul(nm.transpose(xa), dy)
        grads[key] = (da, db)
        dx = dx + nm.matmul(dxa, nm.transpose(a))
    return dx


def loss_and_grads(base: FrozenBase, adapter: LoraAdapter,
                   batch: list[np.ndarray]):
    """Mean next-token cross-entropy over the batch and adapter gradients.

    Each document contributes input [BOS] + doc[:-1] predicting doc; the
    loss is the mean over all token positions in the batch. Gradients are
    returned only for the adapter's (A, B) factors.
    """
    if not batch:
        raise ValueError("batch must contain at least one document")
    cfg = base.config
    token_rows = []
    target_rows = []
    for doc in batch:
        doc = np.asarray(doc, dtype=np.int64)
        if doc.shape[0] == 0:
            raise ValueError("batch contains an empty document")
        token_rows.append(np.concatenate(([BOS], doc[:-1])))
        target_rows.append(doc)
    logits, cache = _forward_packed(base, adapter, token_rows, need_cache=True)
    targets = np.concatenate(target_rows)
    loss, dlogits = nm.cross_entropy(logits, targets)

    grads: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}
    scale = 1.0 / math.sqrt(cfg.d_head)
    bounds = cache["bounds"]
    dh = cfg.d_head

    dhf = nm.matmul(dlogits, nm.transpose(base["head"]))
    mf, rf = cache["lnf"]
    dx, _, _ = nm.layernorm_backward(dhf, cache["x_final"], base["lnf_gamma"],
                                     mf, rf)

    for layer in reversed(range(cfg.n_layers)):
        lc = cache["layers"][layer]
        # MLP block: x_out = x_mid + relu(h2 @ w1) @ w2
        dact = nm.matmul(dx, nm.transpose(base[f"layer{layer}/mlp_w2"]))
        du = nm.relu_backward(dact, lc.u)
        dh2 = nm.matmul(du, nm.transpose(base[f"layer{layer}/mlp_w1"]))
        m2, r2 = lc.ln2
        dln2, _, _ = nm.layernorm_backward(dh2, lc.x_mid,
                                           base[f"layer{layer}/ln2_gamma"], m2, r2)
        dx_mid = dx + dln2

        # Attention block: x_mid = x_in + proj_o(attn)
        dattn = _proj_backward(dx_mid, lc.attn, base, adapter, grads,
                               layer, "attn_o", lc.proj)
        dq = np.empty_like(lc.q)
        dk = np.empty_like(lc.k)
        dv = np.empty_like(lc.v)
        idx = 0
        for (s, e) in bounds:
            for h in range(cfg.n_heads):
                cols = slice(h * dh, (h + 1) * dh)
                probs = lc.probs[idx]
                idx += 1
                dout = np.ascontiguousarray(dattn[s:e, cols])
                vs = np.ascontiguousarray(lc.v[s:e, cols])
                qs = np.ascontiguousarray(lc.q[s:e, cols]) * scale
                ks = np.ascontiguousarray(lc.k[s:e, cols])
                dprobs = nm.matmul(dout, nm.transpose(vs))
                dv[s:e, cols] = nm.matmul(nm.transpose(probs), dout)
                dscores = nm.causal_row_softmax_backward(probs, dprobs)
                dq[s:e, cols] = nm.matmul(dscores, ks) * scale
                dk[s:e, cols] = nm.matmul(nm.transpose(dscores), qs)
        dh1 = _proj_backward(dq, lc.h1, base, adapter, grads,
                             layer, "attn_q", lc.proj)
        dh1 = dh1 + _proj_backward(dk, lc.h1, base, adapter, grads,
                                   layer, "attn_k", lc.proj)
        dh1 = dh1 + _proj_backward(dv, lc.h1, base, adapter, grads,
                                   layer, "attn_v", lc.proj)
        m1, r1 = lc.ln1
        dln1, _, _ = nm.layernorm_backward(dh1, lc.x_in,
                                           base[f"layer{layer}/ln1_gamma"], m1, r1)
        dx = dx_mid + dln1

    return loss, grads


def batch_loss(base: FrozenBase, adapter: LoraAdapter,
               batch: list[np.ndarray]) -> tuple[float, int]:
    """(mean loss, token count) for a batch, without gradients."""
    token_rows = []
    target_rows = []
    for doc in batch:
        doc = np.asarray(doc, dtype=np.int64)
        if doc.shape[0] == 0:
            raise ValueError("batch contains an empty document")
        token_rows.append(np.concatenate(([BOS], doc[:-1])))
        target_rows.append(doc)
    logits, _ = _forward_packed(base, adapter, token_rows, need_cache=False)
    targets = np.concatenate(target_rows)
    loss, _ = nm.cross_entropy(logits, targets)
    return loss, int(targets.shape[0])


def mean_loss(base: FrozenBase, adapter: LoraAdapter, docs: list[np.ndarray],
              batch_docs: int = EVAL_BATCH_DOCS) -> float:
    """Token-level mean cross-entropy over documents, in fixed batch order."""
    if not docs:
        raise ValueError("mean_loss needs at least one document")
    total = 0.0
    count = 0
    for i in range(0, len(docs), batch_docs):
        loss, n = batch_loss(base, adapter, docs[i:i + batch_docs])
        total += loss * n
        count += n
    return total / count


# ---------------------------------------------------------------------------
# Delta extraction / application / wire format
# ---------------------------------------------------------------------------


def extract_delta(adapter: LoraAdapter) -> LoraDelta:
    """Quantize the adapter's factors to float32 in canonical order."""
    pairs = []
    for key in adapter.config.adapter_keys():
        a, b = adapter.factors[key]
        pairs.append((a.astype(np.float32), b.astype(np.float32)))
    return LoraDelta(fingerprint=adapter.config.fingerprint(), pairs=pairs)


def apply_delta(delta: LoraDelta, adapter: LoraAdapter) -> LoraAdapter:
    """Overwrite the adapter's factors with the delta's (upcast to float64)."""
    expected = adapter.config.fingerprint()
    if delta.fingerprint != expected:
        raise FingerprintError(
            f"delta fingerprint {delta.fingerprint:#018x} does not match "
            f"adapter config {expected:#018x}"
        )
    keys = adapter.config.adapter_keys()
    if len(keys) != len(delta.pairs):
        raise FingerprintError(
            f"delta has {len(delta.pairs)} factor pairs, config expects {len(keys)}"
        )
    for key, (a32, b32) in zip(keys, delta.pairs):
        a, b = adapter.factors[key]
        a[...] = a32.astype(np.float64)
        b[...] = b32.astype(np.float64)
    return adapter


def serialize_delta(delta: LoraDelta) -> bytes:
    """Wire format: magic, version u32, fingerprint u64, pair count u32, then
    per pair 4 u32 dims and A, B as little-endian float32."""
    out = [struct.pack("<4sIQI", DELTA_MAGIC, DELTA_VERSION,
                       delta.fingerprint, len(delta.pairs))]
    for a, b in delta.pairs:
        out.append(struct.pack("<IIII", a.shape[0], a.shape[1],
                               b.shape[0], b.shape[1]))
        out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(out)


def deserialize_delta(data: bytes, config: ModelConfig) -> LoraDelta:
    """Parse and validate a delta payload against the receiving config."""
    header_size = struct.calcsize("<4sIQI")
    if len(data) < header_size:
        raise FingerprintError("delta payload truncated (no header)")
    magic, version, fingerprint, n_pairs = struct.unpack_from("<4sIQI", data)
    if magic != DELTA_MAGIC:
        raise FingerprintError(f"bad delta magic {magic!r}")
    if version != DELTA_VERSION:
        raise FingerprintError(f"unsupported delta version {version}")
    if fingerprint != config.fingerprint():
        raise FingerprintError(
            f"delta fingerprint {fingerprint:#018x} does not match "
            f"config {config.fingerprint():#018x}"
        )
    keys = config.adapter_keys()
    if n_pairs != len(keys):
        raise FingerprintError(
            f"delta has {n_pairs} factor pairs, config expects {len(keys)}"
        )
    offset = header_size
    pairs = []
    for _ in range(n_pairs):
        ar, ac, br, bc = struct.unpack_from("<IIII", data, offset)
        offset += 16
        if (ar, ac) != (config.d_model, config.lora_rank) or \
                (br, bc) != (config.lora_rank, config.d_model):
            raise FingerprintError(
                f"factor dims ({ar}x{ac}, {br}x{bc}) do not match config"
            )
        a = np.frombuffer(data, dtype="<f4", count=ar * ac, offset=offset)
        offset += 4 * ar * ac
        b = np.frombuffer(data, dtype="<f4", count=br * bc, offset=offset)
        offset += 4 * br * bc
        pairs.append((a.reshape(ar, ac).copy(), b.reshape(br, bc).copy()))
    if offset != len(data):
        raise FingerprintError("trailing bytes after delta payload")
    return LoraDelta(fingerprint=fingerprint, pairs=pairs)


def delta_file_bytes(config: ModelConfig) -> tuple[int, int]:
    """(payload bytes, header/framing bytes) of one serialized delta."""
    n_pairs = len(config.adapter_keys())
    payload = 4 * count_trainable(config.n_layers, config.d_model,
                                  config.lora_rank, config.lora_targets)
    framing = struct.calcsize("<4sIQI") + 16 * n_pairs
    return payload, framing


def write_delta(delta: LoraDelta, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_delta(delta))


def read_delta(path, config: ModelConfig) -> LoraDelta:
    with open(path, "rb") as fh:
        return deserialize_delta(fh.read(), config)
