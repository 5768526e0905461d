"""Transformer encoder classifier over the autodiff primitives.

The model is a BERT-family post-LN encoder: token/positional (and optional
token-type) embeddings with layer norm, per-layer multi-head self-attention
and GELU feed-forward sublayers with residual layer norms, masked mean
pooling, and a classifier head. Fixed architecture profiles pin the exact
dimensioning used for parameter-count reproduction plus a small "desk"
profile that trains in minutes on a CPU.

Parameters live in a ParameterRegistry: named, ordered, trainability-flagged
tensors. Freezing, counting, clipping, noising, and checkpointing all key on
registry names like "layer.3.attention.q_lin.weight".
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .rng import rng_stream

INIT_STDDEV = 0.02
ATTENTION_MASK_BIAS = -1e9
N_TOKEN_TYPES = 2


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    n_classes: int
    has_token_type_embeddings: bool = False
    has_pooler: bool = False
    has_pre_classifier: bool = False
    positional_embeddings_trainable: bool = True
    dropout: float = 0.1

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "max_len", "d_model", "n_heads", "n_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ContractError("n_classes must be at least 2")
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        return self


@dataclass(frozen=True)
class ArchitectureProfile:
    name: str
    config: ModelConfig


PROFILES = {
    "distilbert-dims": ArchitectureProfile(
        "distilbert-dims",
        ModelConfig(vocab_size=30522, max_len=512, d_model=768, n_heads=12,
                    n_layers=6, d_ff=3072, n_classes=2,
                    has_pre_classifier=True)),
    "bert-base-dims": ArchitectureProfile(
        "bert-base-dims",
        ModelConfig(vocab_size=30522, max_len=512, d_model=768, n_heads=12,
                    n_layers=12, d_ff=3072, n_classes=2,
                    has_token_type_embeddings=True, has_pooler=True)),
    "desk": ArchitectureProfile(
        "desk",
        ModelConfig(vocab_size=2000, max_len=64, d_model=64, n_heads=4,
                    n_layers=2, d_ff=256, n_classes=2)),
}


def get_profile(name: str, positional_embeddings_trainable: bool | None = None) -> ArchitectureProfile:
    if name not in PROFILES:
        raise ContractError(f"unknown architecture profile {name!r}; "
                            f"known: {sorted(PROFILES)}")
    prof = PROFILES[name]
    if positional_embeddings_trainable is not None:
        prof = ArchitectureProfile(prof.name, replace(
            prof.config, positional_embeddings_trainable=positional_embeddings_trainable))
    return prof


class ParameterRegistry:
    """Ordered map of named parameter tensors with trainability flags."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self.peft = None  # set by peft.inject_peft

    def add(self, name: str, values: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(values, dtype=np.float64), name=name)
        self._params[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        for name, t in self._params.items():
            yield name, t, self._trainable[name]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        if name not in self._params:
            raise ContractError(f"unknown parameter {name!r}")
        self._trainable[name] = bool(flag)

    def trainable_tensors(self) -> list[Tensor]:
        return [t for n, t in self._params.items() if self._trainable[n]]

    @property
    def total_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    @property
    def trainable_parameter_total(self) -> int:
        return sum(t.size for t in self.trainable_tensors())


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_model(config: ModelConfig, seed: int) -> ParameterRegistry:
    """Allocate and initialize all parameters for `config`.

    Weight matrices and embedding tables draw from N(0, 0.02^2) on the
    seeded init stream; layer-norm gains are 1, all biases 0.
    """
    config.validate()
    rng = rng_stream(seed, "init")
    reg = ParameterRegistry(config)
    d = config.d_model

    def dense(name, n_in, n_out):
        reg.add(f"{name}.weight", rng.normal(0.0, INIT_STDDEV, (n_in, n_out)))
        reg.add(f"{name}.bias", np.zeros(n_out))

    def norm(name):
        reg.add(f"{name}.gain", np.ones(d))
        reg.add(f"{name}.bias", np.zeros(d))

    reg.add("embeddings.word.weight", rng.normal(0.0, INIT_STDDEV, (config.vocab_size, d)))
    reg.add("embeddings.position.weight", rng.normal(0.0, INIT_STDDEV, (config.max_len, d)),
            trainable=config.positional_embeddings_trainable)
    if config.has_token_type_embeddings:
        reg.add("embeddings.token_type.weight", rng.normal(0.0, INIT_STDDEV, (N_TOKEN_TYPES, d)))
    norm("embeddings.layer_norm")

    for i in range(config.n_layers):
        for lin in ("q_lin", "k_lin", "v_lin", "out_lin"):
            dense(f"layer.{i}.attention.{lin}", d, d)
        norm(f"layer.{i}.attention.layer_norm")
        dense(f"layer.{i}.ff.lin1", d, config.d_ff)
        dense(f"layer.{i}.ff.lin2", config.d_ff, d)
        norm(f"layer.{i}.ff.layer_norm")

    if config.has_pooler:
        dense("pooler", d, d)
    if config.has_pre_classifier:
        dense("pre_classifier", d, d)
    dense("classifier", d, config.n_classes)
    return reg


def head_parameter_names(config: ModelConfig) -> list[str]:
    """The classifier-head parameters (pooler / pre-classifier / classifier)."""
    names = []
    if config.has_pooler:
        names += ["pooler.weight", "pooler.bias"]
    if config.has_pre_classifier:
        names += ["pre_classifier.weight", "pre_classifier.bias"]
    names += ["classifier.weight", "classifier.bias"]
    return names


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _dropout(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode forward with dropout needs a dropout rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul_const(x, keep)


def _linear(x: Tensor, reg: ParameterRegistry, module: str,
            training: bool, rng) -> Tensor:
    """Apply a named dense module, plus any LoRA/(IA)^3 path injected on it."""
    out = ad.add(ad.matmul(x, reg[f"{module}.weight"]), reg[f"{module}.bias"])
    peft = reg.peft
    if peft is None:
        return out
    short = module.rsplit(".", 1)[-1]
    if peft.mode == "lora" and short in peft.lora_targets:
        xin = _dropout(x, peft.lora_dropout, rng, training)
        delta = ad.matmul(ad.matmul(xin, reg[f"{module}.lora_A"]), reg[f"{module}.lora_B"])
        out = ad.add(out, ad.scale(delta, peft.lora_alpha / peft.lora_rank))
    elif peft.mode == "ia3" and short in peft.ia3_targets:
        out = ad.mul(out, reg[f"{module}.ia3"])
    return out


def _maybe_adapter(x: Tensor, reg: ParameterRegistry, layer: int, placement: str) -> Tensor:
    peft = reg.peft
    if peft is None or peft.mode != "adapter" or placement not in peft.adapter_placement:
        return x
    base = f"layer.{layer}.adapter.{placement}"
    h = ad.add(ad.matmul(x, reg[f"{base}.down.weight"]), reg[f"{base}.down.bias"])
    h = ad.gelu(h)
    h = ad.add(ad.matmul(h, reg[f"{base}.up.weight"]), reg[f"{base}.up.bias"])
    return ad.add(x, h)


def _attention(x: Tensor, reg: ParameterRegistry, layer: int, mask_bias: np.ndarray,
               training: bool, rng) -> Tensor:
    cfg = reg.config
    b, length, d = x.shape
    heads, dh = cfg.n_heads, d // cfg.n_heads
    prefix = f"layer.{layer}.attention"

    def split(t):
        return ad.transpose(ad.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    # fold the 1/sqrt(d_head) scaling into q before the head split (smaller array)
    q = split(ad.scale(_linear(x, reg, f"{prefix}.q_lin", training, rng), 1.0 / np.sqrt(dh)))
    k = split(_linear(x, reg, f"{prefix}.k_lin", training, rng))
    v = split(_linear(x, reg, f"{prefix}.v_lin", training, rng))

    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    probs = ad.masked_softmax(scores, mask_bias)
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, length, d))
    return _linear(ctx, reg, f"{prefix}.out_lin", training, rng)


def forward_classify(reg: ParameterRegistry, token_ids, padding_mask,
                     training: bool = False, dropout_rng=None) -> Tensor:
    """Run the classifier; returns logits of shape (batch, n_classes).

    `token_ids` is an integer (batch, length) array, `padding_mask` a 0/1
    array of the same shape marking real tokens. Padded positions are
    excluded from attention keys and from pooling, so they never influence
    the logits of real tokens.
    """
    cfg = reg.config
    if cfg is None:
        raise ContractError("registry has no model config attached")
    ids = np.asarray(token_ids)
    mask = np.asarray(padding_mask, dtype=np.float64)
    if ids.ndim != 2:
        raise ContractError(f"token_ids must be (batch, length), got {ids.shape}")
    if mask.shape != ids.shape:
        raise ContractError("padding_mask shape must match token_ids")
    b, length = ids.shape
    if length > cfg.max_len:
        raise ContractError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    counts = mask.sum(axis=1)
    if np.any(counts < 1):
        raise ContractError("every sample needs at least one unmasked token")

    emb = ad.embedding_lookup(reg["embeddings.word.weight"], ids)
    pos = ad.embedding_lookup(reg["embeddings.position.weight"], np.arange(length))
    emb = ad.add(emb, pos)
    if cfg.has_token_type_embeddings:
        # single-segment inputs: everything is token type 0
        tt = ad.embedding_lookup(reg["embeddings.token_type.weight"], np.zeros(1, dtype=np.int64))
        emb = ad.add(emb, tt)
    x = ad.layer_norm(emb, reg["embeddings.layer_norm.gain"], reg["embeddings.layer_norm.bias"])
    x = _dropout(x, cfg.dropout, dropout_rng, training)

    mask_bias = ((1.0 - mask) * ATTENTION_MASK_BIAS).reshape(b, 1, 1, length)

    for i in range(cfg.n_layers):
        attn = _attention(x, reg, i, mask_bias, training, dropout_rng)
        attn = _dropout(attn, cfg.dropout, dropout_rng, training)
        x = ad.layer_norm(ad.add(x, attn),
                          reg[f"layer.{i}.attention.layer_norm.gain"],
                          reg[f"layer.{i}.attention.layer_norm.bias"])
        x = _maybe_adapter(x, reg, i, "post_attention")

        ff = _linear(x, reg, f"layer.{i}.ff.lin1", training, dropout_rng)
        ff = _linear(ad.gelu(ff), reg, f"layer.{i}.ff.lin2", training, dropout_rng)
        ff = _dropout(ff, cfg.dropout, dropout_rng, training)
        x = ad.layer_norm(ad.add(x, ff),
                          reg[f"layer.{i}.ff.layer_norm.gain"],
                          reg[f"layer.{i}.ff.layer_norm.bias"])
        x = _maybe_adapter(x, reg, i, "post_ff")

    # masked mean pooling over real positions
    pooled = ad.reduce_sum(ad.mul_const(x, mask[:, :, None]), axis=1)
    pooled = ad.mul_const(pooled, (1.0 / counts)[:, None])

    if cfg.has_pooler:
        pooled = ad.tanh(ad.add(ad.matmul(pooled, reg["pooler.weight"]), reg["pooler.bias"]))
    if cfg.has_pre_classifier:
        pooled = ad.relu(ad.add(ad.matmul(pooled, reg["pre_classifier.weight"]),
                                reg["pre_classifier.bias"]))
        pooled = _dropout(pooled, cfg.dropout, dropout_rng, training)

    return ad.add(ad.matmul(pooled, reg["classifier.weight"]), reg["classifier.bias"])


def loss_per_sample(logits: Tensor, labels) -> Tensor:
    """Per-sample cross entropy; its mean over the batch is the training loss."""
    return ad.cross_entropy_with_logits(logits, labels)
