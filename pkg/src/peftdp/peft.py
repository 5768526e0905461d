"""Parameter-efficient fine-tuning mechanisms and trainable-parameter math.

Three mechanisms inject new parameters into a built model and freeze the
base: LoRA (low-rank deltas x@A@B scaled by alpha/r on selected dense
modules), bottleneck Adapters (down-GELU-up residual blocks after each
sublayer's layer norm), and (IA)^3 (learned elementwise scaling vectors on
selected module outputs). All three are exact no-ops at initialization:
LoRA's B and the Adapter up-projection start at zero, (IA)^3 vectors start
at one.

count_trainable_parameters() is pure closed-form arithmetic over a profile
and a PEFT configuration; it allocates nothing and reproduces the published
count tables exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import (ArchitectureProfile, ModelConfig, ParameterRegistry,
                    get_profile, head_parameter_names)
from .rng import rng_stream

PEFT_MODES = ("full", "lora", "adapter", "ia3")
ADAPTER_PLACEMENTS = ("post_attention", "post_ff")

# dense modules addressable by PEFT targets: short name -> (in_dim, out_dim)
# expressed in (d_model, d_ff) units
_MODULE_DIMS = {
    "q_lin": ("d", "d"),
    "k_lin": ("d", "d"),
    "v_lin": ("d", "d"),
    "out_lin": ("d", "d"),
    "lin1": ("d", "ff"),
    "lin2": ("ff", "d"),
}
_ATTENTION_MODULES = ("q_lin", "k_lin", "v_lin", "out_lin")


@dataclass
class PeftConfig:
    mode: str = "full"
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    lora_targets: tuple = ("q_lin", "v_lin")
    adapter_bottleneck: int = 32
    adapter_placement: tuple = ADAPTER_PLACEMENTS
    ia3_targets: tuple = ("q_lin", "v_lin", "out_lin")
    head_trainable: bool = True
    # None resolves per mode: Adapter's published counts exclude the head,
    # LoRA's and (IA)^3's include it.
    head_counted: bool | None = None

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        self.adapter_placement = tuple(self.adapter_placement)
        self.ia3_targets = tuple(self.ia3_targets)
        if self.head_counted is None:
            self.head_counted = self.mode != "adapter"

    def validate(self) -> "PeftConfig":
        if self.mode not in PEFT_MODES:
            raise ContractError(f"unknown peft mode {self.mode!r}; known: {PEFT_MODES}")
        if self.lora_rank < 1:
            raise ContractError("lora_rank must be positive")
        if self.lora_alpha <= 0:
            raise ContractError("lora_alpha must be positive")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ContractError("lora_dropout must lie in [0, 1)")
        if self.adapter_bottleneck < 1:
            raise ContractError("adapter_bottleneck must be positive")
        for t in self.lora_targets + self.ia3_targets:
            if t not in _MODULE_DIMS:
                raise ContractError(f"unknown target module {t!r}; known: "
                                    f"{sorted(_MODULE_DIMS)}")
        for p in self.adapter_placement:
            if p not in ADAPTER_PLACEMENTS:
                raise ContractError(f"unknown adapter placement {p!r}; known: "
                                    f"{ADAPTER_PLACEMENTS}")
        if not self.adapter_placement and self.mode == "adapter":
            raise ContractError("adapter mode needs at least one placement")
        if not self.lora_targets and self.mode == "lora":
            raise ContractError("lora mode needs at least one target module")
        if not self.ia3_targets and self.mode == "ia3":
            raise ContractError("ia3 mode needs at least one target module")
        return self


def _dims(config: ModelConfig, short: str) -> tuple[int, int]:
    din, dout = _MODULE_DIMS[short]
    lookup = {"d": config.d_model, "ff": config.d_ff}
    return lookup[din], lookup[dout]


def _module_path(layer: int, short: str) -> str:
    group = "attention" if short in _ATTENTION_MODULES else "ff"
    return f"layer.{layer}.{group}.{short}"


# ---------------------------------------------------------------------------
# counting (closed form, no allocation)
# ---------------------------------------------------------------------------

def _head_count(config: ModelConfig) -> int:
    d, c = config.d_model, config.n_classes
    n = d * c + c
    if config.has_pooler:
        n += d * d + d
    if config.has_pre_classifier:
        n += d * d + d
    return n


def _full_count(config: ModelConfig) -> int:
    d, ff = config.d_model, config.d_ff
    emb = config.vocab_size * d + 2 * d
    if config.positional_embeddings_trainable:
        emb += config.max_len * d
    if config.has_token_type_embeddings:
        emb += 2 * d
    layer = 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d) + 2 * d
    return emb + config.n_layers * layer + _head_count(config)


def count_trainable_parameters(profile: ArchitectureProfile | str, config: PeftConfig) -> int:
    """Exact trainable-parameter count for a profile under a PEFT config.

    Pure arithmetic over the configuration; runs in microseconds even for
    the full-size profiles.
    """
    if isinstance(profile, str):
        profile = get_profile(profile)
    mc = profile.config
    config.validate()

    if config.mode == "full":
        return _full_count(mc)

    head = _head_count(mc) if config.head_counted else 0
    if config.mode == "lora":
        r = config.lora_rank
        per_layer = sum(din * r + r * dout
                        for din, dout in (_dims(mc, t) for t in config.lora_targets))
        return mc.n_layers * per_layer + head
    if config.mode == "adapter":
        d, b = mc.d_model, config.adapter_bottleneck
        one = (d * b + b) + (b * d + d)
        return mc.n_layers * len(config.adapter_placement) * one + head
    # ia3: one scaling vector per target module per layer, sized to the output
    per_layer = sum(_dims(mc, t)[1] for t in config.ia3_targets)
    return mc.n_layers * per_layer + head


# ---------------------------------------------------------------------------
# injection
# ---------------------------------------------------------------------------

def inject_peft(reg: ParameterRegistry, config: PeftConfig, seed: int) -> ParameterRegistry:
    """Freeze the base model and add the configured PEFT parameters.

    The classifier head stays trainable when head_trainable is set. Raises
    for mode="full": injecting nothing silently would hide a
    misconfiguration.
    """
    config.validate()
    if config.mode == "full":
        raise ContractError("inject_peft called with mode='full'; "
                            "full fine-tuning injects nothing")
    if reg.config is None:
        raise ContractError("registry has no model config attached")
    if reg.peft is not None:
        raise ContractError("registry already has a PEFT mechanism injected")

    mc = reg.config
    for name in reg.names():
        reg.set_trainable(name, False)
    if config.head_trainable:
        for name in head_parameter_names(mc):
            reg.set_trainable(name, True)

    rng = rng_stream(seed, "peft-init")
    if config.mode == "lora":
        r = config.lora_rank
        for i in range(mc.n_layers):
            for t in config.lora_targets:
                din, dout = _dims(mc, t)
                path = _module_path(i, t)
                reg.add(f"{path}.lora_A", rng.normal(0.0, 1.0 / r, (din, r)))
                reg.add(f"{path}.lora_B", np.zeros((r, dout)))
    elif config.mode == "adapter":
        d, b = mc.d_model, config.adapter_bottleneck
        for i in range(mc.n_layers):
            for placement in config.adapter_placement:
                base = f"layer.{i}.adapter.{placement}"
                reg.add(f"{base}.down.weight", rng.normal(0.0, 0.02, (d, b)))
                reg.add(f"{base}.down.bias", np.zeros(b))
                reg.add(f"{base}.up.weight", np.zeros((b, d)))
                reg.add(f"{base}.up.bias", np.zeros(d))
    else:  # ia3
        for i in range(mc.n_layers):
            for t in config.ia3_targets:
                _, dout = _dims(mc, t)
                reg.add(f"{_module_path(i, t)}.ia3", np.ones(dout))

    reg.peft = config
    return reg


def trainable_parameter_names(reg: ParameterRegistry) -> list[str]:
    """Registry-ordered names of parameters that receive gradients and noise."""
    return [name for name, _, trainable in reg.items() if trainable]
