"""Desk-scale lab for private fine-tuning and privacy auditing.

Fine-tunes a small transformer classifier with full-model or
parameter-efficient methods (LoRA, bottleneck Adapter, (IA)^3), optionally
under sample-level DP-SGD with RDP accounting, and measures privacy leakage
via loss-based membership inference and a canary label-flip memorisation
audit.
"""

from .attacks import (AttackReport, CanaryManifest, LossTrace,
                      auc_at_final_epoch, canary_audit, flip_canaries,
                      mia_loss_attack)
from .autodiff import GradientTape, Tensor, backward
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config, resolve
from .data import (Corpus, Vocabulary, build_vocab_and_encode, encode,
                   generate_synthetic_task, load_jsonl, subsample_split)
from .dp import (PrivacySpec, RdpAccountant, calibrate_noise, clip_per_sample,
                 dp_sgd_step, epsilon_from_rdp, rdp_subsampled_gaussian,
                 spent_epsilon)
from .errors import ContractError, FormatError, NonFiniteError
from .harness import (RunRecord, emit_metrics, sweep_parameter_variation,
                      train)
from .model import (ArchitectureProfile, ModelConfig, PROFILES,
                    ParameterRegistry, build_model, forward_classify,
                    get_profile, loss_per_sample)
from .peft import (PeftConfig, count_trainable_parameters, inject_peft,
                   trainable_parameter_names)

__version__ = "0.1.0"
