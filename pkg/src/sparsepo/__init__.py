"""Token-level preference optimization with learnable sparse masks."""
from .config import ConfigError, TrainConfig, load_config
from .data import PreferencePair, VocabSpec, generate_dataset, ground_truth_reward, make_sft_corpus
from .estimator import PreferenceOptimizer, SFTLanguageModel
from .losses import LossConfig, compute_loss
from .masks import MaskNetwork
from .model import ModelConfig, TransformerLM
from .trainer import run_po, run_sft

__version__ = "0.1.0"
