"""scikit-learn style wrappers around SFT and preference optimization.

``X`` is a list of preference pairs (see :func:`validation.check_pairs`);
there is no ``y`` because the preference is encoded in the pair itself.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import masks as M
from . import tensor as T
from .analysis import preference_accuracy
from .config import TrainConfig
from .losses import PairBatch, pair_traces, preference_margins
from .model import TransformerLM
from .trainer import run_po, run_sft, sft_loss
from .validation import check_pairs, check_sequences

_MODEL_KEYS = ("vocab_size", "context_len", "n_layers", "d_model", "n_heads", "model_seed")


class SFTLanguageModel(BaseEstimator):
    """Next-token fine-tuning of a small transformer on {prompt, response} records."""

    def __init__(self, vocab_size=64, context_len=64, n_layers=2, d_model=64, n_heads=4,
                 model_seed=0, learning_rate=1e-3, epochs=2, batch_size=32, seed=0, init_model=None):
        self.vocab_size = vocab_size
        self.context_len = context_len
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.model_seed = model_seed
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.init_model = init_model

    def _config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _MODEL_KEYS},
                           sft_learning_rate=self.learning_rate, sft_epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed)

    def fit(self, X, y=None):
        cfg = self._config()
        records = check_sequences(X, cfg.vocab_spec())
        model = self.init_model.copy() if self.init_model is not None else TransformerLM(cfg.model_config())
        self.log_ = run_sft(model, records, cfg).log
        self.model_ = model
        return self

    def score(self, X, y=None) -> float:
        """Negative mean token NLL (higher is better)."""
        check_is_fitted(self, "model_")
        with T.no_grad():
            return -float(sft_loss(self.model_, check_sequences(X)).item())


class PreferenceOptimizer(BaseEstimator):
    """Preference optimization of ``init_model`` with any supported objective.

    ``predict`` returns 1 where the chosen response wins under the learned
    implicit reward, ``transform`` returns the m_u mask on chosen responses.
    """

    def __init__(self, init_model=None, method="sparse-common", beta=0.1, alpha=0.7,
                 gamma_margin=0.3, lam=50.0, epsilon=0.01, l1_coeff=0.001, learning_rate=3e-4,
                 mask_learning_rate=1e-3, mask_weight_decay=0.01, epochs=3, batch_size=32, seed=0,
                 extra=None):
        self.init_model = init_model
        self.method = method
        self.beta = beta
        self.alpha = alpha
        self.gamma_margin = gamma_margin
        self.lam = lam
        self.epsilon = epsilon
        self.l1_coeff = l1_coeff
        self.learning_rate = learning_rate
        self.mask_learning_rate = mask_learning_rate
        self.mask_weight_decay = mask_weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.extra = extra

    def _config(self, model: TransformerLM) -> TrainConfig:
        mc = model.config
        kw = dict(vocab_size=mc.vocab_size, context_len=mc.context_len, n_layers=mc.n_layers,
                  d_model=mc.d_model, n_heads=mc.n_heads, ffn_mult=mc.ffn_mult,
                  model_seed=mc.seed, tap_sites=",".join(mc.tap_sites))
        kw.update({k: getattr(self, k) for k in (
            "method", "beta", "alpha", "gamma_margin", "lam", "epsilon", "l1_coeff", "learning_rate",
            "mask_learning_rate", "mask_weight_decay", "epochs", "batch_size", "seed")})
        kw.update(self.extra or {})
        return TrainConfig(**kw)

    def fit(self, X, y=None, out_dir=None):
        if self.init_model is None:
            raise ValueError("PreferenceOptimizer needs init_model (an SFT TransformerLM)")
        cfg = self._config(self.init_model)
        pairs = check_pairs(X, cfg.vocab_spec())
        run = run_po(self.init_model, pairs, cfg, out_dir=out_dir)
        self.policy_, self.reference_, self.mask_nets_ = run.policy, run.reference, run.mask_nets
        self.log_ = run.log
        self.config_ = cfg
        return self

    def _margin_kind(self) -> str:
        return "simpo" if self.method == "simpo" else "dpo"

    def decision_function(self, X) -> np.ndarray:
        """Implicit-reward margin of chosen over rejected for each pair."""
        check_is_fitted(self, "policy_")
        batch = PairBatch.from_pairs(check_pairs(X))
        return preference_margins(self.policy_, self.reference_, batch, self._margin_kind(),
                                  self.beta, 0.0)

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)

    def score(self, X, y=None) -> float:
        """Preference accuracy, ties counted as one half."""
        check_is_fitted(self, "policy_")
        return preference_accuracy(self.policy_, self.reference_, check_pairs(X),
                                   self._margin_kind(), self.beta, 0.0)

    def transform(self, X) -> np.ndarray:
        """m_u on each chosen response, padded with NaN to the longest response."""
        check_is_fitted(self, "policy_")
        if self.config_.loss_config().mask_strategy not in M.LEARNED:
            raise ValueError(f"method {self.method!r} has no learned mask")
        batch = PairBatch.from_pairs(check_pairs(X))
        rc, _ = pair_traces(self.reference_, batch, grad=False)
        with T.no_grad():
            m = M.learned_mask_forward(self.mask_nets_[0], rc.hidden_states, self.epsilon,
                                       rc.response_mask)
        return np.where(rc.response_mask, m.values, np.nan)
