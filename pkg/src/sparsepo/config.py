"""Run configuration: a flat ``key = value`` file plus ``--set`` overrides.

``config_schema.json`` (shipped next to this module) documents every key;
:func:`render_schema` regenerates it from :class:`TrainConfig`.
"""
from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .data import VocabSpec
from .losses import METHODS, LossConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


def _f(default, help: str):
    return field(default=default, metadata={"help": help})


@dataclass
class TrainConfig:
    # model
    vocab_size: int = _f(64, "vocabulary size (token ids 0..vocab_size-1)")
    context_len: int = _f(64, "maximum sequence length")
    n_layers: int = _f(2, "transformer layers")
    d_model: int = _f(64, "hidden width")
    n_heads: int = _f(4, "attention heads; must divide d_model")
    ffn_mult: float = _f(4.0, "feed-forward width as a multiple of d_model")
    model_seed: int = _f(0, "parameter initialization seed")
    tap_sites: str = _f("attn,ffn,resid", "activation sites averaged by the mapo mask")
    # data
    n_pairs: int = _f(2000, "training preference pairs for gen-data")
    n_eval_pairs: int = _f(500, "held-out preference pairs for gen-data")
    n_sft: int = _f(2000, "supervised fine-tuning sequences for gen-data")
    prompt_len: int = _f(8, "prompt length including the bos token")
    resp_len: int = _f(12, "response length before the eos token")
    cue_density: float = _f(0.25, "fraction of response tokens that are cue tokens")
    data_seed: int = _f(0, "dataset generation seed")
    n_pos_cues: int = _f(8, "number of positive cue ids (taken after the special ids)")
    n_neg_cues: int = _f(8, "number of negative cue ids (taken after the positive cues)")
    # loss
    method: str = _f("sparse-common", "objective: " + ", ".join(METHODS))
    beta: float = _f(0.1, "reward / KL scale")
    alpha: float = _f(0.7, "tdpo2 weight on the sequential KL term")
    gamma_margin: float = _f(0.3, "simpo target margin")
    lam: float = _f(50.0, "dpop penalty weight")
    epsilon: float = _f(0.01, "mask floor; weights are clamped into [epsilon, 1]")
    l1_coeff: float = _f(0.001, "L1 penalty on learned mask values")
    mask_stop_gradient: bool = _f(False, "detach masks inside the objective")
    mask_init_bias: float = _f(0.5, "initial bias of every per-layer mask unit")
    mask_init_std: float = _f(0.02, "std of the initial per-layer mask weights")
    # optimization
    learning_rate: float = _f(3e-4, "policy learning rate")
    mask_learning_rate: float = _f(1e-3, "mask-network learning rate")
    weight_decay: float = _f(0.0, "decoupled weight decay on policy parameters")
    mask_weight_decay: float = _f(0.01, "decoupled weight decay on mask parameters")
    epochs: int = _f(3, "passes over the training set")
    batch_size: int = _f(32, "pairs (or sequences) per micro-batch")
    grad_accum: int = _f(1, "micro-batches per optimizer step")
    warmup_frac: float = _f(0.0, "fraction of steps spent in linear warmup")
    lr_schedule: str = _f("constant", "constant or linear (decay to zero)")
    max_grad_norm: float = _f(1.0, "global-norm gradient clip; 0 disables")
    seed: int = _f(0, "training seed (shuffling, random masks)")
    num_threads: int = _f(1, "BLAS threads during training")
    # sft
    sft_learning_rate: float = _f(1e-3, "learning rate for supervised fine-tuning")
    sft_epochs: int = _f(2, "supervised fine-tuning epochs")
    # logging and checkpoints
    log_interval: int = _f(1, "optimizer steps between metrics records")
    checkpoint_every: int = _f(0, "optimizer steps between checkpoints; 0 saves at the end only")
    stop_after: int = _f(0, "stop after this many optimizer steps (0 runs to completion)")
    # evaluation
    eval_every: int = _f(100, "frontier checkpoint cadence in optimizer steps")
    sample_max_len: int = _f(16, "maximum sampled response length")
    temperature: float = _f(1.0, "sampling temperature")
    top_p: float = _f(1.0, "nucleus sampling mass; 1 is plain multinomial sampling")
    n_frontier_prompts: int = _f(100, "prompts sampled per frontier point")
    beta_grid: str = _f("0.01,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1,2,3,4,5,10,20",
                        "beta values for frontier and sparsity sweeps")
    zero_threshold: float = _f(-1.0, "sparsity cutoff; negative means use epsilon")
    heatmap_pairs: int = _f(4, "held-out pairs exported by heatmap")
    # paths
    out_dir: str = _f("runs", "output directory")
    train_data: str = _f("", "preference dataset file (default: <out_dir>/train.jsonl)")
    eval_data: str = _f("", "held-out preference dataset (default: <out_dir>/eval.jsonl)")
    sft_data: str = _f("", "sft corpus file (default: <out_dir>/sft.jsonl)")
    init_checkpoint: str = _f("", "policy/reference initialization checkpoint")
    checkpoint: str = _f("", "checkpoint to evaluate or resume from")
    run_dirs: str = _f("", "comma-separated run directories for frontier/sparsity-report")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        for k in ("learning_rate", "mask_learning_rate", "beta", "sft_learning_rate"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be > 0")
        for k in ("batch_size", "grad_accum", "log_interval"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        if self.epochs < 0 or self.sft_epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"n_heads ({self.n_heads}) must divide d_model ({self.d_model})")
        if not 0 <= self.epsilon < 1:
            raise ConfigError("epsilon must be in [0, 1)")

    # derived views
    def model_config(self) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.context_len, self.n_layers, self.d_model,
                           self.n_heads, self.ffn_mult, self.model_seed,
                           tuple(s for s in self.tap_sites.split(",") if s))

    def loss_config(self, **over) -> LossConfig:
        kw = dict(method=self.method, beta=self.beta, alpha=self.alpha,
                  gamma_margin=self.gamma_margin, lam=self.lam, epsilon=self.epsilon,
                  l1_coeff=self.l1_coeff, mask_stop_gradient=self.mask_stop_gradient,
                  zero_threshold=None if self.zero_threshold < 0 else self.zero_threshold)
        kw.update(over)
        return LossConfig(**kw)

    def vocab_spec(self) -> VocabSpec:
        first_neg = 3 + self.n_pos_cues
        return VocabSpec(self.vocab_size, tuple(range(3, first_neg)),
                         tuple(range(first_neg, first_neg + self.n_neg_cues)))

    def betas(self) -> list[float]:
        return [float(b) for b in self.beta_grid.split(",") if b.strip()]

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig(**d)


PAPER_PRESET = {
    # preference-optimization defaults reported for the 1B-scale runs
    "learning_rate": 5e-7,
    "mask_weight_decay": 0.01,
    "l1_coeff": 0.001,
    "beta": 0.1,
    "epochs": 3,
    "batch_size": 128,
    "alpha": 0.7,
    "lam": 50.0,
}


def _coerce(key: str, raw: str, typ) -> object:
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ.__name__})") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def field_types() -> dict:
    return {f.name: _TYPES[f.type if isinstance(f.type, str) else f.type.__name__]
            for f in fields(TrainConfig)}


def parse_pairs(lines, source: str = "<set>") -> dict:
    types = field_types()
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, val, types[key])
    return out


def load_config(path=None, overrides=(), base: dict | None = None) -> TrainConfig:
    values = dict(base or {})
    if path:
        values.update(parse_pairs(Path(path).read_text().splitlines(), str(path)))
    values.update(parse_pairs(list(overrides)))
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def write_config(cfg: TrainConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items()))
    return path


def render_schema() -> dict:
    keys = []
    for f in fields(TrainConfig):
        default = f.default if f.default is not MISSING else None
        keys.append({"key": f.name, "type": f.type if isinstance(f.type, str) else f.type.__name__,
                     "default": default, "help": f.metadata.get("help", "")})
    return {"format": "sparsepo-config-schema", "version": 1, "keys": keys}


def shipped_schema() -> dict:
    return json.loads(resources.files("sparsepo").joinpath("config_schema.json").read_text())


def help_text() -> str:
    lines = ["config keys (key = value; also --set key=value):"]
    for k in render_schema()["keys"]:
        lines.append(f"  {k['key']:<20} {k['type']:<6} default={k['default']!r}  {k['help']}")
    return "\n".join(lines)
