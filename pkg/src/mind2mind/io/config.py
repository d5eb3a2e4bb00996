"""Experiment configuration (JSON) with up-front validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from ..autoencoder import AutoencoderSpec
from ..gan import GanLossConfig, PriorSpec, TrainConfig
from ..nn import AUTOENCODER_BETAS, MlpSpec
from .datasets import DatasetSpec, synthetic_dim

METHODS = ("mind2mind", "vanilla", "finetune", "conditional")
BOUND_MODES = ("auto", "exact", "sliced", "none")


class ConfigError(ValueError):
    pass


def _train_to_dict(cfg: TrainConfig) -> dict:
    return {"lr": cfg.lr, "betas": list(cfg.betas), "batch_size": cfg.batch_size,
            "n_critic": cfg.n_critic, "epochs": cfg.epochs, "seed": cfg.seed,
            "prior": cfg.prior.to_dict(), "log_every": cfg.log_every}


def _train_from_dict(d: Mapping | None, default: TrainConfig) -> TrainConfig:
    if d is None:
        return default
    kw = dict(d)
    if "prior" in kw:
        kw["prior"] = PriorSpec.from_dict(kw["prior"])
    if "betas" in kw:
        kw["betas"] = tuple(kw["betas"])
    return replace(default, **kw)


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 2048
    n_projections: int = 128
    seed: int = 12345
    bound: str = "auto"
    monitor: bool = True

    def __post_init__(self):
        if self.bound not in BOUND_MODES:
            raise ConfigError(f"bound must be one of {BOUND_MODES}")
        if self.n_samples < 2 or self.n_projections < 1:
            raise ConfigError("n_samples >= 2 and n_projections >= 1 required")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one comparison run needs.

    ``n_labels`` counts trailing one-hot columns in the target data; only
    the ``conditional`` method uses them, the others drop them. The
    autoencoder is trained once on the source with ``ae_train.seed``;
    ``seeds`` vary the MindGAN and the baselines.
    """

    source: DatasetSpec
    target: DatasetSpec
    autoencoder: AutoencoderSpec
    mind_gen: MlpSpec
    mind_critic: MlpSpec
    loss: GanLossConfig = GanLossConfig()
    ae_train: TrainConfig = field(default_factory=lambda: TrainConfig(betas=AUTOENCODER_BETAS))
    mind_train: TrainConfig = field(default_factory=TrainConfig)
    baseline_train: TrainConfig = field(default_factory=TrainConfig)
    methods: tuple[str, ...] = ("mind2mind", "vanilla")
    seeds: tuple[int, ...] = (0,)
    n_labels: int = 0
    eval: EvalConfig = EvalConfig()
    out_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must not repeat")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must not repeat")
        if self.n_labels < 0:
            raise ConfigError("n_labels must be >= 0")
        latent = self.autoencoder.latent_dim
        z = self.mind_train.prior.dim
        cond = "conditional" in self.methods
        gen_in = self.mind_gen.input_width
        if gen_in != z and not (cond and gen_in == z + self.n_labels):
            raise ConfigError(f"mind generator input {gen_in} does not match prior dim {z}")
        if cond:
            if self.n_labels < 1:
                raise ConfigError("the conditional method needs n_labels >= 1")
            if gen_in != z + self.n_labels:
                raise ConfigError("conditional mind generator must take (z, label)")
            if self.mind_critic.input_width != latent + self.n_labels:
                raise ConfigError("conditional critic must take (latent, label)")
            if len(self.methods) > 1:
                raise ConfigError("conditional runs use their own architectures; run them alone")
        elif self.mind_critic.input_width != latent:
            raise ConfigError(f"mind critic input {self.mind_critic.input_width} != latent {latent}")
        if self.mind_gen.output_width != latent:
            raise ConfigError(f"mind generator output {self.mind_gen.output_width} != latent {latent}")
        if self.mind_critic.output_width != 1 or not self.mind_critic.is_critic_safe:
            raise ConfigError("mind critic must be scalar-valued without batch norm")
        if self.baseline_train.prior.dim != z:
            raise ConfigError("baselines must share the MindGAN prior dimension")
        data_dim = self.autoencoder.data_dim
        for name, spec in (("source", self.source), ("target", self.target)):
            d = synthetic_dim(spec)
            if d is None:
                continue
            want = data_dim + (self.n_labels if name == "target" else 0)
            if d != want:
                raise ConfigError(f"{name} has dimension {d}, expected {want}")

    def to_dict(self) -> dict:
        return {
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "autoencoder": {"encoder": self.autoencoder.encoder.to_dict(),
                            "decoder": self.autoencoder.decoder.to_dict(),
                            "loss": self.autoencoder.loss},
            "mind_gen": self.mind_gen.to_dict(),
            "mind_critic": self.mind_critic.to_dict(),
            "loss": {"lambda_gp": self.loss.lambda_gp, "eps_drift": self.loss.eps_drift},
            "ae_train": _train_to_dict(self.ae_train),
            "mind_train": _train_to_dict(self.mind_train),
            "baseline_train": _train_to_dict(self.baseline_train),
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "n_labels": self.n_labels,
            "eval": {"n_samples": self.eval.n_samples, "n_projections": self.eval.n_projections,
                     "seed": self.eval.seed, "bound": self.eval.bound,
                     "monitor": self.eval.monitor},
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        known = {"source", "target", "autoencoder", "mind_gen", "mind_critic", "loss", "ae_train",
                 "mind_train", "baseline_train", "methods", "seeds", "n_labels", "eval", "out_dir"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            ae = d["autoencoder"]
            if "encoder" in ae:
                ae_spec = AutoencoderSpec(MlpSpec.from_dict(ae["encoder"]),
                                          MlpSpec.from_dict(ae["decoder"]), ae.get("loss", "mse"))
            else:
                ae_spec = AutoencoderSpec.mlp(int(ae["data_dim"]), int(ae.get("latent_dim", 256)),
                                              tuple(ae.get("hidden", (128, 128))),
                                              bool(ae.get("decoder_batch_norm", False)),
                                              ae.get("loss", "mse"))
            return cls(
                source=DatasetSpec.from_dict(d["source"]),
                target=DatasetSpec.from_dict(d["target"]),
                autoencoder=ae_spec,
                mind_gen=MlpSpec.from_dict(d["mind_gen"]),
                mind_critic=MlpSpec.from_dict(d["mind_critic"]),
                loss=GanLossConfig(**d.get("loss", {})),
                ae_train=_train_from_dict(d.get("ae_train"), TrainConfig(betas=AUTOENCODER_BETAS)),
                mind_train=_train_from_dict(d.get("mind_train"), TrainConfig()),
                baseline_train=_train_from_dict(d.get("baseline_train"), TrainConfig()),
                methods=tuple(d.get("methods", ("mind2mind", "vanilla"))),
                seeds=tuple(d.get("seeds", (0,))),
                n_labels=int(d.get("n_labels", 0)),
                eval=EvalConfig(**d.get("eval", {})),
                out_dir=d.get("out_dir"),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    def with_overrides(self, **phase_kw) -> "ExperimentConfig":
        """Apply CLI-style overrides (lr, batch_size, epochs, n_critic) to the GAN phases."""
        kw = {k: v for k, v in phase_kw.items() if v is not None}
        if not kw:
            return self
        try:
            return replace(self, mind_train=replace(self.mind_train, **kw),
                           baseline_train=replace(self.baseline_train, **kw))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
