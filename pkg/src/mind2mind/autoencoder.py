"""The frozen (encoder, decoder) pair that Mind2Mind transfers."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .gan import HistoryRecord, TrainConfig, TrainHistory, TrainingDiverged
from .nn import (
    AUTOENCODER_BETAS,
    MlpSpec,
    Network,
    adam_step,
    forward,
    init_mlp,
    param_bindings,
    param_leaves,
    update_running_stats,
)
from .ot import EmpiricalMeasure, pushforward


# reconstruction objectives; only MSE is implemented, the field keeps configs explicit
AE_LOSSES = ("mse",)


@dataclass(frozen=True)
class AutoencoderSpec:
    encoder: MlpSpec
    decoder: MlpSpec
    loss: str = "mse"

    def __post_init__(self):
        if self.loss not in AE_LOSSES:
            raise ValueError(f"autoencoder loss must be one of {AE_LOSSES}, got {self.loss!r}")
        if self.encoder.output_width != self.decoder.input_width:
            raise ValueError("encoder output must match decoder input")
        if self.encoder.input_width != self.decoder.output_width:
            raise ValueError("decoder must map back to the data dimension")
        if any(self.encoder.batch_norm):
            raise ValueError("the encoder is reused inside critics and may not use batch norm")

    @property
    def latent_dim(self) -> int:
        return self.encoder.output_width

    @property
    def data_dim(self) -> int:
        return self.encoder.input_width

    @classmethod
    def mlp(cls, data_dim: int, latent_dim: int = 256, hidden=(128, 128),
            decoder_batch_norm: bool = False, loss: str = "mse") -> "AutoencoderSpec":
        """Relu hidden layers with tanh outputs on both sides."""
        enc = MlpSpec.dense([data_dim, *hidden, latent_dim], "relu", "tanh")
        dec = MlpSpec.dense([latent_dim, *reversed(hidden), data_dim], "relu", "tanh",
                            batch_norm=decoder_batch_norm)
        return cls(enc, dec, loss)


def autoencoder_config(**kw) -> TrainConfig:
    """TrainConfig with the autoencoder Adam betas as default."""
    kw.setdefault("betas", AUTOENCODER_BETAS)
    return TrainConfig(**kw)


def train_autoencoder(data: EmpiricalMeasure, spec: AutoencoderSpec,
                      cfg: TrainConfig | None = None,
                      init: tuple[Network, Network] | None = None):
    """Minimise mean squared reconstruction error; returns ``(encoder, decoder, history)``.

    History records carry the reconstruction loss in ``gen_loss``.
    """
    cfg = cfg or autoencoder_config()
    if data.dim != spec.data_dim:
        raise ValueError("data dimension does not match the autoencoder")
    if np.abs(data.atoms).max() > 1.0:
        raise ValueError("autoencoder data must lie in [-1, 1]")
    if init is None:
        enc, dec = init_mlp(spec.encoder, cfg.seed), init_mlp(spec.decoder, cfg.seed + 1)
    else:
        enc, dec = init
    history = TrainHistory()
    if cfg.epochs == 0:
        return enc, dec, history

    el, dl = param_leaves(enc, "enc"), param_leaves(dec, "dec")
    x = ad.leaf("x")
    code = forward(enc, x, "train", leaves=el).output
    dec_res = forward(dec, code, "train", leaves=dl)
    diff = dec_res.output - x
    loss = ad.mean(diff * diff)
    keys = [f"enc/{k}" for k in enc.params] + [f"dec/{k}" for k in dec.params]
    leaves = [el[k] for k in enc.params] + [dl[k] for k in dec.params]
    grads = ad.grad_nodes(loss, leaves)
    graph = ad.ExprGraph({"loss": loss, **{f"d/{k}": g for k, g in zip(keys, grads)},
                          **{f"s/{k}": s for k, s in dec_res.batch_stats.items()}})

    rng = np.random.default_rng(cfg.seed)
    adam = cfg.adam()
    step = 0
    clock = 0.0
    try:
        for _ in range(cfg.epochs):
            t0 = time.perf_counter()
            if data.n <= cfg.batch_size:
                batches = [rng.permutation(data.n)]
            else:
                perm = rng.permutation(data.n)
                batches = [perm[k:k + cfg.batch_size]
                           for k in range(0, data.n - cfg.batch_size + 1, cfg.batch_size)]
            for idx in batches:
                out = ad.evaluate(graph, {**param_bindings(enc, "enc"), **param_bindings(dec, "dec"),
                                          "x": data.atoms[idx]})
                params = {**{f"enc/{k}": v for k, v in enc.params.items()},
                          **{f"dec/{k}": v for k, v in dec.params.items()}}
                new, adam = adam_step(adam, params, {k: out[f"d/{k}"] for k in keys})
                enc = enc.with_params({k[4:]: v for k, v in new.items() if k.startswith("enc/")})
                dec = dec.with_params({k[4:]: v for k, v in new.items() if k.startswith("dec/")})
                stats = {k[2:]: v for k, v in out.items() if k.startswith("s/")}
                dec = update_running_stats(dec, stats, len(idx))
                step += 1
                if step % cfg.log_every == 0:
                    history.log(HistoryRecord(step, gen_loss=float(out["loss"]),
                                              wall_clock_s=clock + time.perf_counter() - t0))
            clock += time.perf_counter() - t0
    except (ad.NonFiniteError, FloatingPointError) as exc:
        raise TrainingDiverged(step, str(exc)) from exc
    return enc, dec, history


def reconstruction_error(encoder: Network, decoder: Network, data: EmpiricalMeasure) -> float:
    """Weighted mean squared reconstruction error (eval mode)."""
    rec = ae_pushforward(encoder, decoder, data).atoms
    return float(data.weights @ np.mean((rec - data.atoms) ** 2, axis=1))


def encode_dataset(encoder: Network, data: EmpiricalMeasure) -> EmpiricalMeasure:
    if data.dim != encoder.spec.input_width:
        raise ValueError(f"encoder expects dimension {encoder.spec.input_width}, data has {data.dim}")
    return pushforward(data, encoder)


def ae_pushforward(encoder: Network, decoder: Network, data: EmpiricalMeasure) -> EmpiricalMeasure:
    """Reconstruction measure ``(decoder o encoder)# data``."""
    if encoder.spec.output_width != decoder.spec.input_width:
        raise ValueError("encoder and decoder do not chain")
    return pushforward(encode_dataset(encoder, data), decoder)
