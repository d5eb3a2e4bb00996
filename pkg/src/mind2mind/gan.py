"""WGAN-GP losses and training loops (plain, conditional, fine-tuned)."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .nn import (
    GAN_BETAS,
    AdamState,
    MlpSpec,
    Network,
    adam_step,
    forward,
    param_bindings,
    param_leaves,
    predict,
    update_running_stats,
)
from .ot import EmpiricalMeasure

LOG_EVERY = 10


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite value at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


@dataclass(frozen=True)
class GanLossConfig:
    lambda_gp: float = 10.0
    eps_drift: float = 1e-2

    def __post_init__(self):
        if self.lambda_gp < 0 or self.eps_drift < 0:
            raise ValueError("loss coefficients must be non-negative")


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Latent prior: ``gaussian``, ``uniform-box`` on [low, high]^dim, or ``finite``."""

    dim: int
    kind: str = "uniform-box"
    atoms: np.ndarray | None = None
    weights: np.ndarray | None = None
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform-box", "finite"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("prior dimension must be positive")
        if self.kind == "finite":
            if self.atoms is None:
                raise ValueError("finite prior needs atoms")
            atoms = np.asarray(self.atoms, dtype=np.float64).reshape(-1, self.dim)
            w = (np.full(len(atoms), 1.0 / len(atoms)) if self.weights is None
                 else np.asarray(self.weights, dtype=np.float64))
            if abs(w.sum() - 1.0) > 1e-12 or (w < 0).any():
                raise ValueError("finite prior weights must be a probability vector")
            object.__setattr__(self, "atoms", atoms)
            object.__setattr__(self, "weights", w)
        elif self.kind == "uniform-box" and not self.low < self.high:
            raise ValueError("uniform box needs low < high")

    @property
    def compact(self) -> bool:
        return self.kind != "gaussian"

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.standard_normal((n, self.dim))
        if self.kind == "uniform-box":
            return rng.uniform(self.low, self.high, size=(n, self.dim))
        idx = rng.choice(len(self.atoms), size=n, p=self.weights)
        return self.atoms[idx]

    def measure(self) -> EmpiricalMeasure:
        if self.kind != "finite":
            raise ValueError("only finite priors have an exact measure")
        return EmpiricalMeasure(self.atoms, self.weights)

    def to_dict(self) -> dict:
        d = {"dim": self.dim, "kind": self.kind}
        if self.kind == "finite":
            d["atoms"] = self.atoms.tolist()
            d["weights"] = self.weights.tolist()
        if self.kind == "uniform-box":
            d["low"], d["high"] = self.low, self.high
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorSpec":
        return cls(int(d["dim"]), d.get("kind", "uniform-box"), d.get("atoms"),
                   d.get("weights"), d.get("low", -1.0), d.get("high", 1.0))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = GAN_BETAS
    batch_size: int = 128
    n_critic: int = 5
    epochs: int = 100
    seed: int = 0
    prior: PriorSpec = field(default_factory=lambda: PriorSpec(128))
    log_every: int = LOG_EVERY

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.betas[0], beta2=self.betas[1])


@dataclass
class HistoryRecord:
    step: int
    critic_loss: float | None = None
    gen_loss: float | None = None
    gp: float | None = None
    drift: float | None = None
    wall_clock_s: float | None = None
    metric: float | None = None


HISTORY_COLUMNS = tuple(HistoryRecord.__dataclass_fields__)


@dataclass
class TrainHistory:
    records: list[HistoryRecord] = field(default_factory=list)

    def log(self, record: HistoryRecord):
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("history steps must increase")
        self.records.append(record)

    def set_metric(self, step: int, metric: float, wall_clock_s: float):
        if self.records and self.records[-1].step == step:
            self.records[-1].metric = metric
        else:
            self.log(HistoryRecord(step, wall_clock_s=wall_clock_s, metric=metric))

    def metrics(self) -> list[tuple[int, float, float]]:
        """``(step, wall_clock_s, metric)`` for every record carrying a metric."""
        return [(r.step, r.wall_clock_s, r.metric) for r in self.records if r.metric is not None]

    def without_timing(self) -> "TrainHistory":
        return TrainHistory([replace(r, wall_clock_s=None) for r in self.records])

    def to_rows(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, TrainHistory) and self.to_rows() == other.to_rows()


# ----------------------------------------------------------------- losses

def _check_chain(gen: Network, critic: Network, z_width: int | None = None):
    if z_width is not None and gen.spec.input_width != z_width:
        raise ValueError(f"generator expects {gen.spec.input_width} inputs, got {z_width}")
    if gen.spec.output_width != critic.spec.input_width:
        raise ValueError("generator output width does not match critic input width")
    if critic.spec.output_width != 1:
        raise ValueError("critic must output a scalar per row")
    if not critic.spec.is_critic_safe:
        raise ValueError("critics may not use batch normalisation")


def critic_out(critic: Network, leaves, x: ad.Node) -> ad.Node:
    return forward(critic, x, "eval", leaves=leaves).output


def gradient_penalty_expr(critic: Network, leaves, real: ad.Node, fake: ad.Node,
                          alpha: ad.Node) -> ad.Node:
    """Mean of ``(|grad_x critic(x_hat)| - 1)^2`` over row-wise interpolates."""
    x_hat = ad.lerp(alpha, real, fake)
    (g,) = ad.grad_nodes(ad.sum(critic_out(critic, leaves, x_hat)), [x_hat])
    return ad.mean((ad.row_norm(g) - 1.0) ** 2)


def critic_loss_terms(critic: Network, leaves, real: ad.Node, fake: ad.Node,
                      alpha: ad.Node, cfg: GanLossConfig) -> dict[str, ad.Node]:
    c_real = critic_out(critic, leaves, real)
    c_fake = critic_out(critic, leaves, fake)
    gp = gradient_penalty_expr(critic, leaves, real, fake, alpha)
    drift = ad.mean(c_real * c_real)
    loss = ad.mean(c_fake) - ad.mean(c_real)
    if cfg.lambda_gp:
        loss = loss + cfg.lambda_gp * gp
    if cfg.eps_drift:
        loss = loss + cfg.eps_drift * drift
    return {"loss": loss, "gp": gp, "drift": drift}


def _alpha(seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed).random((n, 1))


def generator_loss(critic: Network, gen: Network, z_batch: np.ndarray) -> ad.ExprGraph:
    """Graph with output ``loss`` = mean critic(gen(z)); the generator descends its negative."""
    z_batch = np.asarray(z_batch, dtype=np.float64)
    _check_chain(gen, critic, z_batch.shape[1])
    cl = param_leaves(critic, "critic")
    z = ad.leaf("z")
    fake = forward(gen, z, "eval", prefix="gen").output
    loss = ad.mean(critic_out(critic, cl, fake))
    defaults = {**param_bindings(critic, "critic"), **param_bindings(gen, "gen"), "z": z_batch}
    return ad.ExprGraph({"loss": loss}, defaults)


def gradient_penalty(critic: Network, real_batch: np.ndarray, fake_batch: np.ndarray,
                     seed: int = 0) -> ad.ExprGraph:
    """Graph with output ``gp``; differentiable in the critic parameters."""
    real_batch = np.asarray(real_batch, dtype=np.float64)
    fake_batch = np.asarray(fake_batch, dtype=np.float64)
    if real_batch.shape != fake_batch.shape:
        raise ValueError(f"batch shapes differ: {real_batch.shape} vs {fake_batch.shape}")
    cl = param_leaves(critic, "critic")
    gp = gradient_penalty_expr(critic, cl, ad.leaf("real"), ad.leaf("fake"), ad.leaf("alpha"))
    defaults = {**param_bindings(critic, "critic"), "real": real_batch, "fake": fake_batch,
                "alpha": _alpha(seed, real_batch.shape[0])}
    return ad.ExprGraph({"gp": gp}, defaults)


def critic_loss(critic: Network, gen: Network, real_batch: np.ndarray, z_batch: np.ndarray,
                cfg: GanLossConfig = GanLossConfig(), seed: int = 0) -> ad.ExprGraph:
    """Graph with outputs ``loss``, ``gp`` and ``drift``."""
    real_batch = np.asarray(real_batch, dtype=np.float64)
    z_batch = np.asarray(z_batch, dtype=np.float64)
    _check_chain(gen, critic, z_batch.shape[1])
    if real_batch.shape[0] != z_batch.shape[0]:
        raise ValueError("real and prior batches must have the same size")
    if real_batch.shape[1] != critic.spec.input_width:
        raise ValueError("real batch width does not match critic input")
    cl = param_leaves(critic, "critic")
    fake = forward(gen, ad.leaf("z"), "eval", prefix="gen").output
    terms = critic_loss_terms(critic, cl, ad.leaf("real"), fake, ad.leaf("alpha"), cfg)
    defaults = {**param_bindings(critic, "critic"), **param_bindings(gen, "gen"),
                "real": real_batch, "z": z_batch, "alpha": _alpha(seed, real_batch.shape[0])}
    return ad.ExprGraph(terms, defaults)


# ------------------------------------------------------------- training

class _Programs:
    """Compiled critic and generator update graphs."""

    def __init__(self, gen: Network, critic: Network, cfg: GanLossConfig,
                 n_labels: int = 0, z_dim: int | None = None):
        self.n_labels = n_labels
        gl_c = param_leaves(gen, "gen", trainable=False)
        cl_c = param_leaves(critic, "critic")
        gl_g = param_leaves(gen, "gen")
        cl_g = param_leaves(critic, "critic", trainable=False)

        real, z, alpha = ad.leaf("real"), ad.leaf("z"), ad.leaf("alpha")
        label = ad.leaf("label") if n_labels else None

        def generate(gen_leaves):
            x = z
            if n_labels:
                x = ad.concat_cols(z, label, (z_dim, n_labels))
            res = forward(gen, x, "train", leaves=gen_leaves)
            out = res.output
            if n_labels:
                out = ad.concat_cols(out, label, (gen.spec.output_width, n_labels))
            return out, res.batch_stats

        fake, _ = generate(gl_c)
        terms = critic_loss_terms(critic, cl_c, real, fake, alpha, cfg)
        self.critic_keys = list(critic.params)
        grads = ad.grad_nodes(terms["loss"], [cl_c[k] for k in self.critic_keys])
        self.critic_graph = ad.ExprGraph({**terms, **{f"d/{k}": g for k, g in zip(self.critic_keys, grads)}})

        fake_g, stats = generate(gl_g)
        l_g = ad.mean(critic_out(critic, cl_g, fake_g))
        self.gen_keys = list(gen.params)
        grads = ad.grad_nodes(-l_g, [gl_g[k] for k in self.gen_keys])
        self.stat_keys = list(stats)
        self.gen_graph = ad.ExprGraph({"l_g": l_g, **{f"d/{k}": g for k, g in zip(self.gen_keys, grads)},
                                       **{f"s/{k}": s for k, s in stats.items()}})

    def critic_step(self, gen, critic, batch):
        out = ad.evaluate(self.critic_graph, {**param_bindings(gen, "gen"),
                                              **param_bindings(critic, "critic"), **batch})
        return out, {k: out[f"d/{k}"] for k in self.critic_keys}

    def gen_step(self, gen, critic, batch):
        out = ad.evaluate(self.gen_graph, {**param_bindings(gen, "gen"),
                                           **param_bindings(critic, "critic"), **batch})
        return (out, {k: out[f"d/{k}"] for k in self.gen_keys},
                {k: out[f"s/{k}"] for k in self.stat_keys})


def _batches(rng: np.random.Generator, data: EmpiricalMeasure, batch_size: int) -> list[np.ndarray]:
    n = data.n
    if np.all(data.weights == data.weights[0]):
        perm = rng.permutation(n)
        if n <= batch_size:
            return [perm]
        return [perm[k:k + batch_size] for k in range(0, n - batch_size + 1, batch_size)]
    n_batches = max(1, n // batch_size)
    size = min(batch_size, n) if n >= 2 else batch_size
    return [rng.choice(n, size=size, p=data.weights) for _ in range(n_batches)]


def _label_sampler(labels: np.ndarray, weights: np.ndarray):
    classes, inverse = np.unique(labels, axis=0, return_inverse=True)
    probs = np.bincount(inverse.reshape(-1), weights=weights, minlength=len(classes))

    def sample(rng, n):
        return classes[rng.choice(len(classes), size=n, p=probs / probs.sum())]
    return sample


def _train(real: EmpiricalMeasure, gen: Network, critic: Network, loss_cfg: GanLossConfig,
           cfg: TrainConfig, n_labels: int, monitor: Callable[[Network], float] | None):
    if real.n < 1:
        raise ValueError("empty dataset")
    history = TrainHistory()
    if cfg.epochs == 0:
        return gen, critic, history
    z_dim = cfg.prior.dim
    programs = _Programs(gen, critic, loss_cfg, n_labels, z_dim)
    rng = np.random.default_rng(cfg.seed)
    label_sample = _label_sampler(real.atoms[:, -n_labels:], real.weights) if n_labels else None
    adam_c = adam_g = cfg.adam()
    step = 0
    clock = 0.0
    last = {}

    def prior_batch(n):
        b = {"z": cfg.prior.sample(rng, n)}
        if n_labels:
            b["label"] = label_sample(rng, n)
        return b

    try:
        for _epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            batches = _batches(rng, real, cfg.batch_size)
            gen_steps = max(1, len(batches) // cfg.n_critic)
            for s in range(gen_steps):
                for c in range(cfg.n_critic):
                    idx = batches[(s * cfg.n_critic + c) % len(batches)]
                    batch = {"real": real.atoms[idx], **prior_batch(len(idx)),
                             "alpha": rng.random((len(idx), 1))}
                    out, grads = programs.critic_step(gen, critic, batch)
                    params, adam_c = adam_step(adam_c, critic.params, grads)
                    critic = critic.with_params(params)
                    last.update(critic_loss=out["loss"], gp=out["gp"], drift=out["drift"])
                n = cfg.batch_size if real.n >= cfg.batch_size else len(batches[0])
                out, grads, stats = programs.gen_step(gen, critic, prior_batch(max(n, 2)))
                params, adam_g = adam_step(adam_g, gen.params, grads)
                gen = update_running_stats(gen.with_params(params), stats, max(n, 2))
                step += 1
                if step % cfg.log_every == 0:
                    history.log(HistoryRecord(
                        step, float(last["critic_loss"]), float(out["l_g"]), float(last["gp"]),
                        float(last["drift"]), clock + time.perf_counter() - t0))
            clock += time.perf_counter() - t0
            if monitor is not None:
                history.set_metric(step, float(monitor(gen)), clock)
    except (ad.NonFiniteError, FloatingPointError) as exc:
        raise TrainingDiverged(step, str(exc)) from exc
    return gen, critic, history


def train_wgan(real: EmpiricalMeasure, gen: Network, critic: Network,
               loss_cfg: GanLossConfig = GanLossConfig(), train_cfg: TrainConfig = TrainConfig(),
               monitor: Callable[[Network], float] | None = None):
    """WGAN-GP training; returns ``(gen, critic, history)``.

    Every generator step is preceded by ``n_critic`` critic steps on
    consecutive minibatches of an epoch-wise shuffle. ``monitor`` is called
    with the generator after each epoch; its time is not counted in
    ``wall_clock_s``.
    """
    _check_chain(gen, critic, train_cfg.prior.dim)
    if real.dim != critic.spec.input_width:
        raise ValueError("data dimension does not match critic input width")
    return _train(real, gen, critic, loss_cfg, train_cfg, 0, monitor)


def check_one_hot(block: np.ndarray):
    ok = np.isin(block, (0.0, 1.0)).all() and np.all(block.sum(axis=1) == 1.0)
    if not ok:
        raise ValueError("label block is not one-hot")


def train_conditional(real_labeled: EmpiricalMeasure, gen: Network, critic: Network,
                      loss_cfg: GanLossConfig = GanLossConfig(),
                      train_cfg: TrainConfig = TrainConfig(),
                      monitor: Callable[[Network], float] | None = None):
    """Conditional WGAN-GP on atoms ``(m, one-hot label)``.

    ``gen`` maps ``(z, l)`` to ``m``; the label is re-attached to its output,
    so generated atoms carry their input label unchanged.
    """
    n_labels = gen.spec.input_width - train_cfg.prior.dim
    if n_labels < 1:
        raise ValueError("generator input must be prior dim + label width")
    if gen.spec.output_width + n_labels != critic.spec.input_width:
        raise ValueError("critic must consume (m, label)")
    if real_labeled.dim != critic.spec.input_width:
        raise ValueError("data dimension does not match critic input width")
    if critic.spec.output_width != 1 or not critic.spec.is_critic_safe:
        raise ValueError("critic must be scalar-valued without batch norm")
    check_one_hot(real_labeled.atoms[:, -n_labels:])
    return _train(real_labeled, gen, critic, loss_cfg, train_cfg, n_labels, monitor)


def conditional_generate(gen: Network, z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``(gen(z, l), l)`` in eval mode; the label block is copied verbatim."""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    m = predict(gen, np.concatenate([z, labels], axis=1))
    return np.concatenate([m, labels], axis=1)


def finetune_init(target_arch: MlpSpec, source_net: Network) -> Network:
    """Copy of ``source_net`` to start training on new data."""
    if target_arch != source_net.spec:
        raise ValueError("fine-tuning needs identical architectures")
    return Network(source_net.spec, dict(source_net.params), dict(source_net.state))
