"""Mind2Mind transfer end to end, plus the exact error-bound certificate."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from .autoencoder import encode_dataset, train_autoencoder
from .gan import (
    GanLossConfig,
    PriorSpec,
    TrainConfig,
    TrainHistory,
    conditional_generate,
    finetune_init,
    train_conditional,
    train_wgan,
)
from .io.config import ExperimentConfig
from .io.datasets import load_dataset
from .io.report import ReportBundle, RunResult
from .nn import MlpSpec, Network, compose, identity_network, init_mlp, predict
from .ot import (
    MAX_EXACT_PAIRS,
    EmpiricalMeasure,
    exact_w1,
    fit_gaussian,
    frechet_gaussian_distance,
    lipschitz_lower,
    lipschitz_upper,
    pushforward,
    sliced_w1,
)

SLICED_SAMPLES = 2048
HOLDS_TOL = 1e-9
LOWER_SAMPLES = 1024

_STREAMS = {"gen": 1, "critic": 2, "train": 3, "pretrain": 4, "eval": 5}


def derive_seed(seed: int, stream: str) -> int:
    """Independent child seed for one named random stream of a run."""
    return int(np.random.SeedSequence([seed, _STREAMS[stream]]).generate_state(1)[0])


def init_pair(gen_spec: MlpSpec, critic_spec: MlpSpec, seed: int) -> tuple[Network, Network]:
    return (init_mlp(gen_spec, derive_seed(seed, "gen")),
            init_mlp(critic_spec, derive_seed(seed, "critic")))


@dataclass(frozen=True)
class ComposedGenerator:
    mind: Network
    decoder: Network

    def __post_init__(self):
        if self.mind.spec.output_width != self.decoder.spec.input_width:
            raise ValueError("mind output width must equal decoder input width")

    @property
    def input_width(self) -> int:
        return self.mind.spec.input_width

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return predict(self.decoder, predict(self.mind, z))

    def network(self) -> Network:
        """The composition as one network (same weights, nothing retrained)."""
        return compose(self.mind, self.decoder)


def mind2mind(encoder: Network, decoder: Network, target: EmpiricalMeasure,
              mind_gen_spec: MlpSpec, mind_critic_spec: MlpSpec,
              loss_cfg: GanLossConfig = GanLossConfig(), train_cfg: TrainConfig = TrainConfig(),
              monitor: Callable[[ComposedGenerator], float] | None = None,
              init: tuple[Network, Network] | None = None):
    """Train a MindGAN on the encoded target and return ``(decoder o mind, history)``.

    The encoder and decoder are only evaluated. ``wall_clock_s`` in the
    history includes the one-off encoding of the target. Without ``init``
    the MindGAN starts from :func:`init_pair` with ``train_cfg.seed``.
    """
    composed, _critic, history = _mind2mind(encoder, decoder, target, mind_gen_spec,
                                            mind_critic_spec, loss_cfg, train_cfg, monitor, init)
    return composed, history


def _mind2mind(encoder, decoder, target, mind_gen_spec, mind_critic_spec, loss_cfg, train_cfg,
               monitor, init):
    if encoder.spec.output_width != mind_critic_spec.input_width:
        raise ValueError("mind critic must consume the encoder's latent codes")
    if mind_gen_spec.output_width != decoder.spec.input_width:
        raise ValueError("mind generator must produce decoder inputs")
    t0 = time.perf_counter()
    latent = encode_dataset(encoder, target)
    encode_s = time.perf_counter() - t0
    gen, critic = init if init is not None else init_pair(mind_gen_spec, mind_critic_spec,
                                                          train_cfg.seed)
    wrapped = None if monitor is None else (lambda g: monitor(ComposedGenerator(g, decoder)))
    gen, critic, history = train_wgan(latent, gen, critic, loss_cfg, train_cfg, wrapped)
    for r in history.records:
        if r.wall_clock_s is not None:
            r.wall_clock_s += encode_s
    return ComposedGenerator(gen, decoder), critic, history


def sample(gen: ComposedGenerator | Network, prior: PriorSpec, n: int, seed: int = 0) -> EmpiricalMeasure:
    """``n`` equal-weight draws from ``gen # prior``.

    ``n == 0`` with a finite prior returns the exact pushforward of the
    whole prior (atoms and weights) instead of samples.
    """
    f = gen if isinstance(gen, ComposedGenerator) else (lambda z: predict(gen, z))
    if n == 0:
        if prior.kind != "finite":
            raise ValueError("exact sampling (n=0) needs a finite prior")
        return pushforward(prior.measure(), f)
    if n < 0:
        raise ValueError("n must be >= 1 (or 0 for the exact finite pushforward)")
    z = prior.sample(np.random.default_rng(seed), n)
    return EmpiricalMeasure.uniform(f(z))


# ---------------------------------------------------------------- bounds

@dataclass(frozen=True)
class BoundReport:
    """``er_conv <= a * er_shift + er_ae + b * er_mind`` with every term filled in."""

    er_conv: float
    er_shift: float
    er_ae: float
    er_mind: float
    a: float
    b: float
    rhs: float
    slack: float
    holds: bool
    methods: dict
    certified: bool
    # sampled witnesses a_lower <= a, b_lower <= b; None when all atoms coincide
    lower: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "BoundReport":
        return cls(**d)


def _report(er_conv, er_shift, er_ae, er_mind, a, b, method: str, lower=None) -> BoundReport:
    rhs = a * er_shift + er_ae + b * er_mind
    slack = rhs - er_conv
    tags = dict.fromkeys(("er_conv", "er_shift", "er_ae", "er_mind"), method)
    return BoundReport(float(er_conv), float(er_shift), float(er_ae), float(er_mind), float(a),
                       float(b), float(rhs), float(slack), bool(slack >= -HOLDS_TOL), tags,
                       method == "exact", lower)


def _constants(encoder: Network, decoder: Network) -> tuple[float, float]:
    # exact SVD: power iteration approaches from below and could undershoot
    b = lipschitz_upper(decoder, method="svd")
    a = 1.0 + lipschitz_upper([encoder, decoder], method="svd")
    return a, b


def _lower(f, *parts: EmpiricalMeasure) -> float | None:
    atoms = np.concatenate([m.atoms for m in parts])
    if len(atoms) > LOWER_SAMPLES:
        atoms = atoms[np.linspace(0, len(atoms) - 1, LOWER_SAMPLES).astype(np.int64)]
    try:
        return lipschitz_lower(f, EmpiricalMeasure.uniform(atoms))
    except ValueError:
        return None


def _witnesses(encoder, decoder, source, target, codes, mind_z) -> dict:
    """How tight the spectral certificate is on the points the bound actually uses."""
    ae = _lower([encoder, decoder], source, target)
    return {"a_lower": None if ae is None else 1.0 + ae, "b_lower": _lower(decoder, codes, mind_z)}


def _draw(measure: EmpiricalMeasure, n: int, rng: np.random.Generator) -> EmpiricalMeasure:
    if measure.n <= n:
        return measure
    idx = rng.choice(measure.n, size=n, p=measure.weights)
    return EmpiricalMeasure.uniform(measure.atoms[idx])


def _prior_measure(prior: PriorSpec, mode: str, rng) -> EmpiricalMeasure:
    if mode == "exact":
        if prior.kind != "finite":
            raise ValueError("exact verification needs a finite prior; use mode='sliced'")
        return prior.measure()
    if prior.kind == "finite":
        return _draw(prior.measure(), SLICED_SAMPLES, rng)
    return EmpiricalMeasure.uniform(prior.sample(rng, SLICED_SAMPLES))


def _w(mode: str, seed: int):
    if mode == "exact":
        def dist(mu, nu):
            if mu.n * nu.n > MAX_EXACT_PAIRS:
                raise ValueError(f"{mu.n}x{nu.n} is too large for exact verification")
            return exact_w1(mu, nu)[0]
        return dist
    return lambda mu, nu: 0.0 if mu.same_as(nu) else sliced_w1(mu, nu, seed=seed)


def verify_bound(encoder: Network, decoder: Network, source: EmpiricalMeasure,
                 target: EmpiricalMeasure, mind: Network, prior: PriorSpec,
                 mode: str = "exact", seed: int = 0) -> BoundReport:
    """Every term of the transfer error bound, with ``a = 1 + Lip(dec o enc)``
    and ``b = Lip(dec)`` from layer spectral norms.

    ``mode="exact"`` solves each W1 term exactly, so ``holds`` is a
    certificate. ``mode="sliced"`` uses 2048-point draws and sliced W1; the
    report is then marked ``certified=False``.
    """
    if mode not in ("exact", "sliced"):
        raise ValueError("mode must be 'exact' or 'sliced'")
    if mind.spec.input_width != prior.dim:
        raise ValueError("mind input width must equal prior dimension")
    if mind.spec.output_width != decoder.spec.input_width:
        raise ValueError("mind output width must equal decoder input width")
    rng = np.random.default_rng(seed)
    if mode == "sliced":
        same = source.same_as(target)
        source = _draw(source, SLICED_SAMPLES, rng)
        target = source if same else _draw(target, SLICED_SAMPLES, rng)
    z = _prior_measure(prior, mode, rng)
    w = _w(mode, seed)
    a, b = _constants(encoder, decoder)
    mind_z = pushforward(z, mind)
    er_conv = w(target, pushforward(mind_z, decoder))
    er_shift = w(source, target)
    er_ae = w(pushforward(pushforward(source, encoder), decoder), source)
    codes = pushforward(target, encoder)
    er_mind = w(codes, mind_z)
    lower = _witnesses(encoder, decoder, source, target, codes, mind_z)
    return _report(er_conv, er_shift, er_ae, er_mind, a, b, mode, lower)


def wae_bound(encoder: Network, decoder: Network, data: EmpiricalMeasure, prior: PriorSpec,
              mode: str = "exact", seed: int = 0) -> BoundReport:
    """Autoencoder special case: ``W(data, dec # prior) <= er_ae + b * W(enc # data, prior)``."""
    if mode not in ("exact", "sliced"):
        raise ValueError("mode must be 'exact' or 'sliced'")
    if prior.dim != decoder.spec.input_width:
        raise ValueError("prior dimension must equal decoder input width")
    rng = np.random.default_rng(seed)
    if mode == "sliced":
        data = _draw(data, SLICED_SAMPLES, rng)
    z = _prior_measure(prior, mode, rng)
    w = _w(mode, seed)
    a, b = _constants(encoder, decoder)
    codes = pushforward(data, encoder)
    er_conv = w(data, pushforward(z, decoder))
    er_ae = w(pushforward(codes, decoder), data)
    er_mind = w(codes, z)
    lower = _witnesses(encoder, decoder, data, data, codes, z)
    return _report(er_conv, 0.0, er_ae, er_mind, a, b, mode, lower)


# ------------------------------------------------------------ experiments

@dataclass(frozen=True)
class Evaluator:
    """Fixed target draw and metric settings shared by every run of an experiment."""

    target: EmpiricalMeasure
    target_latent: EmpiricalMeasure
    encoder: Network
    n_samples: int
    n_projections: int
    seed: int

    @classmethod
    def build(cls, config: ExperimentConfig, encoder: Network, target: EmpiricalMeasure):
        ev = config.eval
        t = _draw(target, ev.n_samples, np.random.default_rng(ev.seed))
        return cls(t, encode_dataset(encoder, t), encoder, ev.n_samples, ev.n_projections, ev.seed)

    def sliced(self, fake: EmpiricalMeasure) -> float:
        return sliced_w1(self.target, fake, self.n_projections, self.seed)

    def metrics(self, fake: EmpiricalMeasure) -> dict[str, float]:
        fake_latent = encode_dataset(self.encoder, fake)
        return {
            "sliced_w1": self.sliced(fake),
            "frechet": frechet_gaussian_distance(fit_gaussian(self.target), fit_gaussian(fake)),
            "sliced_w1_latent": sliced_w1(self.target_latent, fake_latent, self.n_projections,
                                          self.seed),
            "frechet_latent": frechet_gaussian_distance(fit_gaussian(self.target_latent),
                                                        fit_gaussian(fake_latent)),
        }


@dataclass(frozen=True)
class Datasets:
    source: EmpiricalMeasure
    target: EmpiricalMeasure        # label columns removed
    target_labeled: EmpiricalMeasure

    @classmethod
    def load(cls, config: ExperimentConfig) -> "Datasets":
        source = load_dataset(config.source)
        full = load_dataset(config.target)
        k = config.n_labels
        target = full if k == 0 else EmpiricalMeasure(full.atoms[:, :-k], full.weights)
        return cls(source, target, full)


def fit_autoencoder(config: ExperimentConfig, data: Datasets):
    return train_autoencoder(data.source, config.autoencoder, config.ae_train)


def _sampler(f: Callable[[np.ndarray], np.ndarray], prior: PriorSpec, seed: int):
    def draw(n: int) -> EmpiricalMeasure:
        return EmpiricalMeasure.uniform(f(prior.sample(np.random.default_rng(seed), n)))
    return draw


def _net_fn(net: Network):
    return lambda z: predict(net, z)


def run_method(config: ExperimentConfig, method: str, seed: int, encoder: Network,
               decoder: Network, data: Datasets, evaluator: Evaluator | None = None):
    """One (method, seed) run; returns ``(RunResult, trained networks by name)``.

    Seeds for initialisation, minibatching and evaluation are derived from
    ``seed`` so that every entry point reproduces the same run.
    """
    ev = evaluator or Evaluator.build(config, encoder, data.target)
    prior = config.mind_train.prior
    base = config.mind_train if method in ("mind2mind", "conditional") else config.baseline_train
    train_cfg = replace(base, seed=derive_seed(seed, "train"))
    draw_seed = derive_seed(seed, "eval")

    def monitor(to_fn):
        if not config.eval.monitor:
            return None
        return lambda net: ev.sliced(_sampler(to_fn(net), prior, draw_seed)(ev.n_samples))

    timing = {}
    bound = None
    if method == "mind2mind":
        t0 = time.perf_counter()
        composed, critic, hist = _mind2mind(
            encoder, decoder, data.target, config.mind_gen, config.mind_critic, config.loss,
            train_cfg, monitor(lambda g: g), init_pair(config.mind_gen, config.mind_critic, seed))
        timing["train_s"] = time.perf_counter() - t0
        gen = composed.mind
        fake = _sampler(ComposedGenerator(gen, decoder), prior, draw_seed)(ev.n_samples)
        bound = _bound(config, encoder, decoder, data, gen, prior, seed)
        gap = critic_gap(critic, ev.target_latent, _sampler(_net_fn(gen), prior, draw_seed)(ev.n_samples))
        nets = {"mind_gen": gen, "mind_critic": critic}
    elif method in ("vanilla", "finetune"):
        gen_spec = config.mind_gen.then(config.autoencoder.decoder)
        critic_spec = config.autoencoder.encoder.then(config.mind_critic)
        gen, critic = init_pair(gen_spec, critic_spec, seed)
        if method == "finetune":
            pre_cfg = replace(train_cfg, seed=derive_seed(seed, "pretrain"))
            t0 = time.perf_counter()
            gen, critic, _ = train_wgan(data.source, gen, critic, config.loss, pre_cfg)
            timing["pretrain_s"] = time.perf_counter() - t0
            gen, critic = finetune_init(gen_spec, gen), finetune_init(critic_spec, critic)
        t0 = time.perf_counter()
        gen, critic, hist = train_wgan(data.target, gen, critic, config.loss, train_cfg,
                                       monitor(_net_fn))
        timing["train_s"] = time.perf_counter() - t0
        fake = _sampler(_net_fn(gen), prior, draw_seed)(ev.n_samples)
        gap = critic_gap(critic, ev.target, fake)
        nets = {"generator": gen, "critic": critic}
    elif method == "conditional":
        k = config.n_labels
        codes = predict(encoder, data.target.atoms)
        latent = EmpiricalMeasure(np.concatenate([codes, data.target_labeled.atoms[:, -k:]], axis=1),
                                  data.target.weights)
        gen, critic = init_pair(config.mind_gen, config.mind_critic, seed)
        t0 = time.perf_counter()
        gen, critic, hist = train_conditional(latent, gen, critic, config.loss, train_cfg)
        timing["train_s"] = time.perf_counter() - t0
        rng = np.random.default_rng(draw_seed)
        z = prior.sample(rng, ev.n_samples)
        classes = np.unique(data.target_labeled.atoms[:, -k:], axis=0)
        labels = classes[rng.integers(len(classes), size=ev.n_samples)]
        m = conditional_generate(gen, z, labels)[:, :-k]
        fake = EmpiricalMeasure.uniform(predict(decoder, m))
        gap = None
        nets = {"mind_gen": gen, "mind_critic": critic}
    else:
        raise ValueError(f"unknown method {method!r}")
    metrics = ev.metrics(fake)
    if gap is not None:
        metrics["critic_gap"] = gap
    return RunResult(method, seed, hist, metrics, bound, timing), nets


def critic_gap(critic: Network, real: EmpiricalMeasure, fake: EmpiricalMeasure) -> float:
    """Dual-side W1 estimate ``E_real f - E_fake f`` from a trained critic.

    A diagnostic only: the critic is not certified 1-Lipschitz, so this is
    neither an upper nor a lower bound on W1.
    """
    return float(real.weights @ predict(critic, real.atoms)[:, 0]
                 - fake.weights @ predict(critic, fake.atoms)[:, 0])


def _bound(config, encoder, decoder, data: Datasets, mind, prior, seed):
    mode = config.eval.bound
    if mode == "none":
        return None
    if mode == "auto":
        small = data.source.n * data.target.n <= MAX_EXACT_PAIRS
        mode = "exact" if prior.kind == "finite" and small else "sliced"
    return verify_bound(encoder, decoder, data.source, data.target, mind, prior, mode,
                        seed=derive_seed(seed, "eval")).to_dict()


def run_experiment(config: ExperimentConfig,
                   progress: Callable[[str], None] | None = None) -> ReportBundle:
    """Run every configured method for every seed; deterministic given the config.

    Methods share one autoencoder trained on the source. ``vanilla`` and
    ``finetune`` use the composed architectures ``mind_gen.then(decoder)``
    and ``encoder.then(mind_critic)`` so parameter counts match.
    """
    bundle = ReportBundle(config.to_dict())
    if not config.methods:
        return bundle
    say = progress or (lambda _msg: None)
    data = Datasets.load(config)
    say("training autoencoder")
    t0 = time.perf_counter()
    encoder, decoder, _ = fit_autoencoder(config, data)
    ae_s = time.perf_counter() - t0
    ev = Evaluator.build(config, encoder, data.target)
    for method in config.methods:
        for seed in config.seeds:
            say(f"{method} seed {seed}")
            result, _nets = run_method(config, method, seed, encoder, decoder, data, ev)
            result.timing["autoencoder_s"] = ae_s
            bundle.runs.append(result)
    return bundle


def identity_pipeline(width: int) -> tuple[Network, Network]:
    """Identity encoder/decoder pair, the trivial autoencoder."""
    return identity_network(width), identity_network(width)
