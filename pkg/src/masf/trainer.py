"""Episodic MASF training, a reference MAML step and the DeepAll baseline."""

from __future__ import annotations

import dataclasses
import json
import logging
from typing import Callable, Sequence

import numpy as np

from .data import DomainDataset, SampleSet, TripletSamplingError, batch_iter, pool, sample_triplets
from .losses import DegenerateBatchError, LossWeights, cross_entropy, gen_loss_from_features, meta_loss, triplet_loss
from .network import Model, features, logits, metric_embed
from .tensor import GradMode, NumericDomainError, Tape, Tensor, concat, grad, inner_step, take

__all__ = [
    "Adam",
    "Episode",
    "PlainSGD",
    "TrainConfig",
    "TrainReport",
    "TrainingError",
    "accuracy",
    "deepall_train",
    "inner_update",
    "maml_meta_gradient",
    "meta_step",
    "reference_maml_step",
    "split_episode",
    "train",
]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """A numeric failure during training, tagged with the iteration."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# optimizers (outer updates only; inner steps are always plain gradient steps)


class PlainSGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> dict:
        return {k: params[k] - self.lr * grads[k] for k in params}

    def state(self) -> dict:
        return {}


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            out[k] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out

    def state(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-3
    eta: float = 1e-3
    gamma: float = 1e-3
    rho: float = 1e-3
    sigma: float = 1e-3
    weights: LossWeights = LossWeights()
    num_triplets: int = 32
    batch_size: int = 32
    max_iters: int = 2000
    eval_every: int = 50
    patience: int = 10
    seed: int = 0
    grad_mode: GradMode = GradMode.FIRST_ORDER
    optimizer: str = "adam"

    def __post_init__(self):
        object.__setattr__(self, "grad_mode", GradMode.parse(self.grad_mode))
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if min(self.alpha, self.eta, self.gamma, self.rho, self.sigma) <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience < 1 or self.eval_every < 1 or self.batch_size < 1 or self.num_triplets < 1:
            raise ValueError("patience, eval_every, batch_size and num_triplets must be >= 1")

    def make_optimizer(self, lr: float):
        return Adam(lr) if self.optimizer == "adam" else PlainSGD(lr)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        floats = ("alpha", "eta", "gamma", "rho", "sigma")
        ints = ("num_triplets", "batch_size", "max_iters", "eval_every", "patience", "seed")
        wkeys = ("beta1", "beta2", "tau", "zeta")
        kwargs, wargs = {}, {}
        for k, v in values.items():
            if k in floats:
                kwargs[k] = float(v)
            elif k in ints:
                kwargs[k] = int(v)
            elif k in wkeys:
                wargs[k] = float(v)
            elif k == "grad_mode":
                kwargs[k] = GradMode.parse(v)
            elif k == "optimizer":
                kwargs[k] = v
        if wargs:
            kwargs["weights"] = LossWeights(**wargs)
        return cls(**kwargs)


@dataclasses.dataclass
class Episode:
    meta_train: tuple[int, ...]
    meta_test: tuple[int, ...]
    batches: dict = dataclasses.field(default_factory=dict)
    triplets: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None


@dataclasses.dataclass
class TrainReport:
    """Loss traces, validation trace and the best-validation model of one run."""

    seed: int
    iterations: list = dataclasses.field(default_factory=list)
    l_cr: list = dataclasses.field(default_factory=list)
    l_gen: list = dataclasses.field(default_factory=list)
    l_tri: list = dataclasses.field(default_factory=list)
    l_meta: list = dataclasses.field(default_factory=list)
    val_iters: list = dataclasses.field(default_factory=list)
    val_acc: list = dataclasses.field(default_factory=list)
    stop_iter: int = 0
    best_val_acc: float = float("nan")
    model: Model | None = None

    def records(self) -> list[dict]:
        vals = dict(zip(self.val_iters, self.val_acc))
        return [
            {"iter": it, "L_cr": cr, "L_gen": ge, "L_tri": tr, "L_meta": me, "val_acc": vals.get(it)}
            for it, cr, ge, tr, me in zip(self.iterations, self.l_cr, self.l_gen, self.l_tri, self.l_meta)
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


# ---------------------------------------------------------------------------
# MASF


def split_episode(source_domains: Sequence[int], rng: np.random.Generator, streams: dict | None = None,
                  num_triplets: int = 0) -> Episode:
    """Hold out one uniformly chosen source domain as meta-test.

    With ``streams`` (domain -> batch iterator) the episode also carries one
    batch per domain, and ``num_triplets`` triplets drawn from their pool.
    """
    sources = list(source_domains)
    if len(sources) < 2:
        raise ValueError(f"episodes need at least 2 source domains, got {len(sources)}")
    test = sources[int(rng.integers(len(sources)))]
    ep = Episode(tuple(d for d in sources if d != test), (test,))
    if streams is not None:
        ep.batches = {d: next(streams[d]) for d in sources}
        if num_triplets:
            order = ep.meta_train + ep.meta_test
            ys = np.concatenate([ep.batches[d][1] for d in order])
            ds = np.concatenate([np.full(len(ep.batches[d][1]), d) for d in order])
            try:
                ep.triplets = sample_triplets(ys, ds, num_triplets, rng)
            except TripletSamplingError:
                # short end-of-epoch batches may hold a single class
                empty = np.zeros(0, dtype=np.int64)
                ep.triplets = (empty, empty, empty)
    return ep


def _domain_ce(psi, theta, batches) -> Tensor:
    """Cross-entropy averaged over samples within a domain, then over domains."""
    total = None
    for x, y in batches:
        term = cross_entropy(logits(theta, features(psi, x)), y)
        total = term if total is None else total + term
    return total * (1.0 / len(batches))


def _leaves(d: dict) -> dict:
    return {k: Tensor(v.data if isinstance(v, Tensor) else v, requires_grad=True) for k, v in d.items()}


def _split_keys(flat: dict) -> tuple[dict, dict]:
    psi = {k[4:]: v for k, v in flat.items() if k.startswith("psi.")}
    theta = {k[6:]: v for k, v in flat.items() if k.startswith("theta.")}
    return psi, theta


def _join(psi: dict, theta: dict) -> dict:
    return {**{f"psi.{k}": v for k, v in psi.items()}, **{f"theta.{k}": v for k, v in theta.items()}}


def inner_update(model: Model, batches, alpha: float, mode: GradMode | str = GradMode.FIRST_ORDER):
    """One plain cross-entropy step on the meta-train batches.

    Returns new ``(psi', theta')`` dicts of arrays; ``model`` is untouched.
    """
    batches = list(batches)
    if not batches or any(len(y) == 0 for _, y in batches):
        raise ValueError("inner update needs a non-empty batch for every meta-train domain")
    with Tape():
        params = _leaves(_join(model.psi, model.theta))
        adapted = inner_step(lambda p: _domain_ce(*_split_keys(p), batches), params, alpha, mode)
        psi, theta = _split_keys({k: np.array(v.data) for k, v in adapted.items()})
    return psi, theta


def _grad_or_zero(out: Tensor, wrt: dict) -> dict:
    """Gradient of ``out``, or zeros when ``out`` is a constant off the tape."""
    if out.node_id is None and not out.requires_grad:
        return {k: Tensor(np.zeros(v.shape)) for k, v in wrt.items()}
    return grad(out, wrt)


def _masf_gradients(model: Model, episode: Episode, config: TrainConfig):
    """Gradients for the (psi, theta) and phi updates plus the loss values."""
    w = config.weights
    exact = config.grad_mode is GradMode.EXACT
    tr = [episode.batches[d] for d in episode.meta_train]
    with Tape():
        base = _leaves(_join(model.psi, model.theta))
        phi = _leaves(model.phi)
        l_cr = _domain_ce(*_split_keys(base), tr)
        g_cr = grad(l_cr, base, create_graph=exact)
        if exact:
            adapted = {k: base[k] - config.alpha * g_cr[k] for k in base}
        else:
            adapted = {k: Tensor(base[k].data - config.alpha * g_cr[k].data, requires_grad=True) for k in base}
        psi_a, theta_a = _split_keys(adapted)
        # features at the adapted psi, shared by both meta losses
        feats = {d: features(psi_a, episode.batches[d][0]) for d in episode.meta_train + episode.meta_test}
        try:
            l_gen = gen_loss_from_features(
                [(feats[d], episode.batches[d][1]) for d in episode.meta_train],
                [(feats[d], episode.batches[d][1]) for d in episode.meta_test],
                theta_a, w.tau,
            )
        except DegenerateBatchError:
            # short end-of-epoch batches can share no class; skip alignment
            l_gen = Tensor(0.0)

        if episode.triplets is None:
            raise ValueError("episode has no triplets")
        # triplet indices address the batches pooled meta-train first
        a, p, n = episode.triplets
        if len(a):
            emb = metric_embed(phi, concat([feats[d] for d in episode.meta_train + episode.meta_test]))
            l_tri = triplet_loss(take(emb, a), take(emb, p), take(emb, n), w.zeta)
        else:
            l_tri = Tensor(0.0)
        l_meta = meta_loss(l_gen, l_tri, w)

        if exact:
            g_main = grad(l_cr + l_meta, base)
        else:
            g_meta = _grad_or_zero(l_meta, adapted)
            g_main = {k: g_cr[k] + g_meta[k] for k in base}
        g_phi = _grad_or_zero(l_tri, phi)
        g_main = {k: np.array(v.data) for k, v in g_main.items()}
        g_phi = {k: np.array(v.data) for k, v in g_phi.items()}
        losses = {"L_cr": l_cr.item(), "L_gen": l_gen.item(), "L_tri": l_tri.item(), "L_meta": l_meta.item()}
    return g_main, g_phi, losses


def meta_step(model: Model, episode: Episode, config: TrainConfig, optimizers=None):
    """One MASF outer iteration.

    ``optimizers`` is a ``(main, phi)`` pair of outer optimizers; by default
    fresh ones are built from ``config``. Returns ``(model, losses)``.
    """
    if optimizers is None:
        optimizers = (config.make_optimizer(config.eta), config.make_optimizer(config.gamma))
    opt_main, opt_phi = optimizers
    g_main, g_phi, losses = _masf_gradients(model, episode, config)
    base = _join(model.psi, model.theta)
    psi, theta = _split_keys(opt_main.step(base, g_main))
    phi = opt_phi.step(model.phi, g_phi)
    return model.replace(psi=psi, theta=theta, phi=phi), losses


# ---------------------------------------------------------------------------
# evaluation, training loops


def accuracy(model: Model, samples: SampleSet) -> float:
    if len(samples) == 0:
        return float("nan")
    return float(np.mean(model.predict(samples.x) == samples.y))


def _stream_rng(config: TrainConfig, tag: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, tag])


def _run_loop(model: Model, val: SampleSet, config: TrainConfig, step: Callable, report: TrainReport) -> TrainReport:
    """Shared early-stopping loop; ``step(model, it)`` returns ``(model, losses)``."""
    best_model, best_acc, bad_evals = model, -np.inf, 0
    it = -1
    for it in range(config.max_iters):
        try:
            model, losses = step(model, it)
        except NumericDomainError as e:
            raise TrainingError(str(e), it) from e
        report.iterations.append(it)
        report.l_cr.append(losses["L_cr"])
        report.l_gen.append(losses.get("L_gen", 0.0))
        report.l_tri.append(losses.get("L_tri", 0.0))
        report.l_meta.append(losses.get("L_meta", 0.0))
        if (it + 1) % config.eval_every == 0 or it == config.max_iters - 1:
            acc = accuracy(model, val)
            report.val_iters.append(it)
            report.val_acc.append(acc)
            if acc > best_acc:
                best_model, best_acc, bad_evals = model.arrays(), acc, 0
            else:
                bad_evals += 1
                if bad_evals >= config.patience:
                    log.debug("early stop at iteration %d (best val acc %.4f)", it, best_acc)
                    break
    report.stop_iter = it + 1
    report.best_val_acc = float(best_acc) if np.isfinite(best_acc) else float("nan")
    report.model = best_model
    return report


def train(model: Model, datasets: Sequence[DomainDataset], config: TrainConfig,
          sources: Sequence[int] | None = None) -> TrainReport:
    """MASF episodic training with early stopping on pooled source validation."""
    by_id = {d.domain: d for d in datasets}
    sources = list(by_id) if sources is None else list(sources)
    if len(sources) < 2:
        raise ValueError("MASF training needs at least 2 source domains")
    streams = {d: batch_iter(by_id[d].train, config.batch_size, _stream_rng(config, 1000 + d)) for d in sources}
    val = pool([by_id[d].val for d in sources])
    rng = _stream_rng(config, 1)
    opts = (config.make_optimizer(config.eta), config.make_optimizer(config.gamma))

    def step(m, it):
        ep = split_episode(sources, rng, streams, config.num_triplets)
        return meta_step(m, ep, config, opts)

    return _run_loop(model, val, config, step, TrainReport(seed=config.seed))


def deepall_train(model: Model, datasets: Sequence[DomainDataset], config: TrainConfig,
                  sources: Sequence[int] | None = None) -> TrainReport:
    """Cross-entropy training of (psi, theta) on pooled source data; phi is untouched."""
    by_id = {d.domain: d for d in datasets}
    sources = list(by_id) if sources is None else list(sources)
    if not sources:
        raise ValueError("DeepAll needs at least one source domain")
    pooled = pool([by_id[d].train for d in sources])
    stream = batch_iter(pooled, config.batch_size * len(sources), _stream_rng(config, 2))
    val = pool([by_id[d].val for d in sources])
    opt = config.make_optimizer(config.eta)

    def step(m, it):
        x, y = next(stream)
        with Tape():
            params = _leaves(_join(m.psi, m.theta))
            psi, theta = _split_keys(params)
            loss = cross_entropy(logits(theta, features(psi, x)), y)
            g = {k: np.array(v.data) for k, v in grad(loss, params).items()}
            value = loss.item()
        psi, theta = _split_keys(opt.step(_join(m.psi, m.theta), g))
        return m.replace(psi=psi, theta=theta), {"L_cr": value}

    return _run_loop(model, val, config, step, TrainReport(seed=config.seed))


# ---------------------------------------------------------------------------
# reference MAML


def maml_meta_gradient(params, domain_losses: Sequence[Callable], rho: float,
                       mode: GradMode | str = GradMode.EXACT):
    """Gradient of ``sum_k L_k(params - rho * grad L_k(params))`` with respect to ``params``.

    ``params`` is a dict of arrays; each loss maps a dict of tensors to a
    scalar tensor.
    """
    mode = GradMode.parse(mode)
    with Tape():
        leaves = _leaves(params)
        total = None
        for loss_fn in domain_losses:
            adapted = inner_step(loss_fn, leaves, rho, mode)
            if mode is GradMode.EXACT:
                g = grad(loss_fn(adapted), leaves)
            else:
                g = grad(loss_fn(adapted), adapted)
            g = {k: np.array(v.data) for k, v in g.items()}
            total = g if total is None else {k: total[k] + g[k] for k in total}
    return total


def reference_maml_step(params, domain_losses: Sequence[Callable], rho: float, sigma: float,
                        mode: GradMode | str = GradMode.EXACT):
    """Plain MAML outer update ``params - sigma * meta_gradient``."""
    g = maml_meta_gradient(params, domain_losses, rho, mode)
    return {k: np.asarray(params[k], dtype=np.float64) - sigma * g[k] for k in params}
