"""Finite-difference checks of every loss and of the composed MASF objective."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .data import sample_triplets
from .losses import LossWeights, cross_entropy, gen_loss_from_features, meta_loss, sym_kl, tempered_softmax, triplet_loss
from .network import ModelConfig, features, init, logits, metric_embed
from .tensor import GradMode, Tensor, concat, finite_diff_check, grad, take
from .trainer import Episode, _domain_ce, _join, _split_keys

TOLERANCE = 1e-5


def toy_problem(seed: int = 0, input_dim: int = 5, num_classes: int = 3, per_domain: int = 9, R: int = 8):
    """A small model at a generic parameter point and a 3-domain episode."""
    cfg = ModelConfig(input_dim=input_dim, feature_dims=(7,), num_classes=num_classes, metric_dims=(4,), seed=seed)
    model = init(cfg)
    rng = np.random.default_rng(seed + 1)

    def jitter(part, offset):
        return {k: v + (offset if k.startswith("b") else 0.0) + 0.05 * rng.normal(size=v.shape)
                for k, v in part.items()}

    # positive bias offsets keep ReLUs away from kinks and the metric head nonzero
    model = model.replace(psi=jitter(model.psi, 0.3), phi=jitter(model.phi, 0.2))
    batches = {}
    for d in range(3):
        y = np.concatenate([np.arange(num_classes), rng.integers(0, num_classes, per_domain - num_classes)])
        batches[d] = (rng.normal(size=(per_domain, input_dim)) + 0.3 * d, y)
    ep = Episode((0, 1), (2,), batches)
    ys = np.concatenate([batches[d][1] for d in (0, 1, 2)])
    ds = np.repeat([0, 1, 2], per_domain)
    ep.triplets = sample_triplets(ys, ds, R, rng)
    return model, ep


def _meta_terms(psi, theta, phi, ep, w):
    order = ep.meta_train + ep.meta_test
    feats = {d: features(psi, ep.batches[d][0]) for d in order}
    gen = gen_loss_from_features([(feats[d], ep.batches[d][1]) for d in ep.meta_train],
                                 [(feats[d], ep.batches[d][1]) for d in ep.meta_test], theta, w.tau)
    emb = metric_embed(phi, concat([feats[d] for d in order]))
    a, p, n = ep.triplets
    tri = triplet_loss(take(emb, a), take(emb, p), take(emb, n), w.zeta)
    return gen, tri


def masf_objective(flat: dict, phi: dict, ep: Episode, alpha: float, weights: LossWeights,
                   mode: GradMode = GradMode.EXACT) -> Tensor:
    """L_cr(base) + L_meta(adapted) as a function of the base (psi, theta).

    In exact mode the adapted parameters keep their dependence on the base;
    in first-order mode it is cut, so the tape gradient is the first-order
    direction rather than the derivative of the returned value.
    """
    tr = [ep.batches[d] for d in ep.meta_train]
    l_cr = _domain_ce(*_split_keys(flat), tr)
    g = grad(l_cr, flat, create_graph=mode is GradMode.EXACT)
    if mode is GradMode.EXACT:
        adapted = {k: flat[k] - alpha * g[k] for k in flat}
    else:
        adapted = {k: flat[k] - alpha * g[k].detach() for k in flat}
    gen, tri = _meta_terms(*_split_keys(adapted), phi, ep, weights)
    return l_cr + meta_loss(gen, tri, weights)


def suite(seed: int = 0) -> dict[str, tuple[Callable, dict]]:
    model, ep = toy_problem(seed)
    w = LossWeights(beta1=1.0, beta2=0.5)
    x, y = ep.batches[0]
    scores = np.random.default_rng(seed).normal(size=(6, 3))
    labels = np.array([0, 2, 1, 1, 0, 2])
    base = _join(model.psi, model.theta)
    full = {**base, **{f"phi.{k}": v for k, v in model.phi.items()}}

    def parts(p):
        psi, theta = _split_keys(p)
        phi = {k[4:]: v for k, v in p.items() if k.startswith("phi.")}
        return psi, theta, phi

    def gen(p):
        return _meta_terms(*parts(p), ep, w)[0]

    def tri(p):
        return _meta_terms(*parts(p), ep, w)[1]

    return {
        "cross_entropy[logits]": (lambda p: cross_entropy(p["s"], labels), {"s": scores}),
        "cross_entropy[psi,theta]": (lambda p: cross_entropy(logits(parts(p)[1], features(parts(p)[0], x)), y), base),
        "sym_kl[softmax inputs]": (
            lambda p: sym_kl(tempered_softmax(p["u"], w.tau), tempered_softmax(p["v"], w.tau)),
            {"u": scores[0], "v": scores[1]},
        ),
        "gen_loss[psi,theta]": (gen, base),
        "triplet_loss[psi,phi]": (tri, full),
        "meta_loss[psi,theta,phi]": (lambda p: meta_loss(gen(p), tri(p), w), full),
        "masf_objective[exact]": (lambda p: masf_objective(p, model.phi, ep, 0.05, w, GradMode.EXACT), base),
    }


def run(seed: int = 0, step: float = 1e-5, only: str | None = None) -> dict[str, float]:
    """Max relative error per check; ``only`` filters by substring."""
    out = {}
    for name, (fn, params) in suite(seed).items():
        if only and only not in name:
            continue
        out[name] = finite_diff_check(fn, params, step=step)
    return out


def report(results: dict[str, float], seconds: float | None = None) -> str:
    width = max(len(k) for k in results)
    lines = [f"{name.ljust(width)}  {err:.3e}  {'ok' if err <= TOLERANCE else 'FAIL'}" for name, err in results.items()]
    lines.append(f"{'max'.ljust(width)}  {max(results.values()):.3e}")
    if seconds is not None:
        lines.append(f"{'seconds'.ljust(width)}  {seconds:.1f}")
    return "\n".join(lines) + "\n"


def timed_run(**kwargs) -> tuple[dict[str, float], float]:
    t0 = time.perf_counter()
    res = run(**kwargs)
    return res, time.perf_counter() - t0
