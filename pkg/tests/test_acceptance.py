"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line in ``LINES``; ``conftest.py`` prints
them at the end of a pytest run. Running this file directly executes the
criteria in order and prints the same lines.
"""

import functools
import math
import time

import numpy as np

from masf import gradcheck
from masf import losses as L
from masf.data import (ChecksumError, SyntheticSpec, generate_synthetic, lab_stats, load_mdt, reinhard_normalize,
                       save_mdt)
from masf.harness import aggregate, leave_one_out
from masf.network import ModelConfig, init, load_checkpoint, save_checkpoint
from masf.tensor import GradMode, Tape, Tensor, grad
from masf.trainer import TrainConfig, _join, meta_step, reference_maml_step, train

LINES: list[str] = []


def criterion(number, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                note = fn(*args, **kwargs)
            except BaseException as e:
                LINES.append(f"FAIL {number:>2}  {title}  ({type(e).__name__}: {e})".splitlines()[0])
                raise
            LINES.append(f"PASS {number:>2}  {title}" + (f"  ({note})" if note else ""))
        return run
    return wrap


# ---------------------------------------------------------------------------


@criterion(1, "MASF >= DeepAll on at least 3 of 4 leave-one-out folds, seeds 1-3, within 10 minutes")
def test_direction_of_effect():
    t0 = time.perf_counter()
    spec = SyntheticSpec()
    data = generate_synthetic(spec)
    assert spec.num_domains == 4 and spec.num_classes == 8
    assert all(len(d.train) + len(d.val) + len(d.test) == 2000 for d in data)
    assert spec.noise == 0.1
    cfg = TrainConfig()
    mcfg = ModelConfig(input_dim=spec.input_dim, num_classes=spec.num_classes)
    ours = leave_one_out(data, "masf", cfg, mcfg, seeds=(1, 2, 3))
    base = leave_one_out(data, "deepall", cfg, mcfg, seeds=(1, 2, 3))
    seconds = time.perf_counter() - t0
    table = aggregate(ours, base)
    print(table.to_text())
    assert table.wins() >= 3, f"only {table.wins()} of 4 folds"
    assert seconds <= 600, f"{seconds:.0f} s"
    return f"{table.wins()}/4 folds, {seconds:.0f} s"


@criterion(2, "finite-difference suite, max relative error <= 1e-5 within 60 s")
def test_gradient_suite():
    results, seconds = gradcheck.timed_run(step=1e-5)
    print(gradcheck.report(results, seconds))
    assert "masf_objective[exact]" in results
    worst = max(results.values())
    assert worst <= 1e-5
    assert seconds <= 60
    return f"max {worst:.1e}, {seconds:.1f} s"


def _quad(a, b):
    return lambda p: 0.5 * a * (p["t"] - b) * (p["t"] - b)


@criterion(3, "reference MAML step matches the quadratic closed form to 1e-12 in both modes")
def test_maml_closed_form():
    rng = np.random.default_rng(0)
    cases = [(np.array([1.0, 2.0]), np.array([1.0, -1.0]), 0.0, 0.1)]
    for _ in range(100):
        k = int(rng.integers(1, 5))
        cases.append((rng.uniform(0.1, 3, k), rng.uniform(-2, 2, k), rng.uniform(-2, 2), rng.uniform(0, 0.3)))
    for a, b, th, rho in cases:
        adapted = th - rho * a * (th - b)
        closed = {"exact": np.sum(a * (adapted - b) * (1 - rho * a)), "first": np.sum(a * (adapted - b))}
        losses = [_quad(ak, bk) for ak, bk in zip(a, b)]
        for mode, expected in closed.items():
            # with sigma = 1 the step is theta minus the meta-gradient
            step = reference_maml_step({"t": np.array(th)}, losses, rho, 1.0, mode)["t"]
            assert abs((th - step) - expected) <= 1e-12
    # the worked instance: adapted points 0.1 and -0.2
    worked = reference_maml_step({"t": np.array(0.0)}, [_quad(1.0, 1.0), _quad(2.0, -1.0)], 0.1, 1.0, "exact")
    assert abs(-worked["t"] - 0.47) <= 1e-12
    return "101 instances; worked instance 0.47"


@criterion(4, "loss unit values")
def test_loss_unit_values():
    for C in (2, 3, 8, 10):
        assert abs(L.cross_entropy(np.zeros((5, C)), np.arange(5) % C).item() - math.log(C)) <= 1e-12
    assert abs(L.sym_kl([0.5, 0.5], [0.9, 0.1]).item() - 0.43944) <= 1e-5
    np.testing.assert_allclose(L.tempered_softmax([2.0, 0.0], 2.0).data, [0.7311, 0.2689], rtol=0, atol=1e-4)
    e = np.array([[0.6, 0.8]])
    assert L.triplet_loss(e, e, e, 0.3).item() == 0.3


@criterion(5, "(psi, theta) update is the pre-inner-step snapshot minus eta times the combined gradient")
def test_base_point_update():
    model, ep = gradcheck.toy_problem(seed=3)
    for mode in (GradMode.FIRST_ORDER, GradMode.EXACT):
        cfg = TrainConfig(alpha=0.05, eta=0.1, optimizer="sgd", grad_mode=mode,
                          weights=L.LossWeights(beta1=1.0, beta2=0.5))
        snapshot = {k: v.copy() for k, v in _join(model.psi, model.theta).items()}
        # oracle: tape gradient of the composed objective taken at the snapshot
        with Tape():
            leaves = {k: Tensor(v, requires_grad=True) for k, v in snapshot.items()}
            objective = gradcheck.masf_objective(leaves, model.phi, ep, cfg.alpha, cfg.weights, mode)
            g = {k: v.data for k, v in grad(objective, leaves).items()}
        new, _ = meta_step(model, ep, cfg)
        updated = _join(new.psi, new.theta)
        for k in snapshot:
            np.testing.assert_allclose(updated[k], snapshot[k] - cfg.eta * g[k], rtol=0, atol=1e-12)


def _tiny_benchmark():
    spec = SyntheticSpec(num_domains=3, num_classes=3, samples_per_class=20, scales=(1.0, 1.5, 2.2))
    cfg = TrainConfig(alpha=0.01, eta=0.01, gamma=0.01, max_iters=20, eval_every=5, batch_size=8, num_triplets=8)
    mcfg = ModelConfig(input_dim=spec.input_dim, num_classes=3, feature_dims=(32, 16), metric_dims=(16, 8))
    return generate_synthetic(spec), cfg, mcfg


@criterion(6, "identical config and seed give bit-identical reports, checkpoints and tables")
def test_determinism(tmp_path):
    outputs = []
    for run in range(2):
        data, cfg, mcfg = _tiny_benchmark()
        report = train(init(mcfg), data, cfg.replace(seed=7), sources=[0, 1])
        path = tmp_path / f"m{run}.mgm"
        save_checkpoint(report.model, path)
        table = aggregate(leave_one_out(data, "masf", cfg, mcfg, seeds=(1, 2)),
                          leave_one_out(data, "deepall", cfg, mcfg, seeds=(1, 2)))
        outputs.append((report.to_jsonl(), path.read_bytes(), table.to_text(), table.to_csv()))
    assert outputs[0] == outputs[1]


class _Tracked:
    """A DomainDataset stand-in that logs which splits are read."""

    def __init__(self, inner, log):
        self._inner, self._log, self.domain = inner, log, inner.domain

    @property
    def input_dim(self):
        return self._inner.input_dim

    def split(self, name):
        self._log.append((self.domain, name))
        return getattr(self._inner, name)

    train = property(lambda self: self.split("train"))
    val = property(lambda self: self.split("val"))
    test = property(lambda self: self.split("test"))


@criterion(7, "no reads of held-out train or validation data in any fold")
def test_protocol_hygiene():
    data, cfg, mcfg = _tiny_benchmark()
    for method in ("masf", "deepall"):
        for target in range(3):
            log = []
            leave_one_out([_Tracked(d, log) for d in data], method, cfg, mcfg, seeds=(1,), targets=[target])
            assert {name for dom, name in log if dom == target} == {"test"}
            assert all((dom, "train") in log for dom in range(3) if dom != target)


@criterion(8, "MDT and MGM1 round-trip bitwise; single-byte MDT corruption is detected")
def test_format_round_trips(tmp_path):
    data, _, mcfg = _tiny_benchmark()
    path = tmp_path / "d.mdt"
    save_mdt(data, path)
    back = load_mdt(path)
    for a, b in zip(data, back):
        for name in ("train", "val", "test"):
            assert a.split(name).x.tobytes() == b.split(name).x.tobytes()
            assert a.split(name).y.tobytes() == b.split(name).y.tobytes()
    save_mdt(back, tmp_path / "again.mdt")
    assert (tmp_path / "again.mdt").read_bytes() == path.read_bytes()

    raw = path.read_bytes()
    rng = np.random.default_rng(0)
    for pos in rng.choice(np.arange(28, len(raw) - 4), 50, replace=False):
        bad = bytearray(raw)
        bad[pos] = (bad[pos] + int(rng.integers(1, 256))) % 256
        (tmp_path / "bad.mdt").write_bytes(bytes(bad))
        try:
            load_mdt(tmp_path / "bad.mdt")
        except ChecksumError:
            continue
        raise AssertionError(f"corruption at byte {pos} not detected")

    model = init(ModelConfig(**{**mcfg.__dict__, "seed": 5}))
    save_checkpoint(model, tmp_path / "m.mgm")
    loaded = load_checkpoint(tmp_path / "m.mgm")
    assert loaded.config == model.config
    for part in ("psi", "theta", "phi"):
        for k, v in getattr(model, part).items():
            assert getattr(loaded, part)[k].tobytes() == np.asarray(v).tobytes()
    save_checkpoint(loaded, tmp_path / "again.mgm")
    assert (tmp_path / "again.mgm").read_bytes() == (tmp_path / "m.mgm").read_bytes()


@criterion(9, "Reinhard fixed point and per-channel target statistics to 1e-6")
def test_reinhard():
    rng = np.random.default_rng(0)
    for _ in range(100):
        img = rng.uniform(0.2, 0.8, size=(6, 6, 3))
        fixed = reinhard_normalize(img, lab_stats(img))
        assert fixed.clipped_fraction == 0 and np.abs(fixed.image - img).max() <= 1e-6
        target = lab_stats(rng.uniform(0.3, 0.7, size=(6, 6, 3)))
        out = reinhard_normalize(rng.uniform(0.3, 0.7, size=(6, 6, 3)), target)
        assert out.clipped_fraction == 0
        np.testing.assert_allclose(lab_stats(out.image), target, rtol=0, atol=1e-6)


@criterion(10, "invariances over 100 random instances each")
def test_invariances():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(input_dim=4, feature_dims=(6,), num_classes=3, metric_dims=(3,))

    def batch(n=9):
        return rng.normal(size=(n, 4)), np.concatenate([np.arange(3), rng.integers(0, 3, n - 3)])

    for i in range(100):
        p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        assert L.sym_kl(p, q).item() == L.sym_kl(q, p).item()

        m = init(ModelConfig(**{**cfg.__dict__, "seed": i}))
        m = m.replace(theta={k: v + 0.1 * rng.normal(size=v.shape) for k, v in m.theta.items()})
        tr, te = [batch(), batch()], [batch()]
        ab = L.gen_loss(tr, te, m.psi, m.theta, 2.0).item()
        ba = L.gen_loss(te, tr, m.psi, m.theta, 2.0).item()
        assert abs(ab - ba) <= 1e-12

        a, pos, neg = (rng.normal(size=(4, 3)) for _ in range(3))
        rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        before = L.triplet_loss(a, pos, neg, 0.3).item()
        assert abs(before - L.triplet_loss(a @ rot, pos @ rot, neg @ rot, 0.3).item()) <= 1e-9

        z = rng.normal(scale=3, size=6)
        ent = [-np.sum(s * np.log(s)) for s in (L.tempered_softmax(z, t).data for t in (1.5, 2, 4, 8))]
        assert all(later >= earlier - 1e-12 for earlier, later in zip(ent, ent[1:]))


if __name__ == "__main__":
    import inspect
    import tempfile
    from pathlib import Path

    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            try:
                if "tmp_path" in inspect.signature(fn).parameters:
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except Exception:
                pass
            print(LINES[-1], flush=True)
