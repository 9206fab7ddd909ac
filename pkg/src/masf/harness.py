"""Leave-one-domain-out evaluation, seed aggregation and embedding export."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from typing import Sequence

import numpy as np

from .data import DomainDataset, SampleSet
from .network import Model, ModelConfig, init
from .tensor import no_grad
from .trainer import TrainConfig, deepall_train, train

__all__ = [
    "ComparisonTable",
    "FoldResult",
    "aggregate",
    "export_embeddings",
    "leave_one_out",
    "read_embeddings",
]

DEFAULT_SEEDS = (1, 2, 3)


class CoverageError(ValueError):
    """Two methods were not evaluated on the same folds and seeds."""


@dataclasses.dataclass
class FoldResult:
    target: int
    method: str
    seeds: list[int]
    accuracies: list[float]
    predictions: dict = dataclasses.field(default_factory=dict, repr=False)
    sources: tuple[int, ...] = ()

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        """Sample standard deviation over seeds; 0.0 for a single seed."""
        if len(self.accuracies) < 2:
            return 0.0
        return float(np.std(self.accuracies, ddof=1))

    @property
    def single_seed(self) -> bool:
        return len(self.accuracies) == 1


def _train_fn(method):
    if callable(method):
        return method
    trainers = {"masf": train, "deepall": deepall_train}
    try:
        fit = trainers[method.lower()]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; expected 'masf' or 'deepall'") from None

    def run(datasets, sources, config, model_config):
        report = fit(init(model_config), datasets, config, sources)
        return report.model.predict

    return run


def leave_one_out(datasets: Sequence[DomainDataset], method, config: TrainConfig, model_config: ModelConfig,
                  seeds: Sequence[int] = DEFAULT_SEEDS, targets: Sequence[int] | None = None) -> list[FoldResult]:
    """Hold out each target domain in turn and score on its test split.

    ``method`` is ``"masf"``, ``"deepall"`` or a callable
    ``(datasets, sources, config, model_config) -> predict`` where ``predict``
    maps an input matrix to class ids. Only the target's test split is read.
    For each seed, both the training config and the model initialization use
    that seed.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    fit = _train_fn(method)
    name = method if isinstance(method, str) else getattr(method, "__name__", "custom")
    domain_ids = [d.domain for d in datasets]
    targets = domain_ids if targets is None else list(targets)
    results = []
    for target in targets:
        sources = [d for d in domain_ids if d != target]
        target_set = next(d for d in datasets if d.domain == target)
        accs, preds = [], {}
        for seed in seeds:
            try:
                predict = fit(datasets, sources, config.replace(seed=seed),
                              dataclasses.replace(model_config, seed=seed))
            except Exception as e:
                raise RuntimeError(f"fold target={target} seed={seed}: {e}") from e
            test = target_set.test
            pred = np.asarray(predict(test.x))
            preds[seed] = pred
            accs.append(float(np.mean(pred == test.y)))
        results.append(FoldResult(target, str(name).lower(), list(seeds), accs, preds, tuple(sources)))
    return results


# ---------------------------------------------------------------------------
# comparison tables


@dataclasses.dataclass
class ComparisonRow:
    sources: tuple[int, ...]
    target: int
    ours_mean: float
    ours_std: float
    base_mean: float
    base_std: float
    single_seed: bool


@dataclasses.dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    ours: str = "masf"
    baseline: str = "deepall"

    def __len__(self):
        return len(self.rows)

    @staticmethod
    def _pct(mean: float, std: float) -> str:
        return f"{100 * mean:.2f} ± {100 * std:.2f}"

    def to_text(self, domain_names: Sequence[str] | None = None) -> str:
        def name(k):
            return domain_names[k] if domain_names else str(k)

        header = ["Source", "Target", self.ours, self.baseline]
        body = [
            [", ".join(name(s) for s in r.sources), name(r.target),
             self._pct(r.ours_mean, r.ours_std), self._pct(r.base_mean, r.base_std)]
            for r in self.rows
        ]
        widths = [max(len(row[i]) for row in [header] + body) for i in range(4)]
        lines = [" | ".join(c.ljust(w) for c, w in zip(header, widths)).rstrip()]
        lines.append("-+-".join("-" * w for w in widths))
        lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
        if any(r.single_seed for r in self.rows):
            lines.append("(single seed: std reported as 0.00)")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target_domain", "ours_mean", "ours_std", "deepall_mean", "deepall_std"])
        for r in self.rows:
            w.writerow([r.target, f"{100 * r.ours_mean:.2f}", f"{100 * r.ours_std:.2f}",
                        f"{100 * r.base_mean:.2f}", f"{100 * r.base_std:.2f}"])
        return buf.getvalue()

    def wins(self) -> int:
        """Number of folds where ours is at least the baseline (in percent, 2 decimals)."""
        return sum(round(100 * r.ours_mean, 2) >= round(100 * r.base_mean, 2) for r in self.rows)


def aggregate(ours: Sequence[FoldResult], baseline: Sequence[FoldResult]) -> ComparisonTable:
    """Pair two methods' fold results into one table row per target domain."""
    by_target = {r.target: r for r in baseline}
    if sorted(by_target) != sorted(r.target for r in ours):
        raise CoverageError("methods were evaluated on different target domains")
    all_domains = sorted(by_target)
    rows = []
    for r in ours:
        b = by_target[r.target]
        if sorted(r.seeds) != sorted(b.seeds):
            raise CoverageError(f"target {r.target}: seeds {r.seeds} vs {b.seeds}")
        # hand-built results may lack sources; assume the other evaluated targets
        sources = r.sources or tuple(d for d in all_domains if d != r.target)
        rows.append(ComparisonRow(
            sources, r.target,
            r.mean, r.std, b.mean, b.std, r.single_seed,
        ))
    return ComparisonTable(rows, ours[0].method if ours else "ours", baseline[0].method if baseline else "baseline")


def per_seed_csv(results: Sequence[FoldResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target_domain", "method", "seed", "accuracy"])
    for r in results:
        for seed, acc in zip(r.seeds, r.accuracies):
            w.writerow([r.target, r.method, seed, repr(acc)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# embedding export


def export_embeddings(model: Model, samples: SampleSet, domains, path) -> int:
    """Write one JSON line per sample with features, metric embedding and prediction.

    Also writes a first ``{"task_head": ...}`` line carrying the task-head
    weights, so predictions can be replayed from the dumped features.
    Returns the number of sample records.
    """
    model = model.arrays()
    domains = np.broadcast_to(np.asarray(domains), (len(samples),))
    with no_grad():
        h = model.features(samples.x)
        scores = model.logits(h).data
        emb = model.metric_embed(h).data
    pred = np.argmax(scores, axis=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"task_head": {k: np.asarray(v).tolist() for k, v in model.theta.items()}}) + "\n")
        for i in range(len(samples)):
            fh.write(json.dumps({
                "domain": int(domains[i]),
                "label": int(samples.y[i]),
                "pred": int(pred[i]),
                "features": h.data[i].tolist(),
                "embedding": emb[i].tolist(),
            }) + "\n")
    return len(samples)


def read_embeddings(path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    head = {k: np.array(v) for k, v in lines[0]["task_head"].items()}
    return head, lines[1:]
