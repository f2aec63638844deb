"""Cross-domain evaluation, alpha sweeps and the ablation grid."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ABLATION_ROWS, TrainConfig, preset
from .data import ImageCollection, resolve_domain, sample_episode
from .trainer import adapted_forward

_EVAL_STREAM, _EVAL_EXPAND, _EVAL_HEAD = 11, 12, 13


def ci95(accuracies: Sequence[float]) -> float:
    """Half-width 1.96 * s / sqrt(E) with the sample (n-1) standard deviation; 0 for E < 2."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size < 2:
        return 0.0
    return float(1.96 * a.std(ddof=1) / math.sqrt(a.size))


@dataclass
class EvalReport:
    domain: str
    episodes: int
    mean: float
    ci95: float
    accuracies: list[float] = field(repr=False)
    config_fingerprint: str = ""
    alpha: int | None = None

    @classmethod
    def from_accuracies(cls, domain: str, accuracies, fingerprint: str = "", alpha=None) -> "EvalReport":
        accs = [float(a) for a in accuracies]
        return cls(domain, len(accs), float(np.mean(accs)) if accs else math.nan, ci95(accs), accs,
                   fingerprint, alpha)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    def summary(self) -> str:
        return f"{self.domain}: {100 * self.mean:.2f}% +- {100 * self.ci95:.2f}% ({self.episodes} episodes)"


def evaluate(model, collection: ImageCollection, config: TrainConfig, episodes: int | None = None,
             seed: int = 0, domain_name: str = "", dump_embeddings: str | Path | None = None) -> EvalReport:
    """Accuracy over ``episodes`` random tasks, with the configured expansion/adaptation per task.

    ``model`` is never modified. Episode ``e`` draws from RNG streams keyed
    by ``(seed, e)``, so a run is reproducible episode for episode.
    """
    episodes = config.eval_episodes if episodes is None else episodes
    accs, dumps = [], []
    was_training = model.training
    model.eval()
    for e in range(episodes):
        ep = sample_episode(collection, config.way, config.shot, config.queries_per_class,
                            np.random.default_rng([seed, _EVAL_STREAM, e]))
        log_p, q_emb, *_ = adapted_forward(model, ep, config, np.random.default_rng([seed, _EVAL_EXPAND, e]),
                                           [seed, _EVAL_HEAD, e], grad=False)
        pred = log_p.argmax(1).numpy()
        accs.append(float((pred == ep.query_labels).mean()))
        if dump_embeddings is not None:
            dumps.append((q_emb.detach().numpy(), ep.query_labels, np.asarray(ep.class_ids)[ep.query_labels],
                          np.full(len(ep.query_labels), e)))
    model.train(was_training)
    if dump_embeddings is not None and dumps:
        emb, loc, glob, idx = (np.concatenate(x) for x in zip(*dumps))
        Path(dump_embeddings).parent.mkdir(parents=True, exist_ok=True)
        np.savez(dump_embeddings, embeddings=emb, labels=loc, class_ids=glob, episode=idx)
    return EvalReport.from_accuracies(domain_name, accs, config.fingerprint(), config.inner_iterations
                                      if config.td_enabled else 0)


def sweep_alpha(model, collection: ImageCollection, config: TrainConfig, alphas: Sequence[int],
                episodes: int | None = None, seed: int = 0, domain_name: str = "",
                out_dir: str | Path | None = None) -> list[EvalReport]:
    """One evaluation per inner-iteration count; optionally writes ``alpha_sweep.csv``/``.json``."""
    reports = []
    for a in alphas:
        cfg = config.replace(alpha=int(a), td_enabled=True)
        rep = evaluate(model, collection, cfg, episodes, seed, domain_name)
        rep.alpha = int(a)
        reports.append(rep)
    if out_dir is not None:
        write_table(reports, Path(out_dir), "alpha_sweep", key="alpha")
    return reports


def write_table(reports, out_dir: Path, stem: str, key: str, labels: Sequence[str] | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, r in enumerate(reports):
        rows.append({key: labels[i] if labels else getattr(r, key), "domain": r.domain, "episodes": r.episodes,
                     "mean": r.mean, "ci95": r.ci95})
    with (out_dir / f"{stem}.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [key])
        w.writeheader()
        w.writerows(rows)
    (out_dir / f"{stem}.json").write_text(json.dumps(
        {"rows": rows, "reports": [r.to_dict() for r in reports]}, indent=1))


def ablate(base: TrainConfig, out_dir: str | Path, rows: Sequence[str] | None = None,
           episodes: int | None = None, source: ImageCollection | None = None,
           target: ImageCollection | None = None) -> dict[str, EvalReport]:
    """Train and evaluate every ablation row with the same seed and budget."""
    from .trainer import train

    out = Path(out_dir)
    rows = list(rows or ABLATION_ROWS)
    need = base.shot + base.queries_per_class
    if source is None:
        source = resolve_domain(base.source, "train", base.image_size, base.images_per_class, base.data_seed, need)
    if target is None:
        target = resolve_domain(base.target, "test", base.image_size, base.images_per_class, base.data_seed, need)
    reports = {}
    for name in rows:
        cfg = preset(name, base)
        summary = train(cfg, out / name, source=source)
        model = summary["trainer"].model
        reports[name] = evaluate(model, target, cfg, episodes, seed=base.seed, domain_name=f"{base.target}:test")
        reports[name].save(out / name / "eval.json")
    write_table(list(reports.values()), out, "ablation", key="row", labels=list(reports))
    return reports
