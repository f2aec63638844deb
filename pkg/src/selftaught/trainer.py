"""Outer episodic training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import clone_params, load_params, read_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Episode, ImageCollection, resolve_domain, sample_episode, stack_pixels
from .expand import ExpandedSupportSet, build_expanded_set
from .heads import FewShotModel, episode_loss, prototypes
from .inner import AdaptationError, adapt
from .wsol import localize_batch, prototype_weights, split_fg_bg

log = logging.getLogger(__name__)

# Sub-stream ids of the per-episode RNG keys: (seed, stream, episode).
_EPISODE_STREAM, _EXPAND_STREAM, _HEAD_STREAM = 1, 2, 3


@dataclass
class EpisodeResult:
    episode: int
    loss: float
    accuracy: float
    inner_trace: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    skipped: bool = False
    n_expanded: int = 0
    fallback_boxes: int = 0
    message: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def build_model(config: TrainConfig, seed: int | None = None) -> FewShotModel:
    return FewShotModel(config.head, config.width, config.squared_distance,
                        seed=config.seed if seed is None else seed)


def expand_support(model, support_pixels: np.ndarray, support_labels: np.ndarray, config: TrainConfig,
                   rng: np.random.Generator) -> tuple[ExpandedSupportSet, int]:
    """Localise objects in the support images (if needed) and build the expanded set.

    ``support_pixels`` is N x 3 x H x W. Returns the set and the number of
    images whose CAM was empty (centred fallback box used).
    """
    exp_cfg = config.expansion()
    images = support_pixels.transpose(0, 2, 3, 1)
    pairs, fallbacks = None, 0
    if exp_cfg.uses_wsol:
        weights = None
        if config.cam_variant == "prototype":
            with torch.no_grad():
                emb = model(torch.from_numpy(support_pixels))
            protos = prototypes(emb, torch.from_numpy(support_labels), int(support_labels.max()) + 1).numpy()
            weights = [prototype_weights(protos[y]) for y in support_labels]
        located = localize_batch(model, support_pixels, config.tau, weights)
        pairs = [split_fg_bg(img, box) for img, (_, box) in zip(images, located)]
        fallbacks = sum(p.fallback for p in pairs)
    return build_expanded_set(list(images), support_labels, pairs, exp_cfg, rng), fallbacks


def episode_tensors(episode: Episode):
    return (torch.from_numpy(stack_pixels(episode.support)), torch.from_numpy(episode.support_labels),
            torch.from_numpy(stack_pixels(episode.query)), torch.from_numpy(episode.query_labels))


def adapted_forward(model, episode: Episode, config: TrainConfig, expand_rng, head_seed, grad: bool):
    """Expansion + optional inner adaptation, then the outer head on the episode queries.

    With task decomposition the adapted parameters are loaded into ``model``
    when ``grad`` is true (training); for evaluation (``grad`` false) the
    adapted clone is used and ``model`` is left as it was.
    Returns ``(log_probs, query_embeddings, trace, n_expanded, fallbacks)``.
    """
    sx, sy, qx, qy = episode_tensors(episode)
    trace, n_expanded, fallbacks = [], len(episode.support), 0
    net = model
    if config.expands or config.td_enabled:
        expanded, fallbacks = expand_support(model, sx.numpy(), episode.support_labels, config, expand_rng)
        n_expanded = len(expanded)
        if config.td_enabled:
            if config.inner_iterations > 0:
                res, inner = adapt(model, expanded, config, expand_rng, head_seed, return_model=True)
                trace = res.trace
                if grad:
                    load_params(model, res.params)
                else:
                    net = inner
        else:
            extra = expanded.variants()
            if extra:
                sx = torch.cat([sx, torch.from_numpy(expanded.pixels(range(len(episode.support), len(expanded))))])
                sy = torch.cat([sy, torch.tensor([s.class_label for s in extra])])
    with torch.set_grad_enabled(grad):
        log_p, q_emb, _ = net.log_probs(sx, sy, qx, episode.way, return_embeddings=True)
    return log_p, q_emb, trace, n_expanded, fallbacks


def train_episode(model, optimizer, episode: Episode, config: TrainConfig, expand_rng: np.random.Generator,
                  head_seed=0, index: int = 0) -> EpisodeResult:
    t0 = time.perf_counter()
    before = clone_params(model)
    try:
        log_p, _, trace, n_exp, fb = adapted_forward(model, episode, config, expand_rng, head_seed, grad=True)
    except AdaptationError as err:
        load_params(model, before)
        log.warning("episode %d: adaptation aborted (%s)", index, err)
        return EpisodeResult(index, math.nan, math.nan, wall_time=time.perf_counter() - t0, skipped=True,
                             message=str(err))
    qy = torch.from_numpy(episode.query_labels)
    loss = episode_loss(log_p, qy)
    acc = (log_p.argmax(1) == qy).double().mean().item()
    if not torch.isfinite(loss):
        log.warning("episode %d: non-finite outer loss, step skipped", index)
        return EpisodeResult(index, loss.item(), acc, trace, time.perf_counter() - t0, True, n_exp, fb,
                             "non-finite outer loss")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return EpisodeResult(index, loss.item(), acc, trace, time.perf_counter() - t0, False, n_exp, fb)


def episode_rngs(seed: int, index: int):
    return (np.random.default_rng([seed, _EPISODE_STREAM, index]),
            np.random.default_rng([seed, _EXPAND_STREAM, index]),
            [seed, _HEAD_STREAM, index])


class Trainer:
    """Owns the outer model, its Adam optimiser and the episode counter."""

    def __init__(self, config: TrainConfig, model: FewShotModel | None = None):
        self.config = config
        self.model = model or build_model(config)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.outer_lr, betas=(0.9, 0.999))
        self.episode = 0
        self.best_val = -math.inf

    def step(self, collection: ImageCollection) -> EpisodeResult:
        c = self.config
        ep_rng, exp_rng, head_seed = episode_rngs(c.seed, self.episode)
        episode = sample_episode(collection, c.way, c.shot, c.queries_per_class, ep_rng)
        res = train_episode(self.model, self.optimizer, episode, c, exp_rng, head_seed, self.episode)
        self.episode += 1
        return res

    def save(self, path: str | Path, **extra) -> Path:
        meta = {"config": self.config.to_dict(), "episode": self.episode, "best_val": self.best_val,
                "rng": {"scheme": "per-episode", "seed": self.config.seed, "next_episode": self.episode}}
        meta.update(extra)
        return save_checkpoint(path, self.model.state_dict(), self.model.architecture(), meta,
                               self.optimizer.state_dict())

    @classmethod
    def resume(cls, path: str | Path, config: TrainConfig | None = None) -> "Trainer":
        params, manifest, opt_state = read_checkpoint(path)
        config = config or TrainConfig.from_dict(manifest["config"])
        trainer = cls(config)
        load_params(trainer.model, params)
        if opt_state is not None:
            trainer.optimizer.load_state_dict(opt_state)
        trainer.episode = int(manifest.get("episode", 0))
        trainer.best_val = float(manifest.get("best_val", -math.inf))
        return trainer


def load_model(path: str | Path) -> tuple[FewShotModel, dict]:
    params, manifest, _ = read_checkpoint(path)
    arch = manifest["architecture"]
    model = FewShotModel(arch["head"], arch["width"], arch.get("squared_distance", True),
                         arch.get("matching_scale", 10.0))
    load_params(model, params)
    return model, manifest


def train(config: TrainConfig, out_dir: str | Path, source: ImageCollection | None = None,
          val: ImageCollection | None = None, resume: str | Path | None = None,
          init_checkpoint: str | Path | None = None, progress: bool = False) -> dict:
    """Run ``config.episodes`` outer episodes, logging one JSON line per episode.

    Writes ``metrics.jsonl``, ``last.ckpt`` and (when validating) ``best.ckpt``
    to ``out_dir``. ``init_checkpoint`` seeds the encoder/head parameters
    (e.g. from a pretrained backbone) before the first episode; ``resume``
    continues an interrupted run. Returns a summary dict.
    """
    from .evaluation import evaluate

    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    need = config.shot + config.queries_per_class
    if source is None:
        source = resolve_domain(config.source, "train", config.image_size, config.images_per_class,
                                config.data_seed, need)
    if val is None and config.val_every > 0:
        val = resolve_domain(config.source, "val", config.image_size, config.images_per_class,
                             config.data_seed, need)
    trainer = Trainer.resume(resume, config) if resume else Trainer(config)
    if init_checkpoint and not resume:
        load_params(trainer.model, read_checkpoint(init_checkpoint)[0])
    metrics_path = out / "metrics.jsonl"
    results = []
    t0 = time.perf_counter()
    try:
        with metrics_path.open("a") as fh:
            while trainer.episode < config.episodes:
                res = trainer.step(source)
                results.append(res)
                rec = res.to_dict()
                if config.val_every > 0 and val is not None and trainer.episode % config.val_every == 0:
                    rep = evaluate(trainer.model, val, config, config.val_episodes, seed=config.seed + 10_000,
                                   domain_name=f"{config.source}:val")
                    rec["val_accuracy"] = rep.mean
                    if rep.mean > trainer.best_val:
                        trainer.best_val = rep.mean
                        trainer.save(out / "best.ckpt")
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
                if progress and trainer.episode % 10 == 0:
                    log.info("episode %d loss %.4f acc %.3f", trainer.episode, res.loss, res.accuracy)
    except OSError as err:
        raise OSError(f"training I/O failure under {out}: {err}") from err
    last = trainer.save(out / "last.ckpt")
    done = [r for r in results if not r.skipped]
    return {"episodes": trainer.episode, "last_checkpoint": str(last),
            "best_checkpoint": str(out / "best.ckpt") if (out / "best.ckpt").exists() else None,
            "mean_train_accuracy": float(np.mean([r.accuracy for r in done])) if done else math.nan,
            "skipped": len(results) - len(done), "wall_time": time.perf_counter() - t0,
            "trainer": trainer}
