"""Task decomposition: inner episodes drawn from the expanded support set and
the multi-task adaptation of a cloned network."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import clone_params
from .expand import ExpandedSupportSet
from .heads import RotationHead, episode_loss, rotation_loss

DEFAULT_INNER_QUERIES_PER_CLASS = 5


class AdaptationError(RuntimeError):
    """Raised when the inner loss becomes non-finite."""


@dataclass
class InnerEpisode:
    support: list[int]  # indices into the expanded set
    support_labels: np.ndarray
    rotation_labels: np.ndarray
    query: list[int]
    query_labels: np.ndarray
    reused_support: bool = False


@dataclass
class AdaptResult:
    params: dict
    trace: list[dict] = field(default_factory=list)


def sample_inner_episode(expanded: ExpandedSupportSet, way: int, shot: int, m_prime: int | None,
                         rng: np.random.Generator) -> InnerEpisode:
    """Stratified ``way``-way ``shot``-shot support plus disjoint queries from the expanded set.

    ``m_prime`` is the total query budget (split evenly over classes); the
    default takes up to 5 extra members per class. A class with exactly
    ``shot`` members reuses its support samples as queries.
    """
    classes = sorted(expanded.by_class)
    if len(classes) != way:
        raise ValueError(f"expanded set has {len(classes)} classes, inner episode wants {way}")
    per_class = DEFAULT_INNER_QUERIES_PER_CLASS if m_prime is None else max(m_prime // way, 1)
    support, query, s_lab, q_lab = [], [], [], []
    reused = False
    for c in classes:
        members = expanded.by_class[c]
        if len(members) < shot:
            raise ValueError(f"class {c} has {len(members)} expanded samples, need {shot}")
        perm = rng.permutation(len(members))
        chosen = [members[i] for i in perm[:shot]]
        rest = [members[i] for i in perm[shot:shot + per_class]]
        if not rest:
            rest = chosen
            reused = True
        support += chosen
        query += rest
        s_lab += [c] * len(chosen)
        q_lab += [c] * len(rest)
    rot = np.array([expanded.samples[i].rotation_label for i in support], dtype=np.int64)
    return InnerEpisode(support, np.asarray(s_lab, dtype=np.int64), rot, query,
                        np.asarray(q_lab, dtype=np.int64), reused)


def inner_loss(model, rot_head, expanded: ExpandedSupportSet, episode: InnerEpisode, lambda_rot: float,
               way: int | None = None):
    """Returns ``(total, few_shot_term, rotation_term)``."""
    way = way or expanded.n_classes
    sx = torch.from_numpy(expanded.pixels(episode.support))
    qx = torch.from_numpy(expanded.pixels(episode.query))
    sy = torch.from_numpy(episode.support_labels)
    log_p, _, s_emb = model.log_probs(sx, sy, qx, way, return_embeddings=True)
    l_td = episode_loss(log_p, episode.query_labels)
    l_rot = rotation_loss(rot_head, s_emb, episode.rotation_labels)
    return l_td + lambda_rot * l_rot, l_td, l_rot


def make_rotation_head(in_dim: int, hidden: int, seed) -> RotationHead:
    head = RotationHead(in_dim, hidden)
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence(seed).generate_state(1)[0]))
    with torch.no_grad():
        for m in head.modules():
            if isinstance(m, torch.nn.Linear):
                bound = 1.0 / np.sqrt(m.in_features)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                m.bias.zero_()
    return head


def adapt(model, expanded: ExpandedSupportSet, config, rng: np.random.Generator,
          head_seed=0, return_model: bool = False):
    """Run ``config.inner_iterations`` SGD steps on a clone of ``model``.

    Each step samples a fresh inner episode. The outer model is left
    untouched; a fresh rotation head is created for every call. Returns an
    :class:`AdaptResult` (and the adapted clone when ``return_model``).
    """
    inner = copy.deepcopy(model)
    alpha = config.inner_iterations
    trace: list[dict] = []
    if alpha > 0:
        head = make_rotation_head(inner.embed_dim, config.rot_hidden, head_seed)
        opt = torch.optim.SGD(list(inner.parameters()) + list(head.parameters()),
                              lr=config.inner_lr, momentum=config.inner_momentum)
        way = expanded.n_classes
        for t in range(alpha):
            ep = sample_inner_episode(expanded, way, config.inner_support_shot, config.m_prime, rng)
            total, l_td, l_rot = inner_loss(inner, head, expanded, ep, config.lambda_rot, way)
            if not torch.isfinite(total):
                raise AdaptationError(f"non-finite inner loss at step {t}: td={l_td.item()} rot={l_rot.item()}")
            opt.zero_grad()
            total.backward()
            opt.step()
            trace.append({"step": t, "loss": total.item(), "loss_td": l_td.item(), "loss_rot": l_rot.item(),
                          "reused_support": ep.reused_support})
    result = AdaptResult(clone_params(inner), trace)
    return (result, inner) if return_model else result
