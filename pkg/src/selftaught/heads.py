"""Metric few-shot heads and the rotation-prediction head.

All episode scorers return class probabilities per query (rows sum to 1);
``FewShotModel.log_probs`` exposes the matching log-probabilities so the
inner and outer losses are head agnostic.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ConvEncoder, init_params, pool

HEAD_KINDS = ("proto", "matching", "relation")


def pairwise_distance(queries: torch.Tensor, centres: torch.Tensor, squared: bool = True) -> torch.Tensor:
    """(M, D) x (N, D) -> (M, N) Euclidean distances, squared by default."""
    if queries.shape[-1] != centres.shape[-1]:
        raise ValueError(f"dimension mismatch: {queries.shape[-1]} vs {centres.shape[-1]}")
    d2 = ((queries[:, None, :] - centres[None, :, :]) ** 2).sum(-1)
    return d2 if squared else torch.sqrt(d2 + 1e-12)


def prototypes(embeddings: torch.Tensor, labels: torch.Tensor, n_way: int) -> torch.Tensor:
    """Per-class mean embedding; class ``k`` averages however many members it has."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    counts = torch.bincount(labels, minlength=n_way)
    if counts.numel() > n_way or (counts[:n_way] == 0).any():
        empty = [k for k in range(n_way) if k >= counts.numel() or counts[k] == 0]
        raise ValueError(f"no support embeddings for class(es) {empty}")
    sums = torch.zeros(n_way, embeddings.shape[-1], dtype=embeddings.dtype).index_add_(0, labels, embeddings)
    return sums / counts[:, None].to(embeddings.dtype)


def classify(queries: torch.Tensor, protos: torch.Tensor, squared: bool = True) -> torch.Tensor:
    return F.softmax(-pairwise_distance(queries, protos, squared), dim=-1)


def fewshot_nll(queries: torch.Tensor, labels, protos: torch.Tensor, squared: bool = True) -> torch.Tensor:
    """mean_i [ logsumexp_k(-d(q_i, c_k)) + d(q_i, c_{y_i}) ]"""
    labels = torch.as_tensor(labels, dtype=torch.long)
    d = pairwise_distance(queries, protos, squared)
    return (torch.logsumexp(-d, dim=-1) + d.gather(1, labels[:, None])[:, 0]).mean()


class RotationHead(nn.Module):
    """Two-layer MLP from an embedding to 4 rotation logits (0/90/180/270 degrees)."""

    def __init__(self, in_dim: int, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 4))

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.net(emb)


def rotation_loss(head: nn.Module, embeddings: torch.Tensor, rotation_labels) -> torch.Tensor:
    labels = torch.as_tensor(rotation_labels, dtype=torch.long)
    return F.cross_entropy(head(embeddings), labels)


def matching_scores(queries: torch.Tensor, support: torch.Tensor, support_labels, n_way: int,
                    scale: float = 10.0) -> torch.Tensor:
    """Cosine attention over the support set, aggregated into class probabilities."""
    if queries.shape[-1] != support.shape[-1]:
        raise ValueError(f"dimension mismatch: {queries.shape[-1]} vs {support.shape[-1]}")
    labels = torch.as_tensor(support_labels, dtype=torch.long)
    cos = F.normalize(queries, dim=-1) @ F.normalize(support, dim=-1).T
    attn = F.softmax(scale * cos, dim=-1)
    return attn @ F.one_hot(labels, n_way).to(attn.dtype)


class RelationModule(nn.Module):
    """Learned similarity between a query map and a class-mean support map."""

    def __init__(self, channels: int, hidden: int = 8):
        super().__init__()
        self.conv = nn.Sequential(nn.Conv2d(2 * channels, channels, 3, padding=1), nn.ReLU())
        self.fc = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, pairs: torch.Tensor) -> torch.Tensor:
        return self.fc(pool(self.conv(pairs)))[:, 0]


def relation_logits(query_maps: torch.Tensor, support_maps: torch.Tensor, support_labels, n_way: int,
                    module: RelationModule) -> torch.Tensor:
    if query_maps.shape[1:] != support_maps.shape[1:]:
        raise ValueError(f"map shape mismatch: {tuple(query_maps.shape[1:])} vs {tuple(support_maps.shape[1:])}")
    m = query_maps.shape[0]
    flat = support_maps.flatten(1)
    class_maps = prototypes(flat, support_labels, n_way).view(n_way, *support_maps.shape[1:])
    pairs = torch.cat([class_maps[None].expand(m, *class_maps.shape),
                       query_maps[:, None].expand(m, n_way, *query_maps.shape[1:])], dim=2)
    return module(pairs.flatten(0, 1)).view(m, n_way)


def relation_scores(query_maps, support_maps, support_labels, n_way, module) -> torch.Tensor:
    return F.softmax(relation_logits(query_maps, support_maps, support_labels, n_way, module), dim=-1)


class FewShotModel(nn.Module):
    """Encoder plus the parameters of the selected metric head."""

    def __init__(self, head: str = "proto", width: int = 64, squared_distance: bool = True,
                 matching_scale: float = 10.0, seed: int = 0):
        super().__init__()
        if head not in HEAD_KINDS:
            raise ValueError(f"unknown head {head!r}; expected one of {HEAD_KINDS}")
        self.head = head
        self.squared_distance = squared_distance
        self.matching_scale = matching_scale
        self.encoder = ConvEncoder(width=width)
        self.relation = RelationModule(width) if head == "relation" else None
        init_params(self, seed)

    @property
    def embed_dim(self) -> int:
        return self.encoder.out_dim

    def architecture(self) -> dict:
        return {"head": self.head, "width": self.encoder.out_dim, "squared_distance": self.squared_distance,
                "matching_scale": self.matching_scale}

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder.feature_map(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return pool(self.feature_map(x))

    def log_probs(self, support_x, support_y, query_x, n_way: int, return_embeddings: bool = False):
        """Log class-probabilities for each query; optionally also the query/support embeddings."""
        fmaps = self.feature_map(torch.cat([support_x, query_x]))
        ns = support_x.shape[0]
        emb = pool(fmaps)
        s_emb, q_emb = emb[:ns], emb[ns:]
        if self.head == "proto":
            d = pairwise_distance(q_emb, prototypes(s_emb, support_y, n_way), self.squared_distance)
            out = F.log_softmax(-d, dim=-1)
        elif self.head == "matching":
            p = matching_scores(q_emb, s_emb, support_y, n_way, self.matching_scale)
            out = torch.log(p.clamp_min(1e-12))
        else:
            out = F.log_softmax(relation_logits(fmaps[ns:], fmaps[:ns], support_y, n_way, self.relation), -1)
        if return_embeddings:
            return out, q_emb, s_emb
        return out


def episode_loss(log_probs: torch.Tensor, labels) -> torch.Tensor:
    return F.nll_loss(log_probs, torch.as_tensor(labels, dtype=torch.long))
