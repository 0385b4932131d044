"""Cross-modality retrieval evaluation: CMC, mAP, gallery sampling protocols,
trial averaging and cosine-similarity distributions."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import SYSU_INDOOR_CAMERAS, DatasetIndex
from .errors import InputError, NumericError, ProtocolError
from .patchmix import Modality


@dataclass(frozen=True)
class EvalProtocol:
    """Query/gallery protocol.

    ``shots=1`` is single-shot; ``shots=n`` samples up to ``n`` gallery images
    per identity-camera (multi-shot). ``gallery_cameras=None`` keeps every
    camera of the gallery modality (all-search).
    """

    query_modality: Modality = Modality.IR
    gallery_modality: Modality = Modality.RGB
    shots: int = 1
    gallery_cameras: tuple[int, ...] | None = None
    trials: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "query_modality", Modality(self.query_modality))
        object.__setattr__(self, "gallery_modality", Modality(self.gallery_modality))
        if self.query_modality is self.gallery_modality:
            raise ProtocolError("query and gallery modality must differ")
        if self.trials < 1 or self.shots < 1:
            raise ProtocolError("trials and shots must be >= 1")
        if self.gallery_cameras is not None:
            object.__setattr__(self, "gallery_cameras", tuple(self.gallery_cameras))

    @classmethod
    def indoor(cls, **kw) -> "EvalProtocol":
        return cls(gallery_cameras=SYSU_INDOOR_CAMERAS, **kw)


@dataclass
class EvalResult:
    cmc: np.ndarray
    map: float
    skipped: int = 0
    trials: list["EvalResult"] = field(default_factory=list)

    def rank(self, r: int) -> float:
        """CMC at rank ``r`` (1-based), saturating past the gallery depth."""
        return float(self.cmc[min(r, len(self.cmc)) - 1])


def build_eval_split(index: DatasetIndex, proto: EvalProtocol, trial: int) -> tuple[list[int], list[int]]:
    """Record indices of the query set and of one sampled gallery."""
    query = index.select(proto.query_modality)
    pool = index.select(proto.gallery_modality, proto.gallery_cameras)
    if not query:
        raise ProtocolError(f"no {proto.query_modality.value} query images")
    groups: dict[tuple[int, int], list[int]] = {}
    for i in pool:
        r = index.records[i]
        groups.setdefault((r.identity, r.camera), []).append(i)
    if not groups:
        raise ProtocolError("gallery is empty under this protocol")
    rng = np.random.default_rng([proto.seed, trial])
    gallery = []
    for key in sorted(groups):
        items = groups[key]
        k = min(proto.shots, len(items))
        gallery += sorted(items[j] for j in rng.choice(len(items), size=k, replace=False))
    return query, gallery


def _normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(x)):
        raise NumericError("embeddings must be finite and non-zero for cosine ranking")
    return x / norms


def rank_gallery(query_emb: np.ndarray, gallery_embs: np.ndarray) -> np.ndarray:
    """Gallery indices by descending cosine similarity, ties in original order."""
    sims = _normalize(gallery_embs) @ _normalize(query_emb)
    return np.argsort(-sims, kind="stable")


def rank_all(query_embs: np.ndarray, gallery_embs: np.ndarray) -> np.ndarray:
    sims = _normalize(query_embs) @ _normalize(gallery_embs).T
    return np.argsort(-sims, axis=1, kind="stable")


def cmc_map(rankings: np.ndarray, query_labels, gallery_labels) -> EvalResult:
    """CMC curve and mAP; queries with no gallery match are skipped and counted."""
    rankings = np.asarray(rankings)
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    G = rankings.shape[1] if rankings.ndim == 2 else 0
    hits = np.zeros(G)
    aps = []
    skipped = 0
    for q, order in enumerate(rankings):
        good = gallery_labels[order] == query_labels[q]
        if not good.any():
            skipped += 1
            continue
        positions = np.flatnonzero(good)
        hits[positions[0]:] += 1
        aps.append(np.mean(np.arange(1, len(positions) + 1) / (positions + 1)))
    n = len(aps)
    if n == 0:
        return EvalResult(np.zeros(G), 0.0, skipped)
    return EvalResult(hits / n, float(np.mean(aps)), skipped)


def evaluate_embeddings(query_embs, query_labels, gallery_embs, gallery_labels) -> EvalResult:
    return cmc_map(rank_all(query_embs, gallery_embs), query_labels, gallery_labels)


def average_trials(results: list[EvalResult]) -> EvalResult:
    if not results:
        raise InputError("nothing to average")
    lengths = {len(r.cmc) for r in results}
    if len(lengths) != 1:
        raise InputError(f"CMC vectors differ in length: {sorted(lengths)}")
    cmc = np.mean([r.cmc for r in results], axis=0)
    return EvalResult(cmc, float(np.mean([r.map for r in results])),
                      int(sum(r.skipped for r in results)), list(results))


@dataclass
class CosineDistribution:
    positive: np.ndarray     # inter-modality, same identity
    negative: np.ndarray     # intra-modality, different identity
    edges: np.ndarray
    positive_hist: np.ndarray
    negative_hist: np.ndarray


def cosine_distribution(embeddings, labels, modalities, bins: int = 51) -> CosineDistribution:
    x = _normalize(embeddings)
    labels = np.asarray(labels)
    mods = np.array([Modality(m).value for m in modalities])
    sims = x @ x.T
    iu = np.triu_indices(len(x), k=1)
    same_id = (labels[:, None] == labels[None, :])[iu]
    same_mod = (mods[:, None] == mods[None, :])[iu]
    pos = sims[iu][same_id & ~same_mod]
    neg = sims[iu][~same_id & same_mod]
    edges = np.linspace(-1.0, 1.0, bins + 1)
    hists = []
    for name, pop in (("inter-modality positive", pos), ("intra-modality negative", neg)):
        if pop.size == 0:
            warnings.warn(f"no {name} pairs; histogram left empty", stacklevel=2)
        # clip guards against 1 + eps from floating-point round-off
        hists.append(np.histogram(np.clip(pop, -1.0, 1.0), bins=edges)[0])
    return CosineDistribution(pos, neg, edges, hists[0], hists[1])
