"""Ranking evaluation: distances, protocol filtering, mAP and CMC."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import ConfigurationError, ContractViolation, EvaluationError

logger = logging.getLogger(__name__)

CMC_RANKS = (1, 5, 10, 20)
PROTOCOLS = ("pavis-cross-group", "market-style", "exclude-self", "none")


@dataclass
class DistanceMatrix:
    """Query x gallery distances plus the cells the protocol leaves valid."""

    distances: np.ndarray
    valid: np.ndarray = None
    dropped: np.ndarray = None

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        if self.distances.ndim != 2:
            raise ContractViolation(f"distance matrix must be 2-D, got {self.distances.shape}")
        if not np.isfinite(self.distances).all():
            raise ContractViolation("distance matrix has non-finite entries")
        if self.valid is None:
            self.valid = np.ones(self.distances.shape, dtype=bool)
        if self.dropped is None:
            self.dropped = np.zeros(self.distances.shape[0], dtype=bool)

    @property
    def shape(self):
        return self.distances.shape


@dataclass
class MetricReport:
    mAP: float
    cmc: dict
    num_queries_evaluated: int
    num_queries_dropped: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["cmc"] = {str(k): v for k, v in self.cmc.items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        lines = [f"mAP      {100 * self.mAP:6.2f}"]
        lines += [f"CMC@{k:<4} {100 * v:6.2f}" for k, v in sorted(self.cmc.items())]
        lines.append(f"queries  {self.num_queries_evaluated} evaluated, "
                     f"{self.num_queries_dropped} dropped")
        for k, v in sorted(self.extra.items()):
            lines.append(f"{k}  {v}")
        return "\n".join(lines) + "\n"

    def save(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(self.to_json() + "\n")
        (out_dir / f"{stem}.txt").write_text(self.to_text())


def distance_matrix(queries, gallery):
    """Pairwise Euclidean distances between query and gallery vectors."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise ContractViolation(
            f"embedding dimension mismatch: queries {q.shape[1]}, gallery {g.shape[1]}")
    return DistanceMatrix(cdist(q, g, "euclidean"))


def _meta_column(meta, key, n):
    col = meta.get(key)
    if col is None:
        return np.array([None] * n, dtype=object)
    col = np.asarray(col, dtype=object)
    if len(col) != n:
        raise ContractViolation(f"metadata column {key!r} has {len(col)} entries, expected {n}")
    return col


def cross_group_filter(matrix, query_meta, gallery_meta, protocol="pavis-cross-group"):
    """Mask gallery cells per protocol and drop queries left without a positive.

    ``*_meta`` are mappings of aligned columns: ``person_id`` (required),
    ``group_id``, ``camera_id`` and ``key`` (an image identity, e.g. its path).

    Protocols
    ---------
    pavis-cross-group : gallery items in the query's group are ignored.
    market-style      : items with the query's person id and camera are ignored.
    exclude-self      : the item with the query's key is ignored.
    none              : nothing is masked.
    """
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    nq, ng = matrix.shape
    qp = _meta_column(query_meta, "person_id", nq)
    gp = _meta_column(gallery_meta, "person_id", ng)
    valid = matrix.valid.copy()
    if protocol == "pavis-cross-group":
        qg = _meta_column(query_meta, "group_id", nq)
        gg = _meta_column(gallery_meta, "group_id", ng)
        valid &= qg[:, None] != gg[None, :]
    elif protocol == "market-style":
        qc = _meta_column(query_meta, "camera_id", nq)
        gc = _meta_column(gallery_meta, "camera_id", ng)
        valid &= ~((qp[:, None] == gp[None, :]) & (qc[:, None] == gc[None, :]))
    elif protocol == "exclude-self":
        qk = _meta_column(query_meta, "key", nq)
        gk = _meta_column(gallery_meta, "key", ng)
        valid &= qk[:, None] != gk[None, :]
    positives = (qp[:, None] == gp[None, :]) & valid
    dropped = matrix.dropped | ~positives.any(axis=1)
    if dropped.any():
        logger.warning("%d of %d queries have no valid positive and are dropped",
                       int(dropped.sum()), nq)
    return DistanceMatrix(matrix.distances, valid, dropped)


def _ranked_matches(matrix, query_ids, gallery_ids):
    """Per retained query: boolean match vector over valid gallery, best first."""
    qids = np.asarray(query_ids, dtype=object)
    gids = np.asarray(gallery_ids, dtype=object)
    nq, ng = matrix.shape
    if len(qids) != nq or len(gids) != ng:
        raise ContractViolation("label arrays do not match the distance matrix")
    out = []
    for i in range(nq):
        if matrix.dropped[i]:
            continue
        cols = np.flatnonzero(matrix.valid[i])
        # ascending distance, ties broken by original gallery index
        order = cols[np.lexsort((cols, matrix.distances[i, cols]))]
        matches = gids[order] == qids[i]
        if matches.any():
            out.append(matches)
    if not out:
        raise EvaluationError("no query has a valid positive in the gallery")
    return out


def average_precision(matches):
    """Mean over positives of precision at that positive's rank."""
    matches = np.asarray(matches, dtype=bool)
    hits = np.cumsum(matches)
    ranks = np.flatnonzero(matches) + 1
    return float(np.mean(hits[ranks - 1] / ranks))


def compute_map(matrix, query_ids, gallery_ids):
    return float(np.mean([average_precision(m)
                          for m in _ranked_matches(matrix, query_ids, gallery_ids)]))


def compute_cmc(matrix, query_ids, gallery_ids, ks=CMC_RANKS):
    firsts = np.array([np.argmax(m) + 1 for m in _ranked_matches(matrix, query_ids, gallery_ids)])
    return {int(k): float(np.mean(firsts <= k)) for k in ks}


def evaluate(matrix, query_ids, gallery_ids, ks=CMC_RANKS):
    ranked = _ranked_matches(matrix, query_ids, gallery_ids)
    firsts = np.array([np.argmax(m) + 1 for m in ranked])
    return MetricReport(
        mAP=float(np.mean([average_precision(m) for m in ranked])),
        cmc={int(k): float(np.mean(firsts <= k)) for k in ks},
        num_queries_evaluated=len(ranked),
        num_queries_dropped=int(matrix.shape[0] - len(ranked)),
    )


def evaluate_embeddings(query, gallery, query_meta, gallery_meta, protocol="pavis-cross-group",
                        ks=CMC_RANKS):
    """Distance matrix, protocol filter and metrics in one call."""
    dm = cross_group_filter(distance_matrix(query, gallery), query_meta, gallery_meta, protocol)
    report = evaluate(dm, query_meta["person_id"], gallery_meta["person_id"], ks)
    report.extra["protocol"] = protocol
    return report


def invariance_ratio(embeddings, person_ids, cloth_ids):
    """Mean distance of same-person/different-cloth pairs over mean different-person distance.

    Lower is more apparel invariant. Cloth ids only need to be unique within
    a person.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    pid = np.asarray(person_ids, dtype=object)
    cid = np.asarray(cloth_ids, dtype=object)
    d = cdist(e, e, "euclidean")
    same_p = pid[:, None] == pid[None, :]
    same_c = cid[:, None] == cid[None, :]
    intra = same_p & ~same_c
    inter = ~same_p
    if not intra.any() or not inter.any():
        raise EvaluationError("need same-person/different-cloth and different-person pairs")
    return float(d[intra].mean() / d[inter].mean())


__all__ = [
    "DistanceMatrix", "MetricReport", "distance_matrix", "cross_group_filter", "compute_map",
    "compute_cmc", "evaluate", "evaluate_embeddings", "average_precision", "invariance_ratio",
    "CMC_RANKS", "PROTOCOLS",
]
