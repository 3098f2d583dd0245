"""Contrastive retriever training.

A trainable linear projection over frozen text embeddings is optimized with
an InfoNCE objective so that anchors move toward their labeled positives and
away from hard plus random negatives. The projection (not the embedder) is
what a checkpoint stores, alongside enough provenance to validate reuse.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Example
from .gateway import Embedder
from .labeling import LabeledAnchor
from .util import canonical_json, read_ldjson, rng_for, write_ldjson_line

logger = logging.getLogger(__name__)

ZERO_NORM_EPS = 1e-12
UNIT_NORM_TOL = 1e-6

CHECKPOINT_FORMAT = "lail-checkpoint-v1"


@dataclass(frozen=True)
class ProjectionHead:
    """Linear map over frozen embeddings; outputs are L2-normalized by encode."""

    weights: np.ndarray  # (d_out, d_in)
    bias: np.ndarray | None = None  # (d_out,)

    def __post_init__(self) -> None:
        if self.weights.ndim != 2:
            raise ValueError("weights must be a 2-D matrix")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights contain non-finite entries")
        if self.bias is not None:
            if self.bias.shape != (self.weights.shape[0],):
                raise ValueError("bias shape must match the output dimension")
            if not np.all(np.isfinite(self.bias)):
                raise ValueError("bias contains non-finite entries")

    @property
    def d_out(self) -> int:
        return self.weights.shape[0]

    @property
    def d_in(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.07
    negatives_total: int = 64
    tau_ne: int = 1
    learning_rate: float = 5e-5
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    d_out: int = 128
    use_bias: bool = True
    denominator_includes_positive: bool = True

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.negatives_total < 1 or self.tau_ne < 1:
            raise ValueError("negatives_total and tau_ne must be >= 1")
        if self.tau_ne > self.negatives_total:
            raise ValueError("tau_ne cannot exceed negatives_total")
        if self.batch_size < 1 or self.epochs < 1 or self.d_out < 1:
            raise ValueError("batch_size, epochs and d_out must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "negatives_total": self.negatives_total,
            "tau_ne": self.tau_ne,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "d_out": self.d_out,
            "use_bias": self.use_bias,
            "denominator_includes_positive": self.denominator_includes_positive,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return cls(**raw)


@dataclass(frozen=True)
class RetrieverCheckpoint:
    head: ProjectionHead
    tau: float
    embedder_fingerprint: str
    train_config: TrainConfig
    source_dataset: str = ""
    source_scorer: str = ""
    epoch_mean_losses: tuple[float, ...] = ()

    def fingerprint(self) -> str:
        """Short content hash identifying this checkpoint's weights and provenance."""
        digest = hashlib.sha256()
        digest.update(self.head.weights.astype("<f8").tobytes())
        if self.head.bias is not None:
            digest.update(self.head.bias.astype("<f8").tobytes())
        digest.update(canonical_json([self.tau, self.embedder_fingerprint]).encode())
        return digest.hexdigest()[:16]


def encode(head: ProjectionHead, raw: np.ndarray) -> np.ndarray:
    """Project and L2-normalize one raw embedding.

    A projection smaller than 1e-12 in norm is returned as the zero vector
    (logged) rather than amplified into noise.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (head.d_in,):
        raise ValueError(f"raw vector has shape {raw.shape}, head expects ({head.d_in},)")
    y = head.weights @ raw
    if head.bias is not None:
        y = y + head.bias
    norm = float(np.linalg.norm(y))
    if norm < ZERO_NORM_EPS:
        logger.warning("encode: near-zero projection; returning zero vector")
        return np.zeros(head.d_out)
    return y / norm


def encode_batch(head: ProjectionHead, raws: np.ndarray) -> np.ndarray:
    """Row-wise encode; rows with near-zero projections become zero rows."""
    raws = np.asarray(raws, dtype=np.float64)
    y = raws @ head.weights.T
    if head.bias is not None:
        y = y + head.bias
    norms = np.linalg.norm(y, axis=1)
    zero = norms < ZERO_NORM_EPS
    if np.any(zero):
        logger.warning("encode_batch: %d row(s) with near-zero projection", int(zero.sum()))
    norms = np.where(zero, 1.0, norms)
    out = y / norms[:, None]
    out[zero] = 0.0
    return out


def _check_unit(name: str, vec: np.ndarray) -> None:
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValueError(f"{name} is not L2-normalized (norm {norm:.8f})")


def infonce_loss(
    anchor: np.ndarray,
    positive: np.ndarray,
    negatives: Sequence[np.ndarray],
    tau: float,
    include_positive: bool = True,
) -> float:
    """Contrastive loss over unit vectors with temperature `tau`.

    With `include_positive` (the default, standard form) the positive term
    joins the denominator and the loss is a positive log-softmax; without it
    the denominator sums only the negatives, the literal variant kept for
    comparison, which can go negative.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    negs = [np.asarray(n, dtype=np.float64) for n in negatives]
    if not negs:
        raise ValueError("at least one negative is required")
    for name, vec in [("anchor", anchor), ("positive", positive)] + [(f"negative[{i}]", n) for i, n in enumerate(negs)]:
        if vec.shape != anchor.shape:
            raise ValueError(f"{name} has shape {vec.shape}, expected {anchor.shape}")
        _check_unit(name, vec)
    s_pos = float(anchor @ positive)
    s_negs = np.array([float(anchor @ n) for n in negs])
    return _loss_from_sims(s_pos, s_negs, tau, include_positive)


def _loss_from_sims(s_pos: float, s_negs: np.ndarray, tau: float, include_positive: bool) -> float:
    neg_logits = s_negs / tau
    pos_logit = s_pos / tau
    if include_positive:
        all_logits = np.concatenate(([pos_logit], neg_logits))
        peak = float(all_logits.max())
        return peak + math.log(float(np.exp(all_logits - peak).sum())) - pos_logit
    peak = float(neg_logits.max())
    return peak + math.log(float(np.exp(neg_logits - peak).sum())) - pos_logit


@dataclass(frozen=True)
class Gradients:
    loss: float
    d_weights: np.ndarray
    d_bias: np.ndarray | None


def infonce_grad(
    head: ProjectionHead,
    anchor_raw: np.ndarray,
    positive_raw: np.ndarray,
    negative_raws: Sequence[np.ndarray] | np.ndarray,
    tau: float,
    include_positive: bool = True,
) -> Gradients:
    """Analytic gradient of infonce_loss composed with encode.

    Anchor, positive and negatives all pass through the same head, so each
    role contributes to the weight (and bias) gradient. Rows whose projection
    collapses below the zero threshold propagate no gradient, matching
    encode's zero-vector convention.
    """
    negative_raws = np.atleast_2d(np.asarray(negative_raws, dtype=np.float64))
    n_negs = negative_raws.shape[0]
    if n_negs < 1:
        raise ValueError("at least one negative is required")
    stacked = np.vstack(
        [
            np.asarray(anchor_raw, dtype=np.float64)[None, :],
            np.asarray(positive_raw, dtype=np.float64)[None, :],
            negative_raws,
        ]
    )
    if stacked.shape[1] != head.d_in:
        raise ValueError(f"raw vectors have dimension {stacked.shape[1]}, head expects {head.d_in}")

    pre = stacked @ head.weights.T
    if head.bias is not None:
        pre = pre + head.bias
    norms = np.linalg.norm(pre, axis=1)
    collapsed = norms < ZERO_NORM_EPS
    safe_norms = np.where(collapsed, 1.0, norms)
    unit = pre / safe_norms[:, None]
    unit[collapsed] = 0.0

    anchor, positive, negatives = unit[0], unit[1], unit[2:]
    s_pos = float(anchor @ positive)
    s_negs = negatives @ anchor
    logits = np.concatenate(([s_pos], s_negs)) / tau
    d_sims = np.empty(n_negs + 1)
    if include_positive:
        shifted = np.exp(logits - logits.max())
        softmax = shifted / shifted.sum()
        loss = -math.log(float(softmax[0]))
        d_sims[0] = (softmax[0] - 1.0) / tau
        d_sims[1:] = softmax[1:] / tau
    else:
        neg_logits = logits[1:]
        peak = float(neg_logits.max())
        exp_neg = np.exp(neg_logits - peak)
        loss = peak + math.log(float(exp_neg.sum())) - logits[0]
        d_sims[0] = -1.0 / tau
        d_sims[1:] = (exp_neg / exp_neg.sum()) / tau

    d_unit = np.zeros_like(unit)
    d_unit[0] = d_sims[0] * positive + d_sims[1:] @ negatives
    d_unit[1] = d_sims[0] * anchor
    d_unit[2:] = np.outer(d_sims[1:], anchor)

    # backprop through y = u / ||u||: J = (I - y y^T) / ||u||
    projected = d_unit - (np.einsum("ij,ij->i", d_unit, unit))[:, None] * unit
    d_pre = projected / safe_norms[:, None]
    d_pre[collapsed] = 0.0

    d_weights = d_pre.T @ stacked
    d_bias = d_pre.sum(axis=0) if head.bias is not None else None
    return Gradients(loss=loss, d_weights=d_weights, d_bias=d_bias)


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, grad in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (grad * grad)
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_retriever(
    labeled: Sequence[LabeledAnchor],
    pool: Sequence[Example],
    embedder: Embedder,
    cfg: TrainConfig,
    source_dataset: str = "",
    cache_path: str | None = None,
    cache_meta: dict | None = None,
) -> RetrieverCheckpoint:
    """Optimize a projection head on the labeled anchors.

    Per anchor and epoch: one positive is drawn uniformly from the positive
    set, `tau_ne` hard negatives from the negative set, and the rest of the
    `negatives_total` budget uniformly without replacement from the pool
    outside the anchor's stage-one set. Every random draw comes from a
    substream keyed by (seed, epoch, anchor_id), so results do not depend on
    the storage order of the labels.
    """
    if not labeled:
        raise ValueError("no labeled anchors to train on")
    ids_sorted = sorted(ex.id for ex in pool)
    id_pos = {ex_id: i for i, ex_id in enumerate(ids_sorted)}
    for la in labeled:
        if not la.positives:
            raise ValueError(f"anchor {la.anchor_id!r} has no positives")
        if not la.negatives:
            raise ValueError(f"anchor {la.anchor_id!r} has no negatives")
        if cfg.tau_ne > len(la.negatives):
            raise ValueError(
                f"anchor {la.anchor_id!r}: tau_ne = {cfg.tau_ne} exceeds its {len(la.negatives)} hard negatives"
            )
        if la.anchor_id not in id_pos:
            raise ValueError(f"labeled anchor {la.anchor_id!r} is not in the pool")

    vectors = ensure_pool_embeddings(pool, embedder, cache_path=cache_path, meta=cache_meta)
    d_in = len(next(iter(vectors.values())))
    emb = np.zeros((len(ids_sorted), d_in))
    for ex_id, i in id_pos.items():
        emb[i] = vectors[ex_id]

    anchors = sorted(labeled, key=lambda la: la.anchor_id)
    plans = []
    warned_short_pool = False
    for la in anchors:
        in_stage_one = set(la.stage_one_ids) | {la.anchor_id}
        others = np.array([id_pos[i] for i in ids_sorted if i not in in_stage_one], dtype=np.int64)
        random_budget = cfg.negatives_total - cfg.tau_ne
        if random_budget > len(others) and not warned_short_pool:
            logger.warning(
                "pool leaves %d random-negative candidates (< %d requested); clamping",
                len(others), random_budget,
            )
            warned_short_pool = True
        plans.append(
            (
                la.anchor_id,
                id_pos[la.anchor_id],
                np.array([id_pos[c.candidate_id] for c in la.positives], dtype=np.int64),
                np.array([id_pos[c.candidate_id] for c in la.negatives], dtype=np.int64),
                others,
            )
        )

    init_rng = rng_for(cfg.seed, "init")
    weights = init_rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(cfg.d_out, d_in))
    bias = np.zeros(cfg.d_out) if cfg.use_bias else None
    params: dict[str, np.ndarray] = {"weights": weights}
    if bias is not None:
        params["bias"] = bias
    adam = Adam(cfg.learning_rate)

    epoch_means: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng_for(cfg.seed, "epoch-order", epoch).permutation(len(plans))
        losses: list[float] = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            head = ProjectionHead(
                weights=params["weights"],
                bias=params.get("bias"),
            )
            grad_w = np.zeros_like(params["weights"])
            grad_b = np.zeros(cfg.d_out) if bias is not None else None
            for plan_index in batch:
                anchor_id, anchor_pos, pos_idx, hard_idx, other_idx = plans[plan_index]
                rng = rng_for(cfg.seed, "sample", epoch, anchor_id)
                chosen_pos = int(pos_idx[rng.integers(len(pos_idx))])
                hard = hard_idx[rng.choice(len(hard_idx), size=cfg.tau_ne, replace=False)]
                random_budget = min(cfg.negatives_total - cfg.tau_ne, len(other_idx))
                if random_budget > 0:
                    randoms = other_idx[rng.choice(len(other_idx), size=random_budget, replace=False)]
                    neg_rows = np.concatenate([hard, randoms])
                else:
                    neg_rows = hard
                grads = infonce_grad(
                    head,
                    emb[anchor_pos],
                    emb[chosen_pos],
                    emb[neg_rows],
                    cfg.tau,
                    include_positive=cfg.denominator_includes_positive,
                )
                grad_w += grads.d_weights
                if grad_b is not None:
                    grad_b += grads.d_bias
                losses.append(grads.loss)
            scale = 1.0 / len(batch)
            step_grads = {"weights": grad_w * scale}
            if grad_b is not None:
                step_grads["bias"] = grad_b * scale
            adam.step(params, step_grads)
        epoch_means.append(float(np.mean(losses)))
        logger.info("epoch %d/%d: mean loss %.6f", epoch, cfg.epochs, epoch_means[-1])

    head = ProjectionHead(weights=params["weights"], bias=params.get("bias"))
    return RetrieverCheckpoint(
        head=head,
        tau=cfg.tau,
        embedder_fingerprint=embedder.fingerprint(),
        train_config=cfg,
        source_dataset=source_dataset,
        source_scorer=anchors[0].scorer_kind,
        epoch_mean_losses=tuple(epoch_means),
    )


# ---------------------------------------------------------------------------
# Checkpoint and embedding-cache files
# ---------------------------------------------------------------------------


def _array_to_payload(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "dtype": "<f8",
        "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
    }


def _array_from_payload(payload: dict) -> np.ndarray:
    raw = base64.b64decode(payload["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(payload["shape"]).copy()


def save_checkpoint(path: str, checkpoint: RetrieverCheckpoint, meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "weights": _array_to_payload(checkpoint.head.weights),
        "bias": _array_to_payload(checkpoint.head.bias) if checkpoint.head.bias is not None else None,
        "tau": checkpoint.tau,
        "embedder_fingerprint": checkpoint.embedder_fingerprint,
        "train_config": checkpoint.train_config.to_dict(),
        "source_dataset": checkpoint.source_dataset,
        "source_scorer": checkpoint.source_scorer,
        "epoch_mean_losses": list(checkpoint.epoch_mean_losses),
    }
    if meta:
        doc["_meta"] = meta
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> RetrieverCheckpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    head = ProjectionHead(
        weights=_array_from_payload(doc["weights"]),
        bias=_array_from_payload(doc["bias"]) if doc.get("bias") is not None else None,
    )
    return RetrieverCheckpoint(
        head=head,
        tau=doc["tau"],
        embedder_fingerprint=doc["embedder_fingerprint"],
        train_config=TrainConfig.from_dict(doc["train_config"]),
        source_dataset=doc.get("source_dataset", ""),
        source_scorer=doc.get("source_scorer", ""),
        epoch_mean_losses=tuple(doc.get("epoch_mean_losses", ())),
    )


def ensure_pool_embeddings(
    pool: Sequence[Example],
    embedder: Embedder,
    cache_path: str | None = None,
    meta: dict | None = None,
) -> dict[str, np.ndarray]:
    """Embed every pool requirement once, reading/extending `cache_path`.

    The cache is line-delimited {"id", "vector"} records preceded by a meta
    line recording the embedder fingerprint; a cache written under a different
    embedder is rejected rather than silently mixed.
    """
    fingerprint = embedder.fingerprint()
    cached: dict[str, np.ndarray] = {}
    if cache_path and os.path.exists(cache_path):
        with open(cache_path, "r", encoding="utf-8") as fh:
            first = fh.readline().strip()
        if first:
            first_record = json.loads(first)
            cache_fp = first_record.get("_meta", {}).get("embedder_fingerprint")
            if cache_fp is not None and cache_fp != fingerprint:
                raise ValueError(
                    f"{cache_path}: cache was built with embedder {cache_fp!r}, not {fingerprint!r}"
                )
        for _, record in read_ldjson(cache_path):
            cached[record["id"]] = np.asarray(record["vector"], dtype=np.float64)

    missing = [ex for ex in pool if ex.id not in cached]
    fresh: dict[str, np.ndarray] = {ex.id: embedder.embed(ex.requirement) for ex in missing}

    if cache_path and (missing or not os.path.exists(cache_path)):
        is_new = not os.path.exists(cache_path)
        with open(cache_path, "a", encoding="utf-8") as fh:
            if is_new:
                head_meta = {"embedder_fingerprint": fingerprint}
                if meta:
                    head_meta.update(meta)
                write_ldjson_line(fh, {"_meta": head_meta})
            for ex in missing:
                write_ldjson_line(fh, {"id": ex.id, "vector": [float(x) for x in fresh[ex.id]]})

    cached.update(fresh)
    return {ex.id: cached[ex.id] for ex in pool}
