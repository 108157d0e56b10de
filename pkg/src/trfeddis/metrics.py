"""Evaluation: accuracy per opinion source, uncertainty, OOD separation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .evidential import ds_fuse, predict, to_evidence, to_opinion
from .model import Model, forward

__all__ = ["EvalResult", "auroc_bruteforce", "dump_embeddings", "evaluate", "evaluate_outputs", "model_outputs", "ood_separation"]


@dataclass
class EvalResult:
    acc_fused: float
    acc_global: float
    acc_local: float
    mean_u: float
    u: np.ndarray  # per-sample uncertainty of the decision opinion
    predictions: np.ndarray

    def as_dict(self):
        return {"acc_fused": self.acc_fused, "acc_global": self.acc_global, "acc_local": self.acc_local, "mean_u": self.mean_u}


def model_outputs(model: Model, inputs, batch_size: int = 500):
    """Eval-mode forward over ``inputs``: ``(features, raw_global, raw_local)`` arrays.

    ``raw_local`` is None for single-head models.
    """
    feats, gs, ls = [], [], []
    ds = Dataset(np.asarray(inputs), np.zeros(len(inputs), dtype=np.int64), 0, 1)
    with T.no_grad():
        for x, _ in batches(ds, batch_size, shuffle=False, mode="eval"):
            f, g, l = forward(model, x, "eval")
            feats.append(f.features.data)
            gs.append(g.data)
            if l is not None:
                ls.append(l.data)
    if not feats:
        k = model.config.num_classes
        return np.zeros((0, model.feat_dim)), np.zeros((0, k)), (np.zeros((0, k)) if model.config.dual_head else None)
    return np.concatenate(feats), np.concatenate(gs), (np.concatenate(ls) if ls else None)


def evaluate_outputs(raw_g, raw_l, labels, decision: str = "fusion") -> EvalResult:
    """Score precomputed head outputs; ``raw_l`` is None for single-head models.

    ``decision`` is "fusion" (Dempster-Shafer combination of both heads),
    "sum" (argmax of summed logits) or "single" (global head only). The
    uncertainty reported is that of the fused opinion for dual-head models
    and of the global head's opinion otherwise.
    """
    g = np.asarray(raw_g, dtype=np.float64)
    l = g if raw_l is None else np.asarray(raw_l, dtype=np.float64)
    with T.no_grad():
        _, og = to_opinion(to_evidence(g))
        _, ol = to_opinion(to_evidence(l))
        fused = og if raw_l is None else ds_fuse(og, ol)[0]
    pred_g, _, _ = predict(og)
    pred_l, _, _ = predict(ol)
    pred_f, _, u_f = predict(fused)
    if decision == "sum":
        pred_f = np.argmax(g + l, axis=-1)
    elif decision == "single":
        pred_f = pred_g
    elif decision != "fusion":
        raise ValueError(f"unknown decision rule {decision!r}")
    y = np.asarray(labels)
    return EvalResult(
        acc_fused=float(np.mean(pred_f == y)),
        acc_global=float(np.mean(pred_g == y)),
        acc_local=float(np.mean(pred_l == y)),
        mean_u=float(np.mean(u_f)),
        u=u_f,
        predictions=pred_f,
    )


def evaluate(model: Model, ds: Dataset, decision: str | None = None, batch_size: int = 500) -> EvalResult:
    """Eval-mode accuracy of the fused, global and local opinions on ``ds``.

    ``decision`` defaults to "fusion" for dual-head models and "single"
    otherwise.
    """
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if decision is None:
        decision = "fusion" if model.config.dual_head else "single"
    _, g, l = model_outputs(model, ds.inputs, batch_size)
    return evaluate_outputs(g, l if model.config.dual_head else None, ds.labels, decision)


def ood_separation(clean_u, noisy_u) -> float:
    """AUROC of uncertainty as a score for "corrupted", ties counted half.

    Rank-based (Mann-Whitney U) so it runs in O(n log n).
    """
    clean = np.asarray(clean_u, dtype=np.float64).ravel()
    noisy = np.asarray(noisy_u, dtype=np.float64).ravel()
    if clean.size == 0 or noisy.size == 0:
        raise ValueError("both uncertainty lists must be non-empty")
    allv = np.concatenate([clean, noisy])
    order = np.argsort(allv, kind="mergesort")
    sorted_v = allv[order]
    ranks = np.empty(allv.size)
    # average ranks over tie groups
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_v)) + 1]
    ends = np.r_[starts[1:], allv.size]
    avg = 0.5 * (starts + ends - 1) + 1.0
    ranks[order] = np.repeat(avg, ends - starts)
    r_noisy = ranks[clean.size :].sum()
    u_stat = r_noisy - noisy.size * (noisy.size + 1) / 2.0
    return float(u_stat / (clean.size * noisy.size))


def auroc_bruteforce(clean_u, noisy_u) -> float:
    """O(n^2) pairwise AUROC, used as a cross-check."""
    clean = np.asarray(clean_u, dtype=np.float64).ravel()
    noisy = np.asarray(noisy_u, dtype=np.float64).ravel()
    diff = noisy[:, None] - clean[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def dump_embeddings(model: Model, ds: Dataset, path, client_id: int = 0, batch_size: int = 500):
    """Write raw hidden features for external projection (t-SNE etc.).

    Columns: client, label, ``enc_*`` encoder features, ``glob_*`` global
    head outputs, then ``loc_*`` local head outputs for dual-head models.
    """
    from .persist import write_csv

    feats, g, l = model_outputs(model, ds.inputs, batch_size)
    k = model.config.num_classes
    header = ["client", "label"] + [f"enc_{i}" for i in range(feats.shape[1])] + [f"glob_{i}" for i in range(k)]
    blocks = [feats, g]
    if l is not None:
        header += [f"loc_{i}" for i in range(k)]
        blocks.append(l)
    values = np.concatenate(blocks, axis=1).astype(np.float64)
    rows = ([client_id, int(lab)] + [float(v) for v in row] for lab, row in zip(ds.labels, values))
    return write_csv(path, header, rows)
