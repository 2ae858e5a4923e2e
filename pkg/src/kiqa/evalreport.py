"""Accuracy evaluation, retrieval-depth sweeps, and weight/overlap analysis."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .corpus import KnowledgeCorpus
from .datasets import McqDataset, attach_premises
from .encoder import EncoderModel, TrainConfig
from .external import ExternalVectorStore
from .fusion import (
    FusionModel,
    FusionError,
    question_text,
    score_item,
    train,
)
from .index import InvertedIndex
from .querygen import QueryGenConfig
from .rerank import RerankConfig
from .textnorm import token_set


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    n_items: int
    predictions: tuple[tuple[str, int, int], ...]  # (item id, predicted, gold)
    fingerprint: str

    def __post_init__(self):
        correct = sum(1 for _, p, g in self.predictions if p == g)
        if self.n_items != len(self.predictions) or self.accuracy != correct / self.n_items:
            raise EvalError("accuracy must be exactly correct/n_items")


def _primitive(obj):
    """Canonical JSON-compatible view of configs for fingerprinting."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {
            "__kind__": type(obj).__name__,
            **{f.name: _primitive(getattr(obj, f.name)) for f in dataclasses.fields(obj)},
        }
    if isinstance(obj, dict):
        return {str(k): _primitive(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_primitive(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    if callable(obj):
        return getattr(obj, "__name__", type(obj).__name__)
    return repr(obj)


def config_fingerprint(configs: dict[str, object]) -> str:
    blob = json.dumps(_primitive(configs), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def evaluate(
    model: FusionModel, dataset: McqDataset, configs: dict[str, object] | None = None
) -> EvalReport:
    missing = [it.id for it in dataset.items if it.gold is None]
    if missing:
        raise EvalError(f"items without gold labels: {missing[:3]}")
    if not dataset.items:
        raise EvalError("empty dataset")
    preds = tuple(
        (it.id, score_item(model, it).predicted, it.gold) for it in dataset.items
    )
    correct = sum(1 for _, p, g in preds if p == g)
    return EvalReport(
        accuracy=correct / len(preds),
        n_items=len(preds),
        predictions=preds,
        fingerprint=config_fingerprint(configs or {}),
    )


def save_report(report: EvalReport, path: str | Path) -> None:
    payload = {
        "accuracy": report.accuracy,
        "n_items": report.n_items,
        "fingerprint": report.fingerprint,
        "predictions": [
            {"item": i, "predicted": p, "gold": g} for i, p, g in report.predictions
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------------------
# Retrieval-depth sweep
# ---------------------------------------------------------------------------

def _clone_encoder(enc: EncoderModel) -> EncoderModel:
    from .autodiff import Tensor

    params = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in enc.params.items()}
    return EncoderModel(enc.vocab, enc.config, params)


def _clone_model(model: FusionModel) -> FusionModel:
    from .autodiff import Tensor

    encoder = (
        model.encoder
        if isinstance(model.encoder, ExternalVectorStore)
        else _clone_encoder(model.encoder)
    )
    score_w = Tensor(model.score_w.data.copy(), requires_grad=True)
    score_b = Tensor(model.score_b.data.copy(), requires_grad=True)
    if model.head != "weighted-sum":
        return FusionModel(encoder, model.head, score_w, score_b)
    if model.tied:
        return FusionModel(encoder, model.head, score_w, score_b, score_w, score_b,
                           tied=True)
    return FusionModel(
        encoder, model.head, score_w, score_b,
        Tensor(model.weight_w.data.copy(), requires_grad=True),
        Tensor(model.weight_b.data.copy(), requires_grad=True),
    )


def sweep_m(
    model: FusionModel,
    train_set: McqDataset,
    eval_set: McqDataset,
    corpus: KnowledgeCorpus,
    index: InvertedIndex,
    m_values: list[int],
    qg_config: QueryGenConfig | None = None,
    rr_config: RerankConfig | None = None,
    train_config: TrainConfig | None = None,
    retrain: bool = True,
    retrieve_k: int = 50,
    freeze_encoder: bool = False,
) -> list[tuple[int, float]]:
    """Accuracy at each retrieval depth m.

    Premises are re-attached (retrieve + re-rank) at every m.  With
    ``retrain`` a fresh copy of the model is fitted per depth; otherwise
    the given model is only re-evaluated against the re-attached premises.
    """
    if not m_values or any(m < 1 for m in m_values):
        raise EvalError("m values must be positive")
    if list(m_values) != sorted(m_values):
        raise EvalError("m values must be ascending")
    qg_config = qg_config or QueryGenConfig()
    rr_config = rr_config or RerankConfig()
    rows = []
    for m in m_values:
        rr = replace(rr_config, m=m)
        eval_m = attach_premises(eval_set, corpus, index, qg_config, rr, retrieve_k)
        if retrain:
            if train_config is None:
                raise EvalError("retrain sweep needs a train config")
            train_m = attach_premises(train_set, corpus, index, qg_config, rr, retrieve_k)
            candidate = _clone_model(model)
            train(candidate, train_m, train_config, freeze_encoder=freeze_encoder)
        else:
            candidate = model
        rows.append((m, evaluate(candidate, eval_m).accuracy))
    return rows


def write_sweep_csv(rows: list[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["m", "accuracy"])
        for m, acc in rows:
            writer.writerow([m, repr(float(acc))])


# ---------------------------------------------------------------------------
# Weight / overlap analysis
# ---------------------------------------------------------------------------

def normalized_overlap(knowledge: str, question_plus_answer: str) -> float:
    """|tokens(K) ∩ tokens(Qa)| / |tokens(Qa)| over lowercase token sets."""
    qa = token_set(question_plus_answer)
    if not qa:
        return 0.0
    return len(token_set(knowledge) & qa) / len(qa)


def weight_overlap_report(
    model: FusionModel, dataset: McqDataset
) -> list[tuple[str, int, int, float, float]]:
    """(item, option, passage, weight, overlap) rows, one per passage."""
    if model.head != "weighted-sum":
        raise FusionError(f"weight report needs a weighted-sum model, got {model.head!r}")
    rows = []
    for item in dataset.items:
        out = score_item(model, item)
        for i in range(item.n):
            qa = f"{question_text(item)} {item.options[i]}"
            texts = [p.text for p in item.premises[i]] if item.premises else []
            if not texts:
                texts = [""]  # the empty-knowledge placeholder the head scored
            for j, text in enumerate(texts):
                rows.append(
                    (item.id, i, j, out.weights[i][j], normalized_overlap(text, qa))
                )
    return rows


def write_weight_report_csv(
    rows: list[tuple[str, int, int, float, float]], path: str | Path
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item", "option", "passage", "weight", "overlap"])
        for item, option, passage, weight, overlap in rows:
            writer.writerow([item, option, passage, repr(float(weight)), repr(float(overlap))])
