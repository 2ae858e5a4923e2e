"""Scoring heads that combine retrieved knowledge with a question/option pair.

Five heads over a shared linear scorer:

- ``baseline``      — no knowledge; score the bare question/option encoding.
- ``concat``        — join an option's passages into one text, encode once.
- ``parallel-max``  — encode each passage separately, take the best score.
- ``simple-sum``    — sum the per-passage encodings, score the sum.
- ``weighted-sum``  — softmax-weighted sum, weights from a second linear
  layer (or from the score layer itself in the tied variant).

The encoder is pluggable: either the trainable `EncoderModel` or an
`ExternalVectorStore` of precomputed vectors (which can never receive
gradient updates).  An option with no retrieved passages is scored
against a single empty-knowledge placeholder so every head stays total.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor, cross_entropy, no_grad
from .datasets import McqDataset, McqItem
from .encoder import (
    CheckpointError,
    EncoderModel,
    TrainConfig,
    build_sequence,
    encoder_from_bytes,
    encoder_to_bytes,
    pad_batch,
)
from .external import ExternalVectorStore

HEADS = ("baseline", "concat", "parallel-max", "simple-sum", "weighted-sum")

_PER_PASSAGE_HEADS = ("parallel-max", "simple-sum", "weighted-sum")


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class OptionScores:
    """Per-option scores for one item; ties in argmax go to the lowest index."""

    scores: tuple[float, ...]
    predicted: int
    weights: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.predicted != int(np.argmax(self.scores)):
            raise ValueError("predicted index must be the argmax of the scores")


class FusionModel:
    def __init__(
        self,
        encoder: EncoderModel | ExternalVectorStore,
        head: str,
        score_w: Tensor,
        score_b: Tensor,
        weight_w: Tensor | None = None,
        weight_b: Tensor | None = None,
        tied: bool = False,
    ):
        if head not in HEADS:
            raise FusionError(f"unknown head kind {head!r}")
        if head == "weighted-sum":
            if weight_w is None or weight_b is None:
                raise FusionError("weighted-sum needs a weight layer")
            if tied and (weight_w is not score_w or weight_b is not score_b):
                raise FusionError("tied weighted-sum must share score-layer storage")
        else:
            if tied or weight_w is not None or weight_b is not None:
                raise FusionError(f"{head} takes no weight layer")
        self.encoder = encoder
        self.head = head
        self.score_w = score_w
        self.score_b = score_b
        self.weight_w = weight_w
        self.weight_b = weight_b
        self.tied = tied

    @classmethod
    def init(
        cls,
        encoder: EncoderModel | ExternalVectorStore,
        head: str,
        seed: int = 0,
        tied: bool = False,
    ) -> "FusionModel":
        d = encoder.dimension if isinstance(encoder, ExternalVectorStore) else encoder.config.d
        rng = np.random.default_rng(seed)
        score_w = Tensor(rng.normal(0.0, 0.1, size=(d, 1)), requires_grad=True)
        score_b = Tensor(np.zeros(1), requires_grad=True)
        weight_w = weight_b = None
        if head == "weighted-sum":
            if tied:
                weight_w, weight_b = score_w, score_b
            else:
                weight_w = Tensor(rng.normal(0.0, 0.1, size=(d, 1)), requires_grad=True)
                weight_b = Tensor(np.zeros(1), requires_grad=True)
        return cls(encoder, head, score_w, score_b, weight_w, weight_b, tied=tied)

    def parameters(self) -> dict[str, Tensor]:
        """Trainable head parameters; each shared tensor appears once."""
        params = {"score_w": self.score_w, "score_b": self.score_b}
        if self.head == "weighted-sum" and not self.tied:
            params["weight_w"] = self.weight_w
            params["weight_b"] = self.weight_b
        return params

    @property
    def d(self) -> int:
        return self.score_w.data.shape[0]


def question_text(item: McqItem) -> str:
    return f"{item.context} {item.question}" if item.context else item.question


def _premise_texts(item: McqItem, option: int) -> list[str]:
    if item.premises is None:
        return []
    return [p.text for p in item.premises[option]]


def _pooled_per_option(model: FusionModel, item: McqItem, frozen: bool) -> list[Tensor]:
    """One (passages, d) tensor per option.

    For the trainable encoder every sequence of the item is encoded in a
    single padded batch (padding cannot change the pooled vectors), then
    sliced back apart; for a vector store the rows are constant lookups.
    """
    if isinstance(model.encoder, ExternalVectorStore):
        store = model.encoder
        out = []
        for i in range(item.n):
            m = len(_premise_texts(item, i))
            if model.head == "baseline" or m == 0:
                keys = [None]
            elif model.head == "concat":
                keys = [-1]
            else:
                keys = list(range(m))
            out.append(Tensor(np.stack([store.get(item.id, i, k) for k in keys])))
        return out

    q = question_text(item)
    per_option_knowledge: list[list[str]] = []
    for i in range(item.n):
        texts = _premise_texts(item, i)
        if model.head == "baseline":
            per_option_knowledge.append([""])
        elif model.head == "concat":
            per_option_knowledge.append([" ".join(texts)])
        else:
            per_option_knowledge.append(texts if texts else [""])

    enc = model.encoder
    seqs = [
        enc.vocab.encode(build_sequence(k, q, item.options[i], max_len=enc.config.max_len))
        for i, knowledge in enumerate(per_option_knowledge)
        for k in knowledge
    ]
    ids = pad_batch(seqs, enc.vocab.pad_id)
    if frozen:
        with no_grad():
            pooled = Tensor(enc.encode_ids(ids).data)
    else:
        pooled = enc.encode_ids(ids)
    out, lo = [], 0
    for knowledge in per_option_knowledge:
        out.append(pooled[lo : lo + len(knowledge)])
        lo += len(knowledge)
    return out


def _head_score(model: FusionModel, pooled: Tensor) -> tuple[Tensor, Tensor | None]:
    """(passages, d) -> ((1, 1) score, (passages, 1) weights or None)."""
    w, b = model.score_w, model.score_b
    head = model.head
    if head in ("baseline", "concat"):
        return pooled @ w + b, None
    if head == "parallel-max":
        return (pooled @ w + b).max(axis=0).reshape((1, 1)), None
    if head == "simple-sum":
        summary = pooled.sum(axis=0).reshape((1, model.d))
        return summary @ w + b, None
    weights = ad.softmax(pooled @ model.weight_w + model.weight_b, axis=0)
    summary = weights.swap_last_axes() @ pooled  # (1, m) @ (m, d)
    return summary @ w + b, weights


def _item_scores(
    model: FusionModel, item: McqItem, frozen: bool = False
) -> tuple[Tensor, list[Tensor] | None]:
    """Differentiable (1, n) score row plus per-option weight columns."""
    per_option = _pooled_per_option(model, item, frozen)
    scores, weights = [], []
    for pooled in per_option:
        s, wts = _head_score(model, pooled)
        scores.append(s)
        weights.append(wts)
    row = ad.concat(scores, axis=1)
    return row, (weights if model.head == "weighted-sum" else None)


def score_item(model: FusionModel, item: McqItem) -> OptionScores:
    with no_grad():
        row, weights = _item_scores(model, item)
    scores = tuple(float(v) for v in row.data[0])
    wts = None
    if weights is not None:
        wts = tuple(tuple(float(v) for v in w.data[:, 0]) for w in weights)
    return OptionScores(scores=scores, predicted=int(np.argmax(row.data[0])), weights=wts)


def _require_head(model: FusionModel, head: str):
    if model.head != head:
        raise FusionError(f"model head is {model.head!r}, expected {head!r}")


def score_baseline(model: FusionModel, item: McqItem) -> OptionScores:
    _require_head(model, "baseline")
    return score_item(model, item)


def score_concat(model: FusionModel, item: McqItem) -> OptionScores:
    _require_head(model, "concat")
    return score_item(model, item)


def score_max(model: FusionModel, item: McqItem) -> OptionScores:
    _require_head(model, "parallel-max")
    return score_item(model, item)


def score_simple_sum(model: FusionModel, item: McqItem) -> OptionScores:
    _require_head(model, "simple-sum")
    return score_item(model, item)


def score_weighted_sum(model: FusionModel, item: McqItem) -> OptionScores:
    _require_head(model, "weighted-sum")
    return score_item(model, item)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _batch_loss(model: FusionModel, batch: list[McqItem], frozen: bool) -> Tensor:
    logits = ad.concat([_item_scores(model, it, frozen)[0] for it in batch], axis=0)
    return cross_entropy(logits, np.array([it.gold for it in batch]))


def train(
    model: FusionModel,
    dataset: McqDataset,
    config: TrainConfig,
    freeze_encoder: bool = False,
    loss_log: list[float] | None = None,
) -> FusionModel:
    """Fit the head (and, unless frozen, the encoder) in place.

    Loss is cross-entropy of the softmax over each item's option scores
    against its gold index.
    """
    missing = [it.id for it in dataset.items if it.gold is None]
    if missing:
        raise FusionError(f"items without gold labels: {missing[:3]}")
    if isinstance(model.encoder, ExternalVectorStore) and not freeze_encoder:
        raise FusionError("precomputed vectors cannot receive gradients; freeze the encoder")
    params = dict(model.parameters())
    if isinstance(model.encoder, EncoderModel) and not freeze_encoder:
        params.update({f"enc.{k}": v for k, v in model.encoder.params.items()})
    opt = SGD(params, lr=config.lr, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    items = dataset.items
    for _ in range(config.epochs):
        order = rng.permutation(len(items))
        for lo in range(0, len(order), config.batch_size):
            batch = [items[i] for i in order[lo : lo + config.batch_size]]
            loss = _batch_loss(model, batch, freeze_encoder)
            if loss_log is not None:
                loss_log.append(loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model


def accuracy(model: FusionModel, dataset: McqDataset) -> float:
    right = sum(
        1 for it in dataset.items if score_item(model, it).predicted == it.gold
    )
    return right / len(dataset.items)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(model: FusionModel, item: McqItem, step: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Covers every trainable parameter (head layers, and the encoder when it
    is the trainable kind).  The loss is the item's cross-entropy against
    its gold index (option 0 when unlabeled).

    The per-parameter error is ||analytic - numeric|| / (||analytic|| +
    ||numeric|| + 1e-4).  The absolute floor matters: central differences
    carry ~ulp(loss)/step of roundoff, so a parameter whose true gradient
    norm sits below that resolution (the attention projections at init)
    would otherwise report pure noise as error, while any genuine backward
    bug still shows up orders of magnitude above the floor.
    """
    gold = item.gold if item.gold is not None else 0
    probe = McqItem(
        id=item.id, question=item.question, options=item.options, gold=gold,
        context=item.context, premises=item.premises,
        knowledge=item.knowledge, extras=item.extras,
    )

    def loss_value() -> Tensor:
        return _batch_loss(model, [probe], frozen=False)

    params = dict(model.parameters())
    if isinstance(model.encoder, EncoderModel):
        params.update({f"enc.{k}": v for k, v in model.encoder.params.items()})
    loss = loss_value()
    if not np.isfinite(loss.item()):
        raise FusionError(f"non-finite loss {loss.item()!r}")
    for p in params.values():
        p.zero_grad()
    loss.backward()

    worst = 0.0
    for name in sorted(params):
        tensor = params[name]
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        numeric = np.zeros_like(flat)
        with no_grad():
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                hi = loss_value().item()
                flat[i] = keep - step
                lo = loss_value().item()
                flat[i] = keep
                numeric[i] = (hi - lo) / (2 * step)
        numeric = numeric.reshape(tensor.data.shape)
        diff = np.linalg.norm(analytic - numeric)
        scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        worst = max(worst, diff / (scale + 1e-4))
    return worst


# ---------------------------------------------------------------------------
# Predictions file
# ---------------------------------------------------------------------------

def save_predictions(model: FusionModel, dataset: McqDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in dataset.items:
            out = score_item(model, item)
            rec = {
                "item": item.id,
                "scores": list(out.scores),
                "weights": [list(w) for w in out.weights] if out.weights else None,
                "predicted": out.predicted,
                "gold": item.gold,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"KFUS"
_VERSION = 1


def save_model(model: FusionModel, path: str | Path) -> None:
    """Write head kind, head parameters, and the embedded encoder.

    Store-backed models cannot be checkpointed: the vectors live in their
    own interchange file and the head would be meaningless without them.
    """
    if isinstance(model.encoder, ExternalVectorStore):
        raise FusionError("cannot checkpoint a model backed by an external vector store")
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _VERSION)
    raw_head = model.head.encode("utf-8")
    out += struct.pack("<I", len(raw_head)) + raw_head
    out += struct.pack("<I", int(model.tied))
    params = model.parameters()
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        raw = name.encode("utf-8")
        data = params[name].data
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += np.ascontiguousarray(data, dtype="<f8").tobytes()
    blob = encoder_to_bytes(model.encoder)
    out += struct.pack("<I", len(blob)) + blob
    Path(path).write_bytes(bytes(out))


def load_model(path: str | Path) -> FusionModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4) != _MAGIC:
        raise CheckpointError(f"{path}: not a fusion-model checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (head_len,) = struct.unpack("<I", take(4))
    head = take(head_len).decode("utf-8")
    if head not in HEADS:
        raise CheckpointError(f"{path}: unknown head kind {head!r}")
    (tied,) = struct.unpack("<I", take(4))
    (n_params,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(n_params):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        params[name] = Tensor(arr, requires_grad=True)
    (blob_len,) = struct.unpack("<I", take(4))
    encoder = encoder_from_bytes(take(blob_len), source=f"{path} (embedded encoder)")
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint data")

    expected = {"score_w", "score_b"}
    if head == "weighted-sum" and not tied:
        expected |= {"weight_w", "weight_b"}
    if set(params) != expected:
        raise CheckpointError(f"{path}: unexpected head parameter set {sorted(params)}")
    score_w, score_b = params["score_w"], params["score_b"]
    weight_w = weight_b = None
    if head == "weighted-sum":
        if tied:
            weight_w, weight_b = score_w, score_b
        else:
            weight_w, weight_b = params["weight_w"], params["weight_b"]
    return FusionModel(encoder, head, score_w, score_b, weight_w, weight_b, tied=bool(tied))
