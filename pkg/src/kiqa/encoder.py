"""Tiny trainable text encoder: one attention block, pooled first position.

The encoder exists so fusion-head mechanics can be verified with exact
64-bit gradients; it is one self-attention block plus a position-wise
feed-forward, both with post-norm residuals, over learned embeddings.
No position information is used: the scoring heads only consume pooled
summaries where token identity, not order, carries the signal.

Padded and unpadded encodings of the same content are bitwise identical:
padded keys get an additive -1e30 before the attention softmax (their
exponentials underflow to exactly 0.0), and the softmax denominator is
computed as a matrix product with a ones column because BLAS products are
bitwise-stable under zero padding where ndarray.sum's pairwise
accumulation is not.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor, cross_entropy, no_grad
from .corpus import KnowledgeCorpus

PAD, START, SEP, MASK, UNK = "<pad>", "<s>", "<sep>", "<mask>", "<unk>"
SPECIAL_TOKENS = (PAD, START, SEP, MASK, UNK)

_NEG_INF = -1e30
_MAGIC = b"KENC"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def encoder_tokens(text: str) -> list[str]:
    """Whitespace tokenization, lowercased; the toy encoder's word pieces."""
    return text.lower().split()


class Vocab:
    """Token ↔ id table; ids 0..4 are the special tokens, in fixed order."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        words = sorted({t for text in texts for t in encoder_tokens(text)} - set(SPECIAL_TOKENS))
        return cls(list(SPECIAL_TOKENS) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    def encode(self, tokens: list[str]) -> np.ndarray:
        return np.array([self.id_of(t) for t in tokens], dtype=np.int64)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def start_id(self) -> int:
        return 1

    @property
    def sep_id(self) -> int:
        return 2

    @property
    def mask_id(self) -> int:
        return 3

    @property
    def unk_id(self) -> int:
        return 4

    @property
    def first_word_id(self) -> int:
        return len(SPECIAL_TOKENS)


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    max_len: int = 256
    ln_eps: float = 1e-12
    init_scale: float = 0.1

    def __post_init__(self):
        if self.d < 1 or self.max_len < 4:
            raise ValueError("d must be >= 1 and max_len >= 4")
        if self.ln_eps <= 0:
            raise ValueError("layer-norm epsilon must be > 0")


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    momentum: float = 0.9
    mask_prob: float = 0.15

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask probability must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")


def _layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * ((var + eps) ** -0.5) * gamma + beta


class EncoderModel:
    def __init__(self, vocab: Vocab, config: EncoderConfig, params: dict[str, Tensor]):
        self.vocab = vocab
        self.config = config
        self.params = params

    PARAM_SHAPES = {
        "emb": ("V", "d"),
        "att_wq": ("d", "d"),
        "att_wk": ("d", "d"),
        "att_wv": ("d", "d"),
        "att_wo": ("d", "d"),
        "ffn_w1": ("d", "h"),
        "ffn_b1": ("h",),
        "ffn_w2": ("h", "d"),
        "ffn_b2": ("d",),
        "ln1_gamma": ("d",),
        "ln1_beta": ("d",),
        "ln2_gamma": ("d",),
        "ln2_beta": ("d",),
    }

    @classmethod
    def init(cls, vocab: Vocab, config: EncoderConfig = EncoderConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        dims = {"V": len(vocab), "d": config.d, "h": 4 * config.d}
        params = {}
        for name, shape_spec in cls.PARAM_SHAPES.items():
            shape = tuple(dims[s] for s in shape_spec)
            if name.endswith("gamma"):
                data = np.ones(shape)
            elif name.endswith(("beta", "b1", "b2")):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, config.init_scale, size=shape)
            params[name] = Tensor(data, requires_grad=True)
        return cls(vocab, config, params)

    # -- forward --------------------------------------------------------

    def hidden_states(self, ids: np.ndarray) -> Tensor:
        """(B, L) int ids -> (B, L, d) final-layer vectors."""
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ValueError("ids must be a non-empty (batch, length) array")
        if ids.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds {self.config.max_len}")
        p = self.params
        d = self.config.d
        x = p["emb"][ids]  # (B, L, d)

        q = x @ p["att_wq"]
        k = x @ p["att_wk"]
        v = x @ p["att_wv"]
        scores = (q @ k.swap_last_axes()) * (1.0 / np.sqrt(d))
        pad_mask = np.where(ids == self.vocab.pad_id, _NEG_INF, 0.0)
        scores = scores + Tensor(pad_mask[:, None, :])  # mask keys per query row
        shifted = scores - Tensor(scores.data.max(axis=-1, keepdims=True))
        e = ad.exp(shifted)
        # ones-column matmul keeps the denominator bitwise-stable under padding
        attn = e / (e @ Tensor(np.ones((ids.shape[1], 1))))
        x = _layer_norm(
            x + (attn @ v) @ p["att_wo"], p["ln1_gamma"], p["ln1_beta"], self.config.ln_eps
        )
        ffn = ad.tanh(x @ p["ffn_w1"] + p["ffn_b1"]) @ p["ffn_w2"] + p["ffn_b2"]
        return _layer_norm(x + ffn, p["ln2_gamma"], p["ln2_beta"], self.config.ln_eps)

    def encode_ids(self, ids: np.ndarray) -> Tensor:
        """(B, L) int ids -> (B, d) pooled first-position vectors."""
        return self.hidden_states(ids)[:, 0, :]

    def encode(self, tokens: list[str]) -> np.ndarray:
        """Single-sequence pooled vector; forward only."""
        if not tokens:
            raise ValueError("empty token sequence")
        if tokens[0] != START:
            raise ValueError(f"sequence must begin with {START!r}")
        if len(tokens) > self.config.max_len:
            # keep the start marker and the tail: the knowledge span sits
            # directly after the start token, so it is dropped first
            tokens = [tokens[0]] + tokens[-(self.config.max_len - 1):]
        with no_grad():
            return self.encode_ids(self.vocab.encode(tokens)[None, :]).data[0]

    def mlm_logits(self, ids: np.ndarray) -> Tensor:
        """(B, L, V) token logits via the projection tied to the embeddings."""
        return self.hidden_states(ids) @ self.params["emb"].swap_last_axes()


def build_sequence(
    knowledge: str,
    question: str,
    option: str,
    vocab: Vocab | None = None,
    max_len: int = 256,
) -> list[str]:
    """[start] K [sep] Q a [sep]; knowledge tokens are dropped first when
    the sequence would exceed ``max_len``, question/answer only as a last
    resort (from the end, keeping the closing separator)."""
    del vocab  # tokens stay strings; ids are assigned at encode time
    k_tokens = encoder_tokens(knowledge)
    q_tokens = encoder_tokens(question)
    a_tokens = encoder_tokens(option)
    overhead = 3  # start + two separators
    base = overhead + len(q_tokens) + len(a_tokens)
    if base > max_len:
        qa = (q_tokens + a_tokens)[: max_len - overhead]
        return [START, SEP, *qa, SEP]
    k_tokens = k_tokens[: max_len - base]
    return [START, *k_tokens, SEP, *q_tokens, *a_tokens, SEP]


def pad_batch(sequences: list[np.ndarray], pad_id: int) -> np.ndarray:
    """Right-pad id sequences to a (B, max_len_in_batch) int array."""
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), pad_id, dtype=np.int64)
    for row, seq in enumerate(sequences):
        out[row, : len(seq)] = seq
    return out


# ---------------------------------------------------------------------------
# Continued training on a knowledge corpus (masked-token objective)
# ---------------------------------------------------------------------------

def mlm_batch_loss(
    model: EncoderModel, ids: np.ndarray, mask: np.ndarray
) -> Tensor | None:
    """Cross-entropy at masked positions; None when nothing is masked.

    ``mask`` flags the positions to hide; inputs get the mask token there
    and the model must recover the original ids.
    """
    if not mask.any():
        return None
    masked_ids = np.where(mask, model.vocab.mask_id, ids)
    logp = ad.log_softmax(model.mlm_logits(masked_ids), axis=-1)
    onehot = np.zeros((*ids.shape, len(model.vocab)))
    rows, cols = np.nonzero(mask)
    onehot[rows, cols, ids[rows, cols]] = 1.0
    return -(logp * Tensor(onehot)).sum() / len(rows)


def _adjacent_pairs(corpus: KnowledgeCorpus) -> list[tuple[int, int]]:
    if not corpus.paragraphs:
        return []
    return [
        (i, i + 1) for lo, hi in corpus.paragraphs for i in range(lo, hi - 1)
    ]


def revision_train(
    model: EncoderModel,
    corpus: KnowledgeCorpus,
    config: TrainConfig,
    loss_log: list[float] | None = None,
) -> EncoderModel:
    """Continue training the encoder on a knowledge corpus, in place.

    Every token is masked independently with ``config.mask_prob``; batches
    with no masked position are skipped.  When the corpus carries
    paragraph structure, an adjacent-sentence objective runs alongside:
    a throwaway linear probe classifies whether two sentences were
    neighbors, and its parameters are discarded afterwards.
    """
    rng = np.random.default_rng(config.seed)
    vocab = model.vocab
    sequences = [
        vocab.encode([START, *encoder_tokens(s.text), SEP][: model.config.max_len])
        for s in corpus.sentences
    ]
    pairs = _adjacent_pairs(corpus)
    nsp_params = {}
    if pairs:
        nsp_params = {
            "nsp_w": Tensor(rng.normal(0.0, 0.1, size=(model.config.d, 1)), requires_grad=True),
            "nsp_b": Tensor(np.zeros(1), requires_grad=True),
        }
    opt = SGD({**model.params, **nsp_params}, lr=config.lr, momentum=config.momentum)

    for _ in range(config.epochs):
        order = rng.permutation(len(sequences))
        for lo in range(0, len(order), config.batch_size):
            chunk = [sequences[i] for i in order[lo : lo + config.batch_size]]
            ids = pad_batch(chunk, vocab.pad_id)
            maskable = ids >= vocab.first_word_id
            mask = (rng.random(ids.shape) < config.mask_prob) & maskable
            loss = mlm_batch_loss(model, ids, mask)
            if loss is None:
                continue
            if loss_log is not None:
                loss_log.append(loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
        if pairs:
            _nsp_epoch(model, corpus, sequences, pairs, nsp_params, opt, rng, config)
    return model


def _nsp_epoch(model, corpus, sequences, pairs, nsp_params, opt, rng, config):
    n = len(corpus.sentences)
    examples = []
    for a, b in pairs:
        examples.append((a, b, 1))
        if n <= 2:
            continue  # no sentence left to serve as a negative
        j = int(rng.integers(n))
        while j in (a, a + 1):
            j = int(rng.integers(n))
        examples.append((a, j, 0))
    order = rng.permutation(len(examples))
    for lo in range(0, len(order), config.batch_size):
        batch = [examples[i] for i in order[lo : lo + config.batch_size]]
        seqs = [
            np.concatenate([sequences[a], sequences[b][1:]])[: model.config.max_len]
            for a, b, _ in batch
        ]
        ids = pad_batch(seqs, model.vocab.pad_id)
        pooled = model.encode_ids(ids)
        z = pooled @ nsp_params["nsp_w"] + nsp_params["nsp_b"]  # (B, 1)
        logits = ad.concat([Tensor(np.zeros_like(z.data)), z], axis=1)
        loss = cross_entropy(logits, np.array([y for _, _, y in batch]))
        opt.zero_grad()
        loss.backward()
        opt.step()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def encoder_to_bytes(model: EncoderModel) -> bytes:
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _VERSION)
    out += struct.pack("<IIdd", model.config.d, model.config.max_len,
                       model.config.ln_eps, model.config.init_scale)
    out += struct.pack("<I", len(model.vocab))
    for token in model.vocab.tokens:
        raw = token.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
    out += struct.pack("<I", len(model.params))
    for name in sorted(model.params):
        raw = name.encode("utf-8")
        data = model.params[name].data
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += np.ascontiguousarray(data, dtype="<f8").tobytes()
    return bytes(out)


def save_encoder(model: EncoderModel, path: str | Path) -> None:
    Path(path).write_bytes(encoder_to_bytes(model))


def encoder_from_bytes(data: bytes, source: str = "<bytes>") -> EncoderModel:
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{source}: truncated checkpoint")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4) != _MAGIC:
        raise CheckpointError(f"{source}: not an encoder checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    d, max_len, ln_eps, init_scale = struct.unpack("<IIdd", take(24))
    config = EncoderConfig(d=d, max_len=max_len, ln_eps=ln_eps, init_scale=init_scale)
    (n_tokens,) = struct.unpack("<I", take(4))
    tokens = []
    for _ in range(n_tokens):
        (ln,) = struct.unpack("<I", take(4))
        tokens.append(take(ln).decode("utf-8"))
    vocab = Vocab(tokens)
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
    if off != len(data):
        raise CheckpointError(f"{source}: trailing bytes after checkpoint data")
    if set(params) != set(EncoderModel.PARAM_SHAPES):
        raise CheckpointError(f"{source}: unexpected parameter set")
    return EncoderModel(vocab, config, params)


def load_encoder(path: str | Path) -> EncoderModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return encoder_from_bytes(data, source=str(path))
