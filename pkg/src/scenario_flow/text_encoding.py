"""Text conditioning: tokenisation, embeddings, and embedding file IO.

A prompt reaches the velocity network only as a ``TextEmbedding``: a
``[M, D]`` matrix plus a token mask. Two sources produce them:

- ``ReferenceEncoder``: an offline, deterministic stand-in for a frozen
  language model. Each vocabulary token maps to a unit-norm Gaussian
  vector seeded from a SHA-256 of ``(seed, token)``, and a small
  sinusoidal position code is added. Same prompt, same matrix, on any
  platform.
- ``ImportedEncoder``: embeddings precomputed elsewhere (e.g. hidden
  states of a real LLM), loaded from a newline-delimited JSON file keyed
  by record id.

Embedding file format, one object per line::

    {"id": "pv-00003", "m": 12, "d": 768, "data": [m*d floats, row-major]}
"""

import json
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from typing_extensions import Self

from .common import FormatError, derive_seed, read_jsonl, write_jsonl

__all__ = [
    "M_MAX",
    "REFERENCE_DIM",
    "IMPORTED_DIM",
    "PAD_TOKEN",
    "UNK_TOKEN",
    "Vocabulary",
    "TokenSequence",
    "TextEmbedding",
    "EmbeddingSource",
    "ReferenceEncoder",
    "ImportedEncoder",
    "build_vocabulary",
    "split_words",
    "tokenize",
    "token_vector",
    "encode_reference",
    "mean_pool",
    "import_embeddings",
    "export_embeddings",
    "collate_embeddings",
]


M_MAX = 64
REFERENCE_DIM = 64
IMPORTED_DIM = 768
MIN_REFERENCE_DIM = 8

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

POSITION_SCALE = 0.1

_WORD_SPLIT = re.compile(r"[\W_]+")


# --- Vocabulary and tokens -----------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token list; index 0 is padding, index 1 is the unknown token."""

    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        if tokens[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise FormatError(f"vocabulary must start with {PAD_TOKEN!r}, {UNK_TOKEN!r}")
        if len(set(tokens)) != len(tokens):
            raise FormatError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return 1

    def id_of(self, word: str) -> int:
        return self._index.get(word, self.unk_id)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path: Path) -> None:
        Path(path).write_text(
            json.dumps({"version": 1, "tokens": list(self.tokens)}, indent=2) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: Path) -> Self:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: vocabulary is not valid JSON ({e})") from e
        if data.get("version") != 1 or not isinstance(data.get("tokens"), list):
            raise FormatError(f"{path}: unsupported vocabulary file")
        return cls(tuple(data["tokens"]))


def build_vocabulary(words: Iterable[str] = ()) -> Vocabulary:
    """Vocabulary of ``words`` plus every one- and two-digit numeral.

    Numerals cover clock times (``12:40``) and two-decimal peak values
    (``0.80``) once punctuation is split off.
    """
    numerals = [str(i) for i in range(10)] + [f"{i:02d}" for i in range(100)]
    seen: dict[str, None] = {}
    for word in [*(w.lower() for w in words), *numerals]:
        if word and word not in (PAD_TOKEN, UNK_TOKEN):
            seen.setdefault(word, None)
    return Vocabulary((PAD_TOKEN, UNK_TOKEN, *seen))


@dataclass(frozen=True)
class TokenSequence:
    """Token ids and their canonical strings (unknown words become ``<unk>``)."""

    ids: tuple[int, ...]
    tokens: tuple[str, ...]

    @property
    def m(self) -> int:
        return len(self.ids)


def split_words(prompt: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return [w for w in _WORD_SPLIT.split(prompt.lower()) if w]


def tokenize(prompt: str, vocabulary: Vocabulary, m_max: int = M_MAX) -> TokenSequence:
    words = split_words(prompt)
    if not words:
        raise ValueError("prompt is empty")
    ids = tuple(vocabulary.id_of(w) for w in words[:m_max])
    return TokenSequence(ids=ids, tokens=tuple(vocabulary.token_of(i) for i in ids))


# --- Embeddings ----------------------------------------------------------------


@dataclass
class TextEmbedding:
    """Rows of a text embedding and a padding mask of length ``M_MAX``."""

    matrix: np.ndarray  # [M, D] float64
    mask: np.ndarray  # [m_max] bool, True = real token
    source: str = "reference"  # reference | imported

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.matrix.ndim != 2:
            raise FormatError(f"embedding matrix must be 2-D, got shape {self.matrix.shape}")
        if self.matrix.shape[0] > self.mask.shape[0]:
            raise FormatError(
                f"embedding has {self.matrix.shape[0]} rows but mask holds {self.mask.shape[0]}"
            )
        if not np.isfinite(self.matrix).all():
            raise FormatError("embedding contains non-finite values")

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def row_mask(self) -> np.ndarray:
        return self.mask[: self.m]

    @classmethod
    def from_rows(cls, matrix: np.ndarray, source: str, m_max: int = M_MAX) -> Self:
        matrix = np.asarray(matrix, dtype=np.float64)
        mask = np.zeros(max(m_max, matrix.shape[0]), dtype=bool)
        mask[: matrix.shape[0]] = True
        return cls(matrix=matrix, mask=mask, source=source)


def token_vector(token: str, d: int, seed: int = 0) -> np.ndarray:
    """Unit-norm Gaussian vector for one token, seeded by SHA-256 of (seed, token)."""
    rng = np.random.default_rng(derive_seed(seed, "token", token))
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _position_code(m: int, d: int) -> np.ndarray:
    positions = np.arange(m, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angles = positions / (10000.0 ** (2.0 * i / d))
    code = np.zeros((m, d))
    code[:, 0 : 2 * (d // 2) : 2] = np.sin(angles)
    code[:, 1 : 2 * (d // 2) : 2] = np.cos(angles)
    return POSITION_SCALE * code


def encode_reference(
    tokens: TokenSequence, d: int = REFERENCE_DIM, seed: int = 0, m_max: int = M_MAX
) -> TextEmbedding:
    """Deterministic hash-seeded embedding of a token sequence."""
    if d < MIN_REFERENCE_DIM:
        raise ValueError(f"reference embedding width must be >= {MIN_REFERENCE_DIM}, got {d}")
    rows = np.stack([token_vector(tok, d, seed) for tok in tokens.tokens])
    return TextEmbedding.from_rows(rows + _position_code(tokens.m, d), "reference", m_max)


def mean_pool(e: TextEmbedding) -> np.ndarray:
    """Mean over unmasked rows."""
    rows = e.matrix[e.row_mask]
    if rows.shape[0] == 0:
        raise ValueError("cannot pool an embedding with every row masked")
    return rows.mean(axis=0)


# --- Sources -------------------------------------------------------------------------


class EmbeddingSource(Protocol):
    """Anything that can turn a dataset record into a TextEmbedding."""

    dim: int

    def embedding_for(self, record_id: str, prompt: str | None) -> TextEmbedding: ...


class ReferenceEncoder:
    """Offline encoder: tokenise with a persisted vocabulary, then hash-embed."""

    kind = "reference"

    def __init__(self, vocabulary: Vocabulary, dim: int = REFERENCE_DIM, seed: int = 0,
                 m_max: int = M_MAX):
        if dim < MIN_REFERENCE_DIM:
            raise ValueError(f"reference embedding width must be >= {MIN_REFERENCE_DIM}, got {dim}")
        self.vocabulary = vocabulary
        self.dim = dim
        self.seed = seed
        self.m_max = m_max

    def encode(self, prompt: str) -> TextEmbedding:
        return encode_reference(tokenize(prompt, self.vocabulary, self.m_max),
                                self.dim, self.seed, self.m_max)

    def embedding_for(self, record_id: str, prompt: str | None) -> TextEmbedding:
        if not prompt:
            raise FormatError(f"record {record_id!r} has no prompt; run annotate first")
        return self.encode(prompt)

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "seed": self.seed,
                "vocabulary": list(self.vocabulary.tokens)}


class ImportedEncoder:
    """Lookup of externally computed embeddings by record id."""

    kind = "imported"

    def __init__(self, embeddings: Mapping[str, TextEmbedding]):
        self.embeddings = dict(embeddings)
        dims = {e.dim for e in self.embeddings.values()}
        if len(dims) > 1:
            raise FormatError(f"imported embeddings mix widths: {sorted(dims)}")
        self.dim = dims.pop() if dims else IMPORTED_DIM

    @classmethod
    def from_file(cls, path: Path) -> Self:
        return cls(import_embeddings(path))

    def embedding_for(self, record_id: str, prompt: str | None) -> TextEmbedding:
        try:
            return self.embeddings[record_id]
        except KeyError:
            raise FormatError(f"no imported embedding for prompt id {record_id!r}") from None

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim}


# --- File IO -------------------------------------------------------------------------


def import_embeddings(path: Path, m_max: int = M_MAX) -> dict[str, TextEmbedding]:
    """Load ``{id, m, d, data}`` records; shape or finiteness problems name the record."""
    result: dict[str, TextEmbedding] = {}
    for line_no, record in read_jsonl(Path(path)):
        rid = record.get("id")
        where = f"{path}:{line_no} (id={rid!r})"
        m, d, data = record.get("m"), record.get("d"), record.get("data")
        if not isinstance(rid, str) or not rid:
            raise FormatError(f"{where}: missing string id")
        if not isinstance(m, int) or not isinstance(d, int) or m < 1 or d < 1:
            raise FormatError(f"{where}: m and d must be positive integers")
        if m > m_max:
            raise FormatError(f"{where}: m={m} exceeds the token limit {m_max}")
        if not isinstance(data, list) or len(data) != m * d:
            raise FormatError(f"{where}: expected {m * d} values")
        try:
            values = np.asarray(data, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise FormatError(f"{where}: values are not numbers") from e
        if not np.isfinite(values).all():
            raise FormatError(f"{where}: values must be finite")
        if rid in result:
            raise FormatError(f"{where}: duplicate id")
        result[rid] = TextEmbedding.from_rows(values.reshape(m, d), "imported", m_max)
    return result


def export_embeddings(embeddings: Mapping[str, TextEmbedding], path: Path) -> int:
    """Write embeddings so that ``import_embeddings`` restores them bit-exactly."""
    return write_jsonl(
        Path(path),
        (
            {"id": rid, "m": e.m, "d": e.dim, "data": e.matrix.reshape(-1).tolist()}
            for rid, e in embeddings.items()
        ),
    )


def collate_embeddings(
    embeddings: Sequence[TextEmbedding], dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad to a common token count: returns ``text [B, M, D]`` and ``mask [B, M]``."""
    if not embeddings:
        raise ValueError("no embeddings to collate")
    dims = {e.dim for e in embeddings}
    if len(dims) != 1:
        raise FormatError(f"embeddings mix widths: {sorted(dims)}")
    m = max(e.m for e in embeddings)
    d = dims.pop()
    text = np.zeros((len(embeddings), m, d))
    mask = np.zeros((len(embeddings), m), dtype=bool)
    for i, e in enumerate(embeddings):
        text[i, : e.m] = e.matrix
        mask[i, : e.m] = e.row_mask
    return torch.as_tensor(text, dtype=dtype), torch.as_tensor(mask)
