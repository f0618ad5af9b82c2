"""Linear probes: are scenario attributes linearly decodable from prompt embeddings?

Each embedding is mean-pooled over its real tokens. Continuous labels
get an ordinary least-squares fit scored by R², categorical labels a
one-vs-rest logistic classifier scored by accuracy, both on a fixed
80/20 split. The pooled vectors can also be exported for external
t-SNE or plotting.
"""

import csv
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.linear_model import LinearRegression, LogisticRegression
from sklearn.metrics import accuracy_score, r2_score
from sklearn.model_selection import train_test_split
from sklearn.multiclass import OneVsRestClassifier

from .agents import default_vocabulary
from .common import FormatError, format_float, logger
from .scenarios import Scenario, load_dataset
from .text_encoding import (
    REFERENCE_DIM,
    ImportedEncoder,
    ReferenceEncoder,
    TextEmbedding,
    mean_pool,
)

__all__ = [
    "TASKS",
    "TEST_FRACTION",
    "ProbeResult",
    "linear_probe",
    "probe_attributes",
    "write_probe_csv",
    "export_pooled_vectors",
    "print_probe_report",
    "run_probe",
]


TASKS = ("regression", "classification")
TEST_FRACTION = 0.2
SPLIT_SEED = 0

# attribute -> (task, kinds it applies to)
ATTRIBUTES = {
    "weather": ("classification", ("pv",)),
    "user_type": ("classification", ("load",)),
    "peak": ("regression", ("pv", "load")),
    "volatility": ("classification", ("pv", "load")),
    "shape": ("classification", ("pv", "load")),
}


@dataclass
class ProbeResult:
    attribute: str
    task: str  # regression | classification
    value: float  # R² or held-out accuracy
    n_samples: int

    @property
    def metric(self) -> str:
        return "r2" if self.task == "regression" else "accuracy"


def _split(x: np.ndarray, y: np.ndarray, stratify: bool):
    try:
        return train_test_split(x, y, test_size=TEST_FRACTION, random_state=SPLIT_SEED,
                                stratify=y if stratify else None)
    except ValueError:
        # Too few members per class to stratify.
        return train_test_split(x, y, test_size=TEST_FRACTION, random_state=SPLIT_SEED)


def linear_probe(embeddings: Sequence, labels: Sequence, task: str,
                 attribute: str = "label") -> ProbeResult:
    """Fit and score one linear probe on pooled embedding vectors."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"embeddings must be a [n, D] array, got shape {x.shape}")
    n = x.shape[0]
    if n < 2 or len(labels) != n:
        raise ValueError(f"need at least 2 samples with one label each, got {n} and {len(labels)}")

    if task == "regression":
        y = np.asarray(labels, dtype=np.float64)
        if np.ptp(y) == 0.0:
            raise ValueError(f"{attribute}: regression labels are constant")
        x_train, x_test, y_train, y_test = _split(x, y, stratify=False)
        model = LinearRegression().fit(x_train, y_train)
        if len(y_test) < 2 or np.ptp(y_test) == 0.0:
            logger.warning(f"{attribute}: held-out set too small for R², scoring in-sample")
            x_test, y_test = x, y
        value = float(r2_score(y_test, model.predict(x_test)))
    else:
        y = np.asarray([str(v) for v in labels])
        if len(set(y)) < 2:
            raise ValueError(f"{attribute}: classification needs at least 2 classes")
        x_train, x_test, y_train, y_test = _split(x, y, stratify=True)
        if len(set(y_train)) < 2:
            raise ValueError(f"{attribute}: training split holds a single class")
        model = OneVsRestClassifier(LogisticRegression(max_iter=1000)).fit(x_train, y_train)
        value = float(accuracy_score(y_test, model.predict(x_test)))
    return ProbeResult(attribute=attribute, task=task, value=value, n_samples=n)


def _label(s: Scenario, attribute: str):
    return getattr(s.metadata, attribute)


def probe_attributes(
    scenarios: Sequence[Scenario], embeddings: Mapping[str, TextEmbedding]
) -> list[ProbeResult]:
    """Probe every attribute that applies to the dataset; degenerate ones are skipped."""
    missing = [s.id for s in scenarios if s.id not in embeddings]
    if missing:
        raise FormatError(f"no embedding for {len(missing)} scenario(s), e.g. {missing[0]!r}")
    results = []
    for attribute, (task, kinds) in ATTRIBUTES.items():
        subset = [s for s in scenarios if s.kind in kinds]
        if not subset:
            continue
        vectors = [mean_pool(embeddings[s.id]) for s in subset]
        labels = [_label(s, attribute) for s in subset]
        try:
            results.append(linear_probe(vectors, labels, task, attribute))
        except ValueError as e:
            logger.warning(f"Skipping probe: {e}")
    return results


# --- Export -----------------------------------------------------------------------


def write_probe_csv(results: Sequence[ProbeResult], path: Path) -> int:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["attribute", "task", "metric", "value", "n_samples"])
        for r in results:
            writer.writerow([r.attribute, r.task, r.metric, format_float(r.value), r.n_samples])
    return len(results)


def export_pooled_vectors(
    scenarios: Sequence[Scenario], embeddings: Mapping[str, TextEmbedding], path: Path
) -> int:
    """One row per scenario: labels followed by the pooled embedding vector."""
    rows = [(s, mean_pool(embeddings[s.id])) for s in scenarios if s.id in embeddings]
    dim = rows[0][1].shape[0] if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "kind", "weather", "user_type", "volatility", "shape", "peak",
                         *(f"v{i}" for i in range(dim))])
        for s, vector in rows:
            m = s.metadata
            writer.writerow([s.id, s.kind, m.weather or "", m.user_type or "", m.volatility,
                             m.shape, format_float(m.peak), *(format_float(v) for v in vector)])
    return len(rows)


def print_probe_report(results: Sequence[ProbeResult]) -> None:
    """Print probe scores to stdout."""
    print(f"\n{'='*60}")
    print("LINEAR PROBES")
    print(f"{'='*60}")
    if not results:
        print("No attribute could be probed.")
    for r in results:
        print(f"{r.attribute:<14} {r.task:<16} {r.metric:<9} {r.value:>8.4f}  (n={r.n_samples:,})")
    print(f"{'='*60}\n")


def run_probe(
    dataset_path: Path,
    output_dir: Path,
    *,
    embeddings_path: Path | None = None,
    embedding_dim: int = REFERENCE_DIM,
    seed: int = 0,
) -> int:
    """Probe an annotated dataset using imported or freshly encoded embeddings."""
    if not dataset_path.is_file():
        logger.error(f"Dataset not found: {dataset_path}")
        return 1
    if embeddings_path is not None and not embeddings_path.is_file():
        logger.error(f"Embeddings file not found: {embeddings_path}")
        return 1
    scenarios = load_dataset(dataset_path)

    if embeddings_path is not None:
        source = ImportedEncoder.from_file(embeddings_path)
    else:
        source = ReferenceEncoder(default_vocabulary(), dim=embedding_dim, seed=seed)
    embeddings = {s.id: source.embedding_for(s.id, s.prompt) for s in scenarios}

    results = probe_attributes(scenarios, embeddings)
    probes_path = output_dir / "probes.csv"
    pooled_path = output_dir / "pooled-embeddings.csv"
    write_probe_csv(results, probes_path)
    export_pooled_vectors(scenarios, embeddings, pooled_path)
    print_probe_report(results)
    logger.info(f"Wrote {len(results)} probe result(s) to: {probes_path}")
    logger.info(f"Wrote pooled vectors to: {pooled_path}")
    return 0
