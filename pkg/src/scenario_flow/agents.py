"""Annotator and judge agents.

The annotator turns a scenario's metadata and statistical report into a
one-paragraph prompt. The judge scores how well a series matches the
metadata a prompt was written from, on a 1-5 scale, and ``mjas``
averages those scores over a set.

Both agents only ever see summary statistics and labels, never the raw
numeric series; ``build_annotator_prompt`` renders the instruction an
external language-model client would receive in place of the built-in
template.
"""

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .common import logger, write_jsonl
from .scenarios import (
    DIP_FAR_HOURS,
    DIP_NEAR_HOURS,
    SHAPE_CORRELATION_BANDS,
    VOLATILITIES,
    Metadata,
    Scenario,
    StatReport,
    clock,
    detect_dip,
    detrended_marr,
    infer_kind,
    load_dataset,
    save_dataset,
    shape_correlation,
    stat_report,
    volatility_class,
)
from .text_encoding import (
    REFERENCE_DIM,
    ReferenceEncoder,
    Vocabulary,
    build_vocabulary,
    export_embeddings,
)

__all__ = [
    "ANNOTATOR_LEXICON",
    "PEAK_BANDS",
    "JudgeVerdict",
    "Annotator",
    "Judge",
    "TemplateAnnotator",
    "RuleJudge",
    "default_vocabulary",
    "annotate",
    "build_annotator_prompt",
    "judge",
    "mjas",
    "write_verdicts",
    "print_judge_report",
    "run_annotate",
    "run_judge",
]


# Every word the template annotator can emit, plus a few prompt words
# commonly written by hand ("low peak", "high volatility").
ANNOTATOR_LEXICON = (
    "a", "an", "and", "around", "at", "broad", "day", "demand", "dip", "distinct",
    "evening", "expect", "holds", "load", "midday", "morning", "output", "peak",
    "peaking", "peaks", "plateau", "profile", "shows", "sudden", "through", "with",
    "sunny", "clouds", "cloudy", "rainy", "stormy",
    "stable", "moderate", "high", "low", "volatility",
    "industrial", "residential", "pv", "solar",
)

# |measured peak - target peak| upper bound -> score.
PEAK_BANDS = ((0.05, 5), (0.10, 4), (0.20, 3), (0.35, 2))


@dataclass
class JudgeVerdict:
    score: int  # 1-5
    components: dict[str, int] = field(default_factory=dict)
    justification: str = ""

    def to_record(self, record_id: str) -> dict:
        return {"id": record_id, "score": self.score, "components": self.components,
                "justification": self.justification}


class Annotator(Protocol):
    def annotate(self, scenario: Scenario, report: StatReport) -> str: ...


class Judge(Protocol):
    def judge(self, series, metadata: Metadata) -> JudgeVerdict: ...


def default_vocabulary() -> Vocabulary:
    """Vocabulary covering every prompt the template annotator writes."""
    return build_vocabulary(ANNOTATOR_LEXICON)


# --- Annotator ---------------------------------------------------------------------


class TemplateAnnotator:
    """Deterministic sentence templates over labels and the statistical report."""

    def annotate(self, scenario: Scenario, report: StatReport) -> str:
        meta = scenario.metadata
        length = scenario.length
        when = clock(meta.peak_time_index, length)
        peak = report.overall.max
        if infer_kind(meta) == "pv":
            weather = (meta.weather or "sunny").replace("_", " ")
            text = f"A {weather} day with {meta.volatility} output, peaking at {peak:.2f} around {when}."
            if meta.shape == "plateau":
                text += " Output holds a broad plateau through midday."
        else:
            text = (f"A {meta.user_type} load profile with {meta.volatility} demand, "
                    f"peaking at {peak:.2f} around {when}.")
            if meta.shape == "double_peak":
                text += " Demand shows distinct morning and evening peaks."
        if meta.dip_at is not None:
            text += f" Expect a sudden dip at {clock(meta.dip_at, length)}."
        return text


def annotate(s: Scenario, report: StatReport | None = None,
             annotator: Annotator | None = None) -> str:
    return (annotator or TemplateAnnotator()).annotate(s, report or stat_report(s))


def build_annotator_prompt(scenario: Scenario, report: StatReport) -> str:
    """Instruction text for an external language-model annotator.

    Numbers are given as rounded summary statistics only; a raw series
    would be split into meaningless digit fragments by a tokenizer.
    """
    meta = scenario.metadata
    kind = "photovoltaic generation" if scenario.kind == "pv" else "electric load"
    g = report.overall
    lines = [
        "You are a power-systems analyst writing a one-paragraph description of a "
        f"daily {kind} scenario for a scenario-generation dataset.",
        "",
        "Domain knowledge:",
        "- Values are normalised to [0, 1] over one day starting at 00:00.",
        "- Volatility classes by detrended mean absolute ramp rate: "
        "stable < 0.01, moderate < 0.04, high otherwise.",
        "- Mention the weather or user type, the volatility class, the peak value "
        "and its clock time, and any sudden dip event.",
        "",
        "Statistical report:",
        f"- max {g.max:.2f}, min {g.min:.2f}, mean {g.mean:.2f}, std {g.std:.2f}, "
        f"ramp rate {g.marr:.3f}",
    ]
    for name, seg in report.segments.items():
        lines.append(f"- {name}: mean {seg.mean:.2f}, max {seg.max:.2f}")
    lines += ["", "Metadata:"]
    labels = {
        "weather": meta.weather,
        "user type": meta.user_type,
        "volatility": meta.volatility,
        "shape": meta.shape,
        "peak time": clock(meta.peak_time_index, scenario.length),
        "dip at": None if meta.dip_at is None else clock(meta.dip_at, scenario.length),
    }
    lines += [f"- {k}: {v}" for k, v in labels.items() if v is not None]
    return "\n".join(lines) + "\n"


# --- Judge -------------------------------------------------------------------------


def _banded(value: float, bands: Sequence[tuple[float, int]], *, upper: bool) -> int:
    for bound, score in bands:
        if (value <= bound) if upper else (value >= bound):
            return score
    return 1


def _volatility_score(measured: str, target: str) -> int:
    gap = abs(VOLATILITIES.index(measured) - VOLATILITIES.index(target))
    return (5, 3, 1)[gap]


class RuleJudge:
    """Rubric judge built on the generator's own measurement primitives."""

    def judge(self, series, metadata: Metadata) -> JudgeVerdict:
        if metadata is None:
            raise ValueError("judge needs the prompt's metadata")
        x = np.asarray(series, dtype=np.float64)
        length = x.shape[0]
        steps_per_hour = length / 24.0

        measured_peak = float(x.max())
        peak_gap = abs(measured_peak - metadata.peak)
        measured_class = volatility_class(x)
        corr = shape_correlation(x, metadata)

        components = {
            "peak_score": _banded(peak_gap, PEAK_BANDS, upper=True),
            "volatility_score": _volatility_score(measured_class, metadata.volatility),
            "shape_score": _banded(corr, SHAPE_CORRELATION_BANDS, upper=False),
        }
        notes = [
            f"peak {measured_peak:.3f} vs target {metadata.peak:.3f} "
            f"(gap {peak_gap:.3f}) -> {components['peak_score']}",
            f"volatility {measured_class} (ramp rate {detrended_marr(x):.4f}) vs "
            f"{metadata.volatility} -> {components['volatility_score']}",
            f"{metadata.shape} correlation {corr:.3f} -> {components['shape_score']}",
        ]
        if metadata.dip_at is not None:
            offset = detect_dip(x, metadata.dip_at)
            if offset is not None and offset <= round(DIP_NEAR_HOURS * steps_per_hour):
                event_score = 5
            elif offset is not None and offset <= round(DIP_FAR_HOURS * steps_per_hour):
                event_score = 3
            else:
                event_score = 1
            components["event_score"] = event_score
            found = "none found" if offset is None else f"found {offset} steps away"
            notes.append(f"dip at {clock(metadata.dip_at, length)}: {found} -> {event_score}")

        mean = sum(components.values()) / len(components)
        score = int(math.floor(mean + 0.5))
        return JudgeVerdict(score=score, components=components, justification="; ".join(notes))


def judge(x, target_prompt_metadata: Metadata, judge_agent: Judge | None = None) -> JudgeVerdict:
    return (judge_agent or RuleJudge()).judge(x, target_prompt_metadata)


def mjas(samples: Iterable[tuple], judge_agent: Judge | None = None) -> float:
    """Mean judge score over ``(series, metadata)`` pairs."""
    scores = [judge(x, meta, judge_agent).score for x, meta in samples]
    if not scores:
        raise ValueError("mjas needs at least one sample")
    return sum(scores) / len(scores)


# --- Files and commands ----------------------------------------------------------


def write_verdicts(verdicts: Iterable[tuple[str, JudgeVerdict]], path: Path) -> int:
    return write_jsonl(Path(path), (v.to_record(rid) for rid, v in verdicts))


def print_judge_report(verdicts: Sequence[JudgeVerdict], score: float) -> None:
    """Print the score histogram and MJAS to stdout."""
    print(f"\n{'='*60}")
    print("JUDGE REPORT")
    print(f"{'='*60}")
    print(f"Samples judged:    {len(verdicts):>10,}")
    print(f"MJAS:              {score:>10.3f}")
    print(f"{'-'*60}")
    for value in range(5, 0, -1):
        count = sum(1 for v in verdicts if v.score == value)
        print(f"  score {value}:         {count:>10,}")
    print(f"{'='*60}\n")


def run_annotate(
    dataset_path: Path,
    output_dir: Path,
    *,
    embedding_dim: int = REFERENCE_DIM,
    seed: int = 0,
) -> int:
    """Write prompts, the vocabulary and reference embeddings for a dataset."""
    if not dataset_path.is_file():
        logger.error(f"Dataset not found: {dataset_path}")
        return 1
    scenarios = load_dataset(dataset_path)
    if not scenarios:
        logger.error(f"Dataset is empty: {dataset_path}")
        return 1

    annotator = TemplateAnnotator()
    vocabulary = default_vocabulary()
    encoder = ReferenceEncoder(vocabulary, dim=embedding_dim, seed=seed)
    annotated = []
    embeddings = {}
    for s in scenarios:
        prompt = annotator.annotate(s, stat_report(s))
        annotated.append(Scenario(s.id, s.series, s.kind, s.metadata, prompt))
        embeddings[s.id] = encoder.encode(prompt)

    annotated_path = output_dir / "annotated.jsonl"
    embeddings_path = output_dir / "embeddings.jsonl"
    vocab_path = output_dir / "vocab.json"
    save_dataset(annotated, annotated_path)
    export_embeddings(embeddings, embeddings_path)
    vocabulary.save(vocab_path)
    logger.info(f"Annotated {len(annotated):,} scenarios: {annotated_path}")
    logger.info(f"Wrote {embedding_dim}-wide reference embeddings: {embeddings_path}")
    return 0


def run_judge(generated_path: Path, output_dir: Path) -> int:
    """Judge generated series against the metadata of their prompts."""
    if not generated_path.is_file():
        logger.error(f"Generated scenarios not found: {generated_path}")
        return 1
    scenarios = load_dataset(generated_path)
    if not scenarios:
        logger.error(f"No generated scenarios in: {generated_path}")
        return 1

    agent = RuleJudge()
    verdicts = [(s.id, agent.judge(s.series, s.metadata)) for s in scenarios]
    score = sum(v.score for _, v in verdicts) / len(verdicts)

    verdicts_path = output_dir / "verdicts.jsonl"
    summary_path = output_dir / "judge-summary.json"
    write_verdicts(verdicts, verdicts_path)
    summary = {"version": 1, "mjas": score, "count": len(verdicts),
               "histogram": {str(k): sum(1 for _, v in verdicts if v.score == k)
                             for k in range(1, 6)}}
    summary_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print_judge_report([v for _, v in verdicts], score)
    logger.info(f"Wrote verdicts to: {verdicts_path}")
    return 0
