"""Two-step localization: keep confident classes, then cut the foreground
attention into runs and score each run against the class activation sequence."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .errors import ValidationError
from .evaluation import ranking_key, temporal_iou
from .model import ForwardTrace
from .numerics import softmax_rows


@dataclass(frozen=True)
class Proposal:
    class_id: int
    start: int
    end: int
    score: float
    video_id: str = ""

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValidationError(f"invalid proposal interval [{self.start}, {self.end}]")
        if not math.isfinite(self.score):
            raise ValidationError("proposal score must be finite")


@dataclass(frozen=True)
class InferenceConfig:
    eta_cls: float = 0.1
    eta_act: float | None = None  # None: per-video mean of the attention
    nms_iou: float = 0.3
    theta: float = 0.3
    segment_seconds: float = 16 / 30

    def __post_init__(self):
        for name in ("eta_cls", "nms_iou", "theta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        if self.eta_act is not None and not 0.0 <= self.eta_act <= 1.0:
            raise ValidationError(f"eta_act must lie in [0, 1] or be 'mean', got {self.eta_act}")
        if self.segment_seconds <= 0:
            raise ValidationError("segment_seconds must be > 0")


def class_activation_sequence(trace: ForwardTrace) -> np.ndarray:
    return softmax_rows(trace.C_seg)


def select_classes(y_hat: np.ndarray, eta_cls: float) -> list[int]:
    return [int(c) for c in np.flatnonzero(np.asarray(y_hat) >= eta_cls)]


def generate_proposals(a: np.ndarray, eta_act: float) -> list[tuple[int, int]]:
    """Maximal runs of consecutive segments with ``a(t) >= eta_act``."""
    above = np.concatenate([[False], np.asarray(a) >= eta_act, [False]])
    edges = np.flatnonzero(above[1:] != above[:-1])
    return [(int(s), int(e) - 1) for s, e in zip(edges[::2], edges[1::2])]


def score_proposal(
    start: int,
    end: int,
    class_id: int,
    streams: Sequence[tuple[np.ndarray, np.ndarray]],
    theta: float = 0.3,
) -> float:
    """Mean over the interval of attention-weighted class scores.

    ``streams`` holds ``(a, C_bar)`` for one stream, or RGB then FLOW; with
    two streams RGB is weighted by ``theta`` and FLOW by ``1 - theta``.
    """
    if not 1 <= len(streams) <= 2:
        raise ValidationError(f"expected one or two streams, got {len(streams)}")
    if len(streams) == 2 and len(streams[0][0]) != len(streams[1][0]):
        raise ValidationError("streams must share one segmentation")
    span = slice(start, end + 1)
    terms = [np.asarray(a)[span] * np.asarray(cas)[span, class_id] for a, cas in streams]
    if len(terms) == 1:
        fused = terms[0]
    else:
        # same as theta*rgb + (1-theta)*flow, but exact when the streams coincide
        fused = terms[1] + theta * (terms[0] - terms[1])
    return float(np.sum(fused) / (end - start + 1))


def nms(proposals: Sequence[Proposal], iou_threshold: float) -> list[Proposal]:
    """Greedy suppression for proposals of a single class."""
    keep: list[Proposal] = []
    for p in sorted(proposals, key=ranking_key):
        if all(temporal_iou(p, k) <= iou_threshold for k in keep):
            keep.append(p)
    return keep


def localize(traces: Sequence[ForwardTrace], config: InferenceConfig, video_id: str = "") -> list[Proposal]:
    """Proposals for one video from one (RGB) or two (RGB, FLOW) stream traces."""
    if not 1 <= len(traces) <= 2:
        raise ValidationError(f"expected one or two stream traces, got {len(traces)}")
    y_hat = np.mean([t.y_hat for t in traces], axis=0)
    classes = select_classes(y_hat, config.eta_cls)
    if not classes:
        return []
    streams = [(t.a, class_activation_sequence(t)) for t in traces]

    runs: list[tuple[int, int]] = []
    for t in traces:
        eta = float(np.mean(t.a)) if config.eta_act is None else config.eta_act
        for run in generate_proposals(t.a, eta):
            if run not in runs:
                runs.append(run)

    out: list[Proposal] = []
    for c in classes:
        scored = [Proposal(c, s, e, score_proposal(s, e, c, streams, config.theta), video_id) for s, e in runs]
        out.extend(nms(scored, config.nms_iou))
    return out


# --------------------------------------------------------------------------
# proposal file: one tab-separated record per line

PROPOSAL_COLUMNS = ("video_id", "class_id", "start_segment", "end_segment", "start_seconds", "end_seconds", "score")


def write_proposals(out: TextIO, proposals: Sequence[Proposal], segment_seconds: float) -> None:
    out.write("# " + "\t".join(PROPOSAL_COLUMNS) + "\n")
    for p in proposals:
        fields = (
            p.video_id, str(p.class_id), str(p.start), str(p.end),
            repr(p.start * segment_seconds), repr((p.end + 1) * segment_seconds), repr(p.score),
        )
        out.write("\t".join(fields) + "\n")


def read_proposals(path: str | Path, unit: str = "segments") -> list:
    """Parse a proposal file. With ``unit="seconds"`` the time columns are used."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != len(PROPOSAL_COLUMNS):
            raise ValidationError(f"{path}:{lineno}: expected {len(PROPOSAL_COLUMNS)} columns, got {len(cols)}")
        vid, cls, s, e, s_sec, e_sec, score = cols
        if unit == "seconds":
            out.append(TimedProposal(int(cls), float(s_sec), float(e_sec), float(score), vid))
        else:
            out.append(Proposal(int(cls), int(s), int(e), float(score), vid))
    return out


@dataclass(frozen=True)
class TimedProposal:
    """A proposal expressed in seconds, for evaluation against external annotations."""

    class_id: int
    start: float
    end: float
    score: float
    video_id: str = ""
