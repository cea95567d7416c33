"""End-to-end glue: train per stream, localize held-out videos, score them."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import DatasetManifest, VideoRecord
from .evaluation import MapResult, attention_auc, mean_ap
from .inference import Proposal, TimedProposal, localize
from .losses import AblationFlags
from .model import ModelParams, forward
from .training import TrainResult, train

log = logging.getLogger(__name__)

# ablation grid, one row per flag combination: (sparsity, diversity, homogeneity, self-attention)
ABLATION_ROWS = (
    AblationFlags(False, False, False, False),
    AblationFlags(True, False, False, False),
    AblationFlags(True, True, False, False),
    AblationFlags(True, False, True, False),
    AblationFlags(True, True, True, False),
    AblationFlags(True, True, True, True),
)


def stream_names(stream: str) -> tuple[str, ...]:
    return ("rgb", "flow") if stream == "both" else (stream,)


def train_streams(
    manifest: DatasetManifest,
    config: RunConfig,
    streams: Sequence[str],
    flags: AblationFlags | None = None,
    seed: int | None = None,
    split: str = "train",
) -> dict[str, TrainResult]:
    """Train one independent model per stream on the given split."""
    records = manifest.split(split)
    labels = [np.asarray(r.label, dtype=np.float64) for r in records]
    out = {}
    for stream in streams:
        feats = manifest.load_stream(records, stream)
        dims = config.model.dims(D=feats[0].shape[1], C=manifest.num_classes)
        train_cfg = config.train.config(stream, flags=flags, seed=seed)
        log.info("training %s stream on %d videos for %d steps", stream, len(records), train_cfg.steps)
        out[stream] = train(list(zip(feats, labels)), dims, train_cfg)
    return out


@dataclass
class LocalizationRun:
    proposals: list[Proposal]
    attentions: dict[str, list[np.ndarray]]  # stream -> per-video a


def run_localization(
    manifest: DatasetManifest,
    records: Sequence[VideoRecord],
    models: dict[str, ModelParams],
    config: RunConfig,
    use_self_attention: bool | None = None,
) -> LocalizationRun:
    sa = config.train.self_attention if use_self_attention is None else use_self_attention
    inf_cfg = config.inference.config(manifest.segment_seconds)
    streams = list(models)
    features = {s: manifest.load_stream(records, s) for s in streams}

    def one(i: int):
        traces = [forward(features[s][i], models[s], sa) for s in streams]
        return localize(traces, inf_cfg, records[i].video_id), [t.a for t in traces]

    workers = config.runtime.worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(len(records))))
    else:
        results = [one(i) for i in range(len(records))]
    proposals = [p for props, _ in results for p in props]
    attentions = {s: [atts[k] for _, atts in results] for k, s in enumerate(streams)}
    return LocalizationRun(proposals, attentions)


def pooled_attention_auc(records: Sequence[VideoRecord], attentions: Sequence[np.ndarray]) -> float:
    """ROC AUC of the attention over every labelled segment of ``records``."""
    labels = np.concatenate([r.segment_labels for r in records])
    return attention_auc(np.concatenate(attentions), labels)


def to_seconds(p: Proposal, segment_seconds: float) -> TimedProposal:
    return TimedProposal(p.class_id, p.start * segment_seconds, (p.end + 1) * segment_seconds, p.score, p.video_id)


def evaluate(manifest: DatasetManifest, records: Sequence[VideoRecord], proposals: Sequence) -> MapResult:
    """mAP table in the manifest's unit; segment proposals are converted for 'seconds'."""
    if manifest.unit == "seconds":
        proposals = [to_seconds(p, manifest.segment_seconds) if isinstance(p, Proposal) else p for p in proposals]
        return mean_ap(proposals, manifest.ground_truth(records), inclusive=False)
    return mean_ap(proposals, manifest.ground_truth(records), inclusive=True)


def train_and_evaluate(
    manifest: DatasetManifest,
    config: RunConfig,
    streams: Sequence[str],
    flags: AblationFlags | None = None,
    seed: int | None = None,
) -> tuple[MapResult, LocalizationRun, dict[str, TrainResult]]:
    flags = flags or config.train.flags()
    results = train_streams(manifest, config, streams, flags, seed)
    test = manifest.split("test")
    run = run_localization(manifest, test, {s: r.params for s, r in results.items()}, config, flags.self_attention)
    return evaluate(manifest, test, run.proposals), run, results
