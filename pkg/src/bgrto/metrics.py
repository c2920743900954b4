"""Evaluation metrics (gIoU / cIoU) and the structured metrics CSV sink."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import models, objectives
from .autodiff import NamedParams
from .env import ActionGrammar, GridScene, parse_action_tokens

CSV_COLUMNS = (
    "step",
    "epoch",
    "mode",
    "mean_reward",
    "validity_rate",
    "giou",
    "ciou",
    "policy_obj",
    "tool_loss",
    "kl",
    "grad_norm_policy",
    "grad_norm_tool",
    "wall_ms",
    "seed",
)


class MetricsUsageError(ValueError):
    pass


@dataclass
class EvalReport:
    per_sample_iou: list[float]
    giou: float
    ciou: float
    mean_reward: float
    validity_rate: float

    @staticmethod
    def empty() -> "EvalReport":
        return EvalReport(per_sample_iou=[], giou=0.0, ciou=0.0, mean_reward=0.0, validity_rate=0.0)

    def to_json_dict(self) -> dict:
        return {
            "giou": self.giou,
            "ciou": self.ciou,
            "mean_reward": self.mean_reward,
            "validity_rate": self.validity_rate,
            "samples": len(self.per_sample_iou),
        }


def evaluate(
    policy: NamedParams,
    tool: NamedParams,
    scenes: list[GridScene],
    grammar: ActionGrammar,
    filter_enabled: bool = True,
    threshold: float = 0.5,
    iou_weight: float = objectives.REWARD_IOU_WEIGHT,
    format_weight: float = objectives.REWARD_FORMAT_WEIGHT,
) -> EvalReport:
    """Greedy-decode every scene and score the resulting masks.

    Invalid prompts contribute IoU 0 (an empty prediction).  gIoU is the mean
    of per-sample IoUs; cIoU is cumulative intersection over cumulative union,
    with both-empty samples excluded from the sums (they score 1 in gIoU).
    """
    if not scenes:
        raise MetricsUsageError("evaluate requires at least one scene")
    ious: list[float] = []
    inter_sum = 0
    union_sum = 0
    rewards = []
    valid_count = 0
    for scene in scenes:
        tokens = models.greedy_decode(policy, scene, grammar)
        prompt = parse_action_tokens(tokens, grammar)
        gt = scene.official_gt
        if prompt is None:
            rewards.append(0.0)
            inter = 0
            union = int(np.count_nonzero(gt))
        else:
            valid_count += 1
            mask = objectives.predicted_mask(tool, scene, prompt, filter_enabled, threshold)
            rewards.append(objectives.reward_for_mask(mask, gt, iou_weight, format_weight).total)
            inter = int(np.count_nonzero(mask & gt.astype(bool)))
            union = int(np.count_nonzero(mask | gt.astype(bool)))
        if union == 0:
            ious.append(1.0)  # both empty: perfect by convention, excluded from cIoU
            continue
        ious.append(inter / union)
        inter_sum += inter
        union_sum += union
    ciou = inter_sum / union_sum if union_sum > 0 else 1.0
    return EvalReport(
        per_sample_iou=ious,
        giou=float(np.mean(ious)),
        ciou=ciou,
        mean_reward=float(np.mean(rewards)),
        validity_rate=valid_count / len(scenes),
    )


def _fmt(value: float) -> str:
    return "%.17g" % float(value)


class MetricsWriter:
    """Append-only CSV sink: header once, 17-significant-digit floats, LF endings."""

    def __init__(self, path: str):
        self.path = path
        self._fh: io.TextIOBase = open(path, "w", encoding="utf-8", newline="\n")
        self._fh.write(",".join(CSV_COLUMNS) + "\n")

    def emit_row(
        self,
        step: int,
        epoch: int,
        mode: str,
        report: EvalReport,
        policy_obj: float,
        tool_loss: float,
        kl: float,
        grad_norm_policy: float,
        grad_norm_tool: float,
        wall_ms: float,
        seed: int,
    ) -> None:
        if self._fh.closed:
            raise MetricsUsageError("metrics sink is closed")
        row = ",".join(
            [
                str(int(step)),
                str(int(epoch)),
                mode,
                _fmt(report.mean_reward),
                _fmt(report.validity_rate),
                _fmt(report.giou),
                _fmt(report.ciou),
                _fmt(policy_obj),
                _fmt(tool_loss),
                _fmt(kl),
                _fmt(grad_norm_policy),
                _fmt(grad_norm_tool),
                _fmt(wall_ms),
                str(int(seed)),
            ]
        )
        offset = self._fh.tell()
        try:
            self._fh.write(row + "\n")
        except OSError:
            # roll back the partial row so the file stays parseable
            self._fh.seek(offset)
            self._fh.truncate()
            raise

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
