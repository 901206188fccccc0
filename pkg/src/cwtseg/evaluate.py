"""Model comparison over held-out test volumes, mirrored as CSV and a table.

For every model and test set: per-case Dice against truth, the set's mean
Dice, and the Pearson correlation between predicted and true lesion
volumes.  Models are compared pairwise per test set with the Wilcoxon
signed-rank test over per-case Dice scores.  Pooled columns are the
unweighted mean of the per-set means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DegenerateSampleError, UndefinedCorrelationError
from .network import Network, predict_volume
from .stats import dice, pearson, wilcoxon_signed_rank
from .volumes import SegmentationMask, VolumeImage, lesion_volume_mm3

__all__ = ["EvaluationReport", "evaluate_models"]

TestCase = tuple[str, VolumeImage, SegmentationMask]


@dataclass
class SetResult:
    mean_dice: float
    pearson_r: float | None
    case_dice: dict[str, float]


@dataclass
class EvaluationReport:
    model_names: list[str]
    set_names: list[str]
    results: dict[tuple[str, str], SetResult]
    pooled_dice: dict[str, float]
    pooled_r: dict[str, float | None]
    # pairwise[(set, model_a, model_b)] = (statistic, p) or None when degenerate
    pairwise: dict[tuple[str, str, str], tuple[float, float] | None]
    predictions: dict[tuple[str, str, str], SegmentationMask] = field(default_factory=dict)

    def csv_rows(self) -> list[str]:
        rows = ["model,test_set,mean_dice,pearson_r"]
        for m in self.model_names:
            for s in self.set_names:
                r = self.results[(m, s)]
                rows.append(f"{m},{s},{r.mean_dice!r},{_fmt_r(r.pearson_r)}")
            rows.append(
                f"{m},pooled,{self.pooled_dice[m]!r},{_fmt_r(self.pooled_r[m])}"
            )
        return rows

    def pairwise_csv_rows(self, set_name: str) -> list[str]:
        rows = ["model," + ",".join(self.model_names)]
        for a in self.model_names:
            cells = []
            for b in self.model_names:
                if a == b:
                    cells.append("")
                    continue
                entry = self.pairwise[(set_name, *sorted((a, b)))]
                cells.append("degenerate" if entry is None else repr(entry[1]))
            rows.append(f"{a}," + ",".join(cells))
        return rows

    def pretty_table(self) -> str:
        headers = ["model"]
        for s in self.set_names:
            headers += [f"{s} dice", f"{s} corr"]
        headers += ["pooled dice", "pooled corr"]
        body = []
        for m in self.model_names:
            row = [m]
            for s in self.set_names:
                r = self.results[(m, s)]
                row += [f"{r.mean_dice:.3f}", _fmt_r(r.pearson_r, "n/a", "{:.3f}")]
            row += [
                f"{self.pooled_dice[m]:.3f}",
                _fmt_r(self.pooled_r[m], "n/a", "{:.3f}"),
            ]
            body.append(row)
        widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(headers)]
        def line(cells):
            return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        sep = "  ".join("-" * w for w in widths)
        return "\n".join([line(headers), sep] + [line(r) for r in body])


def _fmt_r(r: float | None, empty: str = "", fmt: str = "{!r}") -> str:
    return empty if r is None else fmt.format(r)


def evaluate_models(
    named_models: list[tuple[str, Network]],
    test_sets: dict[str, list[TestCase]],
    threshold: float = 0.5,
    keep_predictions: bool = False,
) -> EvaluationReport:
    """Score every model on every test set; deterministic and order-independent."""
    if not named_models:
        raise ContractViolation("no models to evaluate")
    names = [n for n, _ in named_models]
    if len(set(names)) != len(names):
        raise ContractViolation(f"duplicate model names: {names}")
    hashes = {net.arch_hash for _, net in named_models}
    if len(hashes) != 1:
        raise ContractViolation("models must share one architecture")

    missing = [
        cid for cases in test_sets.values() for cid, _, mask in cases if mask is None
    ]
    if missing:
        raise ContractViolation(f"missing truth masks for cases: {sorted(missing)}")

    set_names = sorted(test_sets)
    results: dict[tuple[str, str], SetResult] = {}
    predictions: dict[tuple[str, str, str], SegmentationMask] = {}
    for set_name in set_names:
        cases = sorted(test_sets[set_name], key=lambda c: c[0])
        ids = [c[0] for c in cases]
        if len(set(ids)) != len(ids):
            raise ContractViolation(f"duplicate case ids in test set {set_name}")
        true_vols = [lesion_volume_mm3(mask) for _, _, mask in cases]
        for model_name, net in named_models:
            case_dice: dict[str, float] = {}
            pred_vols = []
            for cid, vol, mask in cases:
                pred = predict_volume(net, vol, threshold)
                case_dice[cid] = dice(pred, mask)
                pred_vols.append(lesion_volume_mm3(pred))
                if keep_predictions:
                    predictions[(model_name, set_name, cid)] = pred
            mean_dice = float(np.mean(list(case_dice.values())))
            try:
                r = pearson(pred_vols, true_vols)
            except (UndefinedCorrelationError, ContractViolation):
                r = None
            results[(model_name, set_name)] = SetResult(mean_dice, r, case_dice)

    pooled_dice = {
        m: float(np.mean([results[(m, s)].mean_dice for s in set_names])) for m in names
    }
    pooled_r = {}
    for m in names:
        rs = [results[(m, s)].pearson_r for s in set_names]
        pooled_r[m] = float(np.mean(rs)) if all(r is not None for r in rs) else None

    pairwise: dict[tuple[str, str, str], tuple[float, float] | None] = {}
    for set_name in set_names:
        case_ids = sorted({c[0] for c in test_sets[set_name]})
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                a_, b_ = sorted((a, b))
                scores = [
                    (cid, results[(a_, set_name)].case_dice[cid],
                     results[(b_, set_name)].case_dice[cid])
                    for cid in case_ids
                ]
                try:
                    pairwise[(set_name, a_, b_)] = wilcoxon_signed_rank(scores)
                except DegenerateSampleError:
                    pairwise[(set_name, a_, b_)] = None

    return EvaluationReport(
        model_names=names,
        set_names=set_names,
        results=results,
        pooled_dice=pooled_dice,
        pooled_r=pooled_r,
        pairwise=pairwise,
        predictions=predictions,
    )
