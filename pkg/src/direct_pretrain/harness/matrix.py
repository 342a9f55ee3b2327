"""Tabulate (pre-train, fine-tune) pairs into an ablation-style report."""
import json
import logging
import time
import traceback
from dataclasses import dataclass, field, replace
from typing import List, Optional

from ..checkpoint import PART_PROGRESSION, PART_TAGS
from .profiler import profile
from .train import LoadSpec, TrainConfig, evaluate_model, model_from_checkpoint, train_phase

log = logging.getLogger(__name__)

PART_ROW_LABELS = ("Backbone", "+ FPN", "+ RPN", "+ (Bbox Head)", "+ (Mask Head)")


@dataclass
class ExperimentCell:
    name: str
    finetune: TrainConfig
    pretrain: Optional[TrainConfig] = None
    parts: tuple = ("all",)


@dataclass
class MatrixReport:
    rows: List[dict] = field(default_factory=list)

    def as_dict(self):
        return {"rows": self.rows}

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_text(self):
        if not self.rows:
            return "(empty matrix)"
        head = f"{'cell':<24} {'AP':>6} {'AP50':>6} {'AP75':>6} {'iters':>6} {'s/iter':>7} {'data_s':>7}  status"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            if r.get("error"):
                lines.append(f"{r['name']:<24} {'-':>6} {'-':>6} {'-':>6} {'-':>6} {'-':>7} {'-':>7}  error: {r['error']}")
                continue
            lines.append(
                f"{r['name']:<24} {100 * r['ap']:>6.1f} {100 * r['ap50']:>6.1f} {100 * r['ap75']:>6.1f} "
                f"{r['iterations']:>6d} {r['time_per_iter']:>7.3f} {r['data_time']:>7.4f}  ok"
            )
        return "\n".join(lines)


def run_experiment_matrix(cells, train_dataset, eval_dataset, eval_spec, iou_type="bbox"):
    """Run every cell; a failing cell is reported, not raised.

    Cells whose pre-training config is identical share one pre-training run.
    """
    report = MatrixReport()
    pretrained = {}
    for cell in cells:
        row = {"name": cell.name}
        t0 = time.perf_counter()
        try:
            ft = cell.finetune
            iters = 0
            if cell.pretrain is not None:
                key = repr(cell.pretrain)
                if key not in pretrained:
                    pretrained[key] = train_phase(cell.pretrain, train_dataset)
                ckpt, pre_log = pretrained[key]
                iters += len(pre_log)
                ft = replace(ft, load=LoadSpec(ckpt, tuple(cell.parts)))
            ckpt, ft_log = train_phase(ft, train_dataset)
            iters += len(ft_log)
            prof = profile(ft_log)
            ap = evaluate_model(model_from_checkpoint(ckpt), eval_dataset, eval_spec, iou_type=iou_type)
            row.update(ap.as_dict())
            row.update({
                "iterations": iters,
                "time_per_iter": prof["time_per_iter"],
                "data_time": prof["data_time"],
                "bn_mode": ft.bn_mode,
                "parts": list(cell.parts) if cell.pretrain is not None else [],
                "wall_time": time.perf_counter() - t0,
            })
        except Exception as e:  # one bad cell must not abort the matrix
            log.error("cell %s failed: %s", cell.name, e)
            row["error"] = f"{type(e).__name__}: {e}"
            row["traceback"] = traceback.format_exc()
        report.rows.append(row)
    return report


def bn_mode_cells(pretrain, finetune, modes=("affine", "sync", "fixed")):
    """One cell per fine-tuning BN strategy."""
    return [ExperimentCell(f"bn={m}", replace(finetune, bn_mode=m), pretrain) for m in modes]


def part_cells(pretrain, finetune):
    """The cumulative part-loading progression: backbone, +neck, ..., +mask head."""
    cells = []
    for label, parts in zip(PART_ROW_LABELS, PART_PROGRESSION):
        ordered = tuple(t for t in PART_TAGS if t in parts)
        cells.append(ExperimentCell(label, finetune, pretrain, ordered))
    return cells


def schedule_cells(pretrain, finetune, pre_epochs=(1, 2, 3), ft_epochs=(1, 2)):
    cells = []
    for pe in pre_epochs:
        for fe in ft_epochs:
            cells.append(ExperimentCell(f"P{pe}ep+{fe}ep", replace(finetune, epochs=fe),
                                        replace(pretrain, epochs=pe)))
    return cells
