"""Dataset-level evaluation: runs the model (plus the VM and Convex
baselines) over rendered sequences and assembles per-instance reports.

Ground-truth visible masks enter the model's prediction path only for the
"sg" variant (a model trained with the visible mask as its hint channel)
and for the "pp" post-processing variant; the plain path sees track boxes
only. The VM and Convex baselines consume visible masks by definition.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .metrics import (EvalReport, convex_baseline, post_process,
                      score_instance, vm_baseline)
from .model import AmodalNet

VARIANTS = ("none", "pp", "pp_star", "sg")


def check_variant(net: AmodalNet, variant: str) -> None:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown eval variant {variant!r}, expected one of {VARIANTS}")
    if variant == "sg" and net.cfg.input_mode != "sg_visible_mask":
        raise ConfigError("variant 'sg' requires a checkpoint trained with "
                          "input_mode=sg_visible_mask, got input_mode="
                          f"{net.cfg.input_mode}")
    if variant != "sg" and net.cfg.input_mode == "sg_visible_mask":
        raise ConfigError("checkpoint was trained with input_mode=sg_visible_mask; "
                          "evaluate it with --variant sg")


def model_method_name(variant: str) -> str:
    return {"none": "model", "pp": "model+pp", "pp_star": "model+pp_star",
            "sg": "model+sg"}[variant]


def evaluate_dataset(net: AmodalNet, sequences, variant: str = "none",
                     pp_intersection: bool = False,
                     include_baselines: bool = True,
                     config_echo: dict | None = None) -> EvalReport:
    check_variant(net, variant)
    report = EvalReport(config=dict(config_echo or {}, variant=variant,
                                    pp_intersection=pp_intersection))
    method = model_method_name(variant)
    for seq in sequences:
        preds = net.forward_video(seq)
        for p in preds:
            gt_full = seq.full_masks[p.frame_index, p.object_id]
            gt_vis = seq.visible_masks[p.frame_index, p.object_id]
            pred = p.full_mask()
            if variant == "pp":
                pred = post_process(pred, gt_vis, intersection=pp_intersection)
            elif variant == "pp_star":
                pred = post_process(pred, p.visible_mask(), intersection=pp_intersection)
            score_instance(report, seq.name, p.object_id, p.frame_index,
                           method, pred, gt_full, gt_vis)
        if include_baselines:
            T, K = seq.num_frames, seq.num_objects
            for t in range(T):
                for k in range(K):
                    gt_full = seq.full_masks[t, k]
                    gt_vis = seq.visible_masks[t, k]
                    score_instance(report, seq.name, k, t, "vm",
                                   vm_baseline(gt_vis), gt_full, gt_vis)
                    score_instance(report, seq.name, k, t, "convex",
                                   convex_baseline(gt_vis), gt_full, gt_vis)
    return report


def quick_model_miou(net: AmodalNet, sequences) -> tuple[float, float | str]:
    """(miou_full, miou_occ) for the model only; used for per-epoch logs."""
    report = evaluate_dataset(net, sequences, include_baselines=False)
    s = report.summary()["methods"][model_method_name("none")]
    return s["miou_full"], s["miou_occ"]


# ---------------------------------------------------------------------------
# qualitative overlays

def _contour(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    return m & ~interior


def overlay_image(image: np.ndarray, pred_full: np.ndarray, gt_full: np.ndarray,
                  gt_visible: np.ndarray) -> np.ndarray:
    """Prediction as a green fill, ground-truth full mask as a red contour,
    visible region dimmed less; returns [3,H,W] in [0,1]."""
    out = image * 0.55
    fill = pred_full.astype(bool)
    out[1][fill] = np.minimum(out[1][fill] + 0.4, 1.0)
    vis = gt_visible.astype(bool)
    out[2][vis] = np.minimum(out[2][vis] + 0.25, 1.0)
    edge = _contour(gt_full)
    out[0][edge] = 1.0
    out[1][edge] *= 0.2
    out[2][edge] *= 0.2
    return np.clip(out, 0.0, 1.0)
