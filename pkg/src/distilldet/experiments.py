"""End-to-end experiment plumbing: dataset to checkpoints to score tables.

The ablation grid toggles the three matching terms and the region cropper in
the same eight on/off combinations used throughout this project's reports.
"""

from __future__ import annotations

import os
from dataclasses import replace

from . import nets
from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import annotations_by_image, generate_dataset
from .distill import DistillConfig
from .evalmr import SUBSETS, evaluate
from .train import _cfg_from_meta, distill_student, train_teacher

# (PD, RD, LD, PyRoIAlign) in report order; row 2 is the no-matching
# baseline, row 8 the full configuration.
ABLATION_ROWS: tuple = (
    (False, False, False, False),
    (False, False, False, True),
    (False, False, True, True),
    (False, True, False, False),
    (False, True, False, True),
    (False, True, True, True),
    (True, True, True, False),
    (True, True, True, True),
)


def distill_config_for_row(base: DistillConfig, row) -> DistillConfig:
    pd, rd, ld, py = row
    return replace(base, enable_pd=pd, enable_rd=rd, enable_ld=ld, pyramid_roi_align=py)


def row_tag(row) -> str:
    return "".join("1" if f else "0" for f in row)


def build_dataset(cfg: RunConfig):
    return generate_dataset(cfg.dataset, cfg.seed)


def evaluate_params(net_cfg, params, test_scenes, subsets=SUBSETS):
    """Detect on every test scene, then score each requested subset."""
    dets = {}
    for scene in test_scenes:
        h, w = scene.image.data.shape[-2:]
        image4 = scene.image.reshape((1, 3, h, w))
        dets[scene.index] = nets.detect(image4, net_cfg, params)
    gts = annotations_by_image(test_scenes)
    curves = {s: evaluate(dets, gts, s) for s in subsets}
    return {s: c.log_avg_mr for s, c in curves.items()}, curves, dets


def evaluate_checkpoint(ckpt_path, test_scenes, subsets=SUBSETS):
    meta, params = load_checkpoint(ckpt_path)
    net_cfg = _cfg_from_meta(meta)
    return evaluate_params(net_cfg, params, test_scenes, subsets)


def teacher_ckpt_path(out_dir) -> str:
    return os.path.join(out_dir, "teacher.ckpt")


def ensure_teacher(cfg: RunConfig, train_scenes, log: bool = True):
    """Train the teacher once per output directory; reuse if present."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = teacher_ckpt_path(cfg.out_dir)
    if not os.path.exists(path):
        train_teacher(
            train_scenes, cfg.teacher, cfg.train, path,
            log_path=os.path.join(cfg.out_dir, "teacher_log.jsonl") if log else None,
        )
    return path


def run_student_variant(cfg: RunConfig, dcfg: DistillConfig, teacher_ckpt, tag: str,
                        train_scenes, log: bool = True):
    """Train one student under the given matching configuration."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = os.path.join(cfg.out_dir, f"student_{tag}.ckpt")
    tcfg = replace(cfg.train, distill=dcfg)
    params, records, student_cfg = distill_student(
        train_scenes, teacher_ckpt, tcfg, ckpt,
        student_cfg=cfg.student,
        log_path=os.path.join(cfg.out_dir, f"student_{tag}_log.jsonl") if log else None,
    )
    return ckpt, params, records, student_cfg


def run_ablation(cfg: RunConfig, progress=None):
    """Train and score all eight configurations; returns table rows of
    (flags, mr_reasonable, mr_small)."""
    train_scenes, test_scenes = build_dataset(cfg)
    teacher_ckpt = ensure_teacher(cfg, train_scenes)
    rows = []
    for row in ABLATION_ROWS:
        dcfg = distill_config_for_row(cfg.train.distill, row)
        tag = row_tag(row)
        if progress:
            progress(f"training student variant {tag} "
                     f"(PD={row[0]} RD={row[1]} LD={row[2]} PyRoIAlign={row[3]})")
        ckpt, params, _, student_cfg = run_student_variant(cfg, dcfg, teacher_ckpt, tag, train_scenes)
        mrs, _, _ = evaluate_params(student_cfg, params, test_scenes)
        rows.append((row, mrs["reasonable"], mrs["small"]))
    return rows


def format_ablation_table(rows) -> str:
    def mark(b):
        return "x" if b else "-"

    lines = ["row\tPD\tRD\tLD\tPyRoIAlign\tMR-reasonable\tMR-small"]
    for i, (row, mr_r, mr_s) in enumerate(rows, 1):
        lines.append(
            f"{i}\t{mark(row[0])}\t{mark(row[1])}\t{mark(row[2])}\t{mark(row[3])}"
            f"\t{mr_r:.4f}\t{mr_s:.4f}"
        )
    return "\n".join(lines) + "\n"
