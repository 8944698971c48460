"""Registration error metrics.

Anisotropic errors compare Euler angles (intrinsic z-y-x, degrees) and
translation components between prediction and ground truth; RMSE and MAE
aggregate over samples and axes jointly. Isotropic errors are the geodesic
rotation angle of R_gt^T R_pred and the euclidean gap between translations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform

GIMBAL_COS_EPS = 1e-6


def rmse_mae(values) -> tuple[float, float]:
    """Root-mean-square and mean-absolute over a flat error sample."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("empty error sample")
    return float(np.sqrt(np.mean(arr**2))), float(np.mean(np.abs(arr)))


def euler_zyx_deg(matrix: np.ndarray) -> tuple[np.ndarray, bool]:
    """Intrinsic z-y-x Euler angles in degrees, plus a gimbal-lock flag.

    Near pitch = +-90 deg the decomposition is not unique; the convention
    here pins the roll to zero and flags the sample.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 rotation matrix, got {m.shape}")
    sy = -m[2, 0]
    sy = min(1.0, max(-1.0, sy))
    pitch = math.asin(sy)
    locked = math.cos(pitch) < GIMBAL_COS_EPS
    if locked:
        yaw = math.atan2(-m[0, 1], m[1, 1])
        roll = 0.0
    else:
        yaw = math.atan2(m[1, 0], m[0, 0])
        roll = math.atan2(m[2, 1], m[2, 2])
    return np.degrees([yaw, pitch, roll]), locked


def _wrap_deg(diff: np.ndarray) -> np.ndarray:
    """Wrap angle differences into (-180, 180]."""
    return -((-diff + 180.0) % 360.0 - 180.0)


def anisotropic_errors(pred: RigidTransform, gt: RigidTransform):
    """Signed per-axis angle (deg) and translation differences, plus the
    gimbal flag for the pair."""
    ang_pred, lock_p = euler_zyx_deg(pred.matrix3())
    ang_gt, lock_g = euler_zyx_deg(gt.matrix3())
    rot_diff = _wrap_deg(ang_pred - ang_gt)
    trans_diff = np.asarray(pred.translation, dtype=np.float64) - np.asarray(gt.translation, dtype=np.float64)
    return rot_diff, trans_diff, bool(lock_p or lock_g)


def isotropic_errors(pred: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """(geodesic rotation error in degrees, translation l2 error)."""
    rel = gt.matrix3().T @ pred.matrix3()
    cos_angle = (np.trace(rel) - 1.0) / 2.0
    cos_angle = min(1.0, max(-1.0, cos_angle))
    err_r = math.degrees(math.acos(cos_angle))
    err_t = float(np.linalg.norm(np.asarray(pred.translation) - np.asarray(gt.translation)))
    return err_r, err_t


@dataclass
class MetricsReport:
    rmse_rot: float
    mae_rot: float
    rmse_trans: float
    mae_trans: float
    error_rot: float
    error_trans: float
    count: int
    gimbal_count: int
    rot_diffs: np.ndarray
    trans_diffs: np.ndarray
    iso_rot: np.ndarray
    iso_trans: np.ndarray

    def as_dict(self) -> dict:
        return {
            "count": self.count,
            "gimbal_count": self.gimbal_count,
            "rmse_rot_deg": self.rmse_rot,
            "mae_rot_deg": self.mae_rot,
            "rmse_trans": self.rmse_trans,
            "mae_trans": self.mae_trans,
            "error_rot_deg": self.error_rot,
            "error_trans": self.error_trans,
        }

    def table_row(self) -> list[float]:
        """Column order: RMSE(R), MAE(R), RMSE(t), MAE(t), Error(R), Error(t)."""
        return [self.rmse_rot, self.mae_rot, self.rmse_trans, self.mae_trans, self.error_rot, self.error_trans]


def evaluate_pairs(predictions: list[RigidTransform], ground_truths: list[RigidTransform]) -> MetricsReport:
    if len(predictions) != len(ground_truths):
        raise ValueError("prediction / ground-truth counts differ")
    if not predictions:
        raise ValueError("nothing to evaluate")
    rot_diffs, trans_diffs, iso_r, iso_t = [], [], [], []
    gimbal = 0
    for pred, gt in zip(predictions, ground_truths):
        rd, td, locked = anisotropic_errors(pred, gt)
        rot_diffs.append(rd)
        trans_diffs.append(td)
        gimbal += int(locked)
        er, et = isotropic_errors(pred, gt)
        iso_r.append(er)
        iso_t.append(et)
    rot = np.stack(rot_diffs)
    trans = np.stack(trans_diffs)
    rmse_rot, mae_rot = rmse_mae(rot)
    rmse_trans, mae_trans = rmse_mae(trans)
    # RMSE dominates MAE for any sample set (Cauchy-Schwarz); a violation
    # would mean the aggregation broke.
    assert rmse_rot >= mae_rot - 1e-12
    assert rmse_trans >= mae_trans - 1e-12
    return MetricsReport(
        rmse_rot=rmse_rot,
        mae_rot=mae_rot,
        rmse_trans=rmse_trans,
        mae_trans=mae_trans,
        error_rot=float(np.mean(iso_r)),
        error_trans=float(np.mean(iso_t)),
        count=len(predictions),
        gimbal_count=gimbal,
        rot_diffs=rot,
        trans_diffs=trans,
        iso_rot=np.asarray(iso_r),
        iso_trans=np.asarray(iso_t),
    )


def report_text(report: MetricsReport, per_sample: bool = False) -> str:
    lines = []
    if per_sample:
        lines.append("idx  rot_err_deg  trans_err")
        for i, (er, et) in enumerate(zip(report.iso_rot, report.iso_trans)):
            lines.append(f"{i:4d}  {er:11.4f}  {et:9.5f}")
        lines.append("")
    lines.append(f"pairs evaluated : {report.count}")
    if report.gimbal_count:
        lines.append(f"gimbal-locked   : {report.gimbal_count}")
    lines.append(f"RMSE(R) deg     : {report.rmse_rot:.4f}")
    lines.append(f"MAE(R)  deg     : {report.mae_rot:.4f}")
    lines.append(f"RMSE(t)         : {report.rmse_trans:.5f}")
    lines.append(f"MAE(t)          : {report.mae_trans:.5f}")
    lines.append(f"Error(R) deg    : {report.error_rot:.4f}")
    lines.append(f"Error(t)        : {report.error_trans:.5f}")
    return "\n".join(lines)


def write_report(report: MetricsReport, text_path, json_path, per_sample: bool = True) -> None:
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(report_text(report, per_sample=per_sample) + "\n")
    payload = report.as_dict()
    if per_sample:
        payload["per_sample"] = [
            {"rot_err_deg": float(er), "trans_err": float(et)}
            for er, et in zip(report.iso_rot, report.iso_trans)
        ]
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
