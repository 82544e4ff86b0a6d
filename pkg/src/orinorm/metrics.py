"""Angle-error metrics: RMSE, PGP curves with AUC, and the majority flip.

Unoriented errors use arccos|dot| (errors in [0, 90] degrees), oriented
errors arccos(dot) (errors in [0, 180]).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput


def angle_error(pred, gt, oriented):
    """Angular error in degrees between aligned unit vectors (vectorized)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    dots = np.sum(pred * gt, axis=-1)
    if oriented:
        dots = np.clip(dots, -1.0, 1.0)
    else:
        dots = np.clip(np.abs(dots), 0.0, 1.0)
    return np.degrees(np.arccos(dots))


def rmse(errors):
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise EmptyInput("no errors to aggregate")
    return float(np.sqrt(np.mean(errors ** 2)))


def pgp_auc(errors, max_threshold=90.0, steps=90):
    """Fraction-below-threshold curve on a uniform grid and its trapezoidal
    area normalized by max_threshold."""
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise EmptyInput("no errors to aggregate")
    thresholds = np.linspace(0.0, max_threshold, steps + 1)
    fractions = np.mean(errors[None, :] <= thresholds[:, None], axis=1)
    auc = float(np.trapezoid(fractions, thresholds) / max_threshold)
    return list(zip(thresholds.tolist(), fractions.tolist())), auc


def majority_flip(pred, gt):
    """Negate all predictions when a strict majority points inward of gt."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    inward = int(np.sum(np.sum(pred * gt, axis=-1) < 0))
    if inward > len(pred) / 2:
        return -pred
    return pred.copy()


@dataclass
class EvalReport:
    rmse_oriented: float
    rmse_unoriented: float
    pgp: list                 # (threshold degrees, fraction) pairs, unoriented
    pgp_oriented: list        # same on the 0-180 degree grid
    auc: float                # unoriented, 0-90 degrees
    auc_oriented: float
    per_point_errors: np.ndarray          # oriented degrees
    per_point_errors_unoriented: np.ndarray

    def as_rows(self):
        rows = [
            ("rmse_oriented", self.rmse_oriented),
            ("rmse_unoriented", self.rmse_unoriented),
            ("auc", self.auc),
            ("auc_oriented", self.auc_oriented),
        ]
        return rows


def evaluate(pred, gt) -> EvalReport:
    """Full report for aligned prediction / ground-truth normal sets."""
    err_o = angle_error(pred, gt, oriented=True)
    err_u = angle_error(pred, gt, oriented=False)
    pgp_u, auc_u = pgp_auc(err_u, max_threshold=90.0, steps=90)
    pgp_o, auc_o = pgp_auc(err_o, max_threshold=180.0, steps=180)
    return EvalReport(
        rmse_oriented=rmse(err_o),
        rmse_unoriented=rmse(err_u),
        pgp=pgp_u,
        pgp_oriented=pgp_o,
        auc=auc_u,
        auc_oriented=auc_o,
        per_point_errors=err_o,
        per_point_errors_unoriented=err_u,
    )


def write_report(report: EvalReport, path):
    """Key-value summary plus the PGP curves as CSV-ish text."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in report.as_rows():
            fh.write(f"{key} = {value:.6f}\n")
        fh.write("# pgp_unoriented: threshold_deg,fraction\n")
        for t, f in report.pgp:
            fh.write(f"pgp,{t:.1f},{f:.6f}\n")
        fh.write("# pgp_oriented: threshold_deg,fraction\n")
        for t, f in report.pgp_oriented:
            fh.write(f"pgp_oriented,{t:.1f},{f:.6f}\n")


def write_error_heatmap(points, errors, path):
    """Per-point error export (x, y, z, error_degrees) for heatmap rendering."""
    points = np.asarray(points, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "error_degrees"])
        for p, e in zip(points, errors):
            writer.writerow([f"{p[0]:.9g}", f"{p[1]:.9g}", f"{p[2]:.9g}", f"{e:.6f}"])
