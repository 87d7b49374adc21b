"""Corpus evaluation: separation gains and binaural cue errors.

Every utterance yields one row per reference speaker for the separated
estimate and one for the raw mixture (the baseline a separator must beat).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np

from .cues import UndefinedCueError, cue_errors, gammatone_bank, sep_metrics
from .model import ModelConfig, SagrnnParams, separate
from .sim import BinauralSignal
from .training import EPS, pit_assign

METRICS = ("delta_snr_db", "delta_si_snr_db", "delta_itd_us", "delta_ild_db", "delta_azimuth_deg")


def match_speakers(est: np.ndarray, ref: np.ndarray, eps: float = EPS) -> tuple:
    """``perm[j]``: estimate index for reference ``j``, by best joint-ear SNR."""
    perm, _ = pit_assign(est, ref, "snr", "joint_ears", eps)
    return perm


def _rows_for(task) -> list[dict]:
    uid, est, ref, mix = task
    mixture = BinauralSignal.from_array(mix)
    rows = []
    for j in range(ref.shape[0]):
        r = BinauralSignal.from_array(ref[j])
        for kind, sig in (("estimate", BinauralSignal.from_array(est[j])), ("mixture", mixture)):
            row = {"id": uid, "speaker": j, "kind": kind}
            row.update(sep_metrics(sig, r, mixture))
            try:
                row.update(cue_errors(sig, r))
            except UndefinedCueError as exc:
                row["error"] = str(exc)
            rows.append(row)
    return rows


def summarize(rows: list[dict]) -> dict:
    """Per-kind means over the rows where each metric is defined."""
    out = {}
    for kind in sorted({r["kind"] for r in rows}):
        sel = [r for r in rows if r["kind"] == kind]
        s = {"rows": len(sel), "undefined": sum("error" in r for r in sel)}
        for m in METRICS:
            vals = [r[m] for r in sel if m in r]
            if not vals:
                s[m] = None
            elif m == "delta_ild_db":
                s[m] = [float(v) for v in np.mean(np.array(vals), axis=0)]
            else:
                s[m] = float(np.mean(vals))
        out[kind] = s
    return out


def evaluate_arrays(utterances: list, jobs: int = 1) -> dict:
    """``utterances``: ``(id, est [C, 2, T], ref [C, 2, T], mixture [2, T])``.

    Estimates must already be in reference order.
    """
    if jobs > 1 and len(utterances) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_rows_for, utterances))
    else:
        chunks = [_rows_for(u) for u in utterances]
    rows = [r for c in chunks for r in c]
    bank = gammatone_bank()
    return {
        "rows": rows,
        "summary": summarize(rows),
        "ild_channel_centers_hz": [float(bank.centers[c]) for c in bank.ild_channels],
    }


def evaluate_model(
    params: SagrnnParams,
    config: ModelConfig,
    items: list,
    jobs: int = 1,
    ids: Optional[list] = None,
) -> dict:
    """Separate every ``(mixture, references, ...)`` item and score it."""
    utterances = []
    for k, item in enumerate(items):
        mix, ref = item[0], item[1]
        est = separate(mix, params, config)
        perm = match_speakers(est, ref)
        uid = ids[k] if ids is not None else (item[2]["id"] if len(item) > 2 else str(k))
        utterances.append((uid, est[list(perm)], ref, mix))
    return evaluate_arrays(utterances, jobs)


def has_undefined(report: dict) -> bool:
    return any("error" in r for r in report["rows"])


def is_finite_summary(summary: dict) -> bool:
    vals = []
    for s in summary.values():
        for m in METRICS:
            v = s.get(m)
            vals.extend(v if isinstance(v, list) else [v] if v is not None else [])
    return all(math.isfinite(v) for v in vals)
