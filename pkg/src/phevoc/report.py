"""Run summary metrics and post-run diagnostics."""
import logging
import math
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from phevoc.cycles import fuel_economy, fuel_volume
from phevoc.model import VehicleParams
from phevoc.simulator import TrajectoryLog

logger = logging.getLogger(__name__)

SATURATION = 0.99
FRICTION_ACTIVE = 0.01
GENERATOR_FULL = 0.95
FRICTION_LAST_THRESHOLD = 0.9


def rms_tracking(frame: pd.DataFrame, exclude_saturated: bool = False) -> float:
    """RMS of V - V_des over logged rows, optionally skipping rows where engine and
    electric drive are both commanded at full capacity."""
    if frame.empty:
        return math.nan
    rows = frame
    if exclude_saturated:
        u_mode = np.maximum(frame["u_em"], frame["u_gen"])
        rows = frame[~((frame["u_ice"] >= SATURATION) & (u_mode >= SATURATION))]
        if rows.empty:
            return math.nan
    err = rows["v_mps"].to_numpy() - rows["v_des_mps"].to_numpy()
    return float(np.sqrt(np.mean(err ** 2)))


def friction_last_fraction(frame: pd.DataFrame) -> Optional[float]:
    """Share of friction-braking rows during which the generator runs at >= 95 % capacity."""
    braking = frame[frame["u_fr"] > FRICTION_ACTIVE]
    if braking.empty:
        return None
    full = (braking["mode_v"] == 1) & (braking["u_gen"] >= GENERATOR_FULL)
    return float(full.mean())


def mode_switches(frame: pd.DataFrame) -> int:
    modes = frame["mode_v"].to_numpy(dtype=int)
    return int(np.count_nonzero(np.diff(modes))) if modes.size else 0


def summarize(log: TrajectoryLog, params: VehicleParams) -> Dict[str, Any]:
    frame = log.frame
    if frame.empty:
        return {"aborted": True, "solver_failures": log.solver_failures}
    friction = friction_last_fraction(frame)
    if friction is not None and friction < FRICTION_LAST_THRESHOLD:
        logger.warning("friction brake used with the generator below capacity in %.0f%% of braking samples",
                       100.0 * (1.0 - friction))
    summary = {
        "rms_tracking_mps": rms_tracking(frame),
        "rms_tracking_unsaturated_mps": rms_tracking(frame, exclude_saturated=True),
        "final_soc": float(frame["soc"].iloc[-1]),
        "min_soc": float(frame["soc"].min()),
        "max_soc": float(frame["soc"].max()),
        "fuel_volume_l": fuel_volume(frame, params),
        "mpg": fuel_economy(frame, params),
        "mode_switches": mode_switches(frame),
        "solver_failures": log.solver_failures,
        "friction_last_fraction": friction,
        "clamp_events": len(log.clamp_events),
        "aborted": log.aborted,
        "duration_s": float(frame["t_s"].iloc[-1] - frame["t_s"].iloc[0]),
    }
    summary.update(log.costs)
    return summary
