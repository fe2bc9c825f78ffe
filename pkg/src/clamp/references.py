"""Published reference numbers used as comparison columns in reports.

Rows for third-party learners are paper-reported, not reproduced by this package.
All accuracies are percentages as (mean, std); std is None where none was published.
"""
from __future__ import annotations

DIGIT_DIRECTIONS = ("mn_us", "us_mn")

# final average accuracy on the digit benchmarks
DIGITS_TABLE = {
    "Source Only": {"mn_us": (17.80, 0.2), "us_mn": (12.55, 0.9)},
    "Joint Training": {"mn_us": (77.81, 1.9), "us_mn": (49.81, 0.7)},
    "EWC": {"mn_us": (17.88, 0.3), "us_mn": (13.30, 1.8)},
    "LwF": {"mn_us": (17.74, 0.4), "us_mn": (12.94, 1.5)},
    "SI": {"mn_us": (17.80, 0.2), "us_mn": (12.54, 1.0)},
    "MAS": {"mn_us": (17.92, 0.3), "us_mn": (13.18, 2.0)},
    "RWalk": {"mn_us": (17.92, 0.3), "us_mn": (13.39, 1.7)},
    "iCaRL": {"mn_us": (42.11, 2.5), "us_mn": (24.04, 0.9)},
    "IL2M": {"mn_us": (43.67, 3.3), "us_mn": (23.16, 1.9)},
    "EEIL": {"mn_us": (38.75, 3.0), "us_mn": (22.46, 1.4)},
    "HAL": {"mn_us": (72.31, 1.4), "us_mn": (47.55, 2.3)},
    "AGLA": {"mn_us": (62.75, 4.2), "us_mn": (47.98, 1.1)},
    "CDCL": {"mn_us": (66.73, None), "us_mn": (52.50, None)},
    "DANN": {"mn_us": (17.89, 0.9), "us_mn": (16.90, 3.1)},
    "CLAMP": {"mn_us": (84.98, 1.3), "us_mn": (89.63, 1.0)},
}

# rows this package actually runs; everything else in DIGITS_TABLE is reference only
REPRODUCED_ROWS = {"Source Only": "naive", "Joint Training": "joint", "DANN": "dann", "CLAMP": "clamp"}

ABLATION_TABLE = {
    "Naive": {"mn_us": (17.49, 2.2), "us_mn": (17.15, 1.2)},
    "PA": {"mn_us": (18.90, 0.4), "us_mn": (16.45, 6.4)},
    "Baseline 1": {"mn_us": (19.29, 0.6), "us_mn": (19.47, 0.7)},
    "Baseline 2": {"mn_us": (19.21, 0.6), "us_mn": (19.46, 0.7)},
    "Baseline 3": {"mn_us": (53.27, 5.4), "us_mn": (65.43, 2.3)},
    "Baseline 4": {"mn_us": (58.31, 4.3), "us_mn": (58.31, 4.3)},
    "Baseline 5": {"mn_us": (79.50, 2.0), "us_mn": (89.61, 0.8)},
    "CLAMP": {"mn_us": (84.98, 1.3), "us_mn": (89.63, 1.0)},
}

MEMORY_TABLE = {  # exemplars per class -> accuracy
    5: {"mn_us": 71.93, "us_mn": 84.40},
    25: {"mn_us": 81.69, "us_mn": 89.35},
    50: {"mn_us": 84.98, "us_mn": 89.63},
    100: {"mn_us": 84.82, "us_mn": 89.09},
    250: {"mn_us": 85.02, "us_mn": 88.33},
}

INNER_STEPS_TABLE = {  # steps -> (accuracy, wall-clock seconds)
    1: {"mn_us": (84.98, 2267), "us_mn": (89.63, 597)},
    2: {"mn_us": (84.88, 3802), "us_mn": (89.40, 1030)},
    3: {"mn_us": (84.26, 4920), "us_mn": (88.84, 1153)},
    4: {"mn_us": (83.83, 6132), "us_mn": (89.49, 1270)},
    5: {"mn_us": (82.28, 7404), "us_mn": (89.57, 1381)},
}

THRESHOLD_TABLE = {
    0.70: {"mn_us": 83.24, "us_mn": 88.80},
    0.75: {"mn_us": 83.58, "us_mn": 89.65},
    0.80: {"mn_us": 84.56, "us_mn": 89.31},
    0.85: {"mn_us": 84.98, "us_mn": 89.63},
    0.90: {"mn_us": 84.07, "us_mn": 89.29},
}

ENTROPY = {"mn_us": 0.8445, "us_mn": 0.8745}


def direction_key(source: str, target: str) -> str | None:
    short = {"mnist": "mn", "usps": "us"}
    s, t = short.get(source.lower()), short.get(target.lower())
    return f"{s}_{t}" if s and t else None
