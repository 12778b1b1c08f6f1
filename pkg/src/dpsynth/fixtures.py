"""Planted-structure generators for demos and tests.

``wellbeing_panel`` simulates weekly survey rows per participant with a known
mixed-model structure: stress falls with week and with sleep above one's own
average, anxiety tracks stress, and a few wearable-style features carry weaker
signal.
"""

from __future__ import annotations

import numpy as np

from .data import AttributeSpec, RawTable, Schema

WEEK_EFFECT = -0.331
TST_DEV_EFFECT = -0.897


def wellbeing_schema(n_participants: int, n_weeks: int) -> Schema:
    tst_edges = tuple(np.round(np.arange(4.5, 10.0, 0.5), 2))
    return Schema((
        AttributeSpec("id", "categorical", domain_size=n_participants),
        AttributeSpec("week", "ordinal", domain_size=n_weeks),
        AttributeSpec("gender", "categorical", domain_size=3,
                      code_labels=("female", "male", "other")),
        AttributeSpec("TST", "continuous", bin_edges=tst_edges, lower=4.0, upper=10.0),
        AttributeSpec("PSS", "ordinal", domain_size=41),
        AttributeSpec("GAD", "ordinal", domain_size=22),
        AttributeSpec("steps", "continuous", bin_edges=tuple(range(2000, 16000, 2000)),
                      lower=0.0, upper=16000.0),
        AttributeSpec("rhr", "continuous", bin_edges=tuple(range(50, 90, 5)),
                      lower=45.0, upper=90.0),
    ))


def wellbeing_panel(n_participants: int = 100, n_weeks: int = 8, seed: int = 0,
                    intercept_sd: float = 3.0, slope_sd: float = 0.3,
                    noise_sd: float = 2.0) -> tuple[RawTable, Schema]:
    """Raw rows (id, week, gender, TST, PSS, GAD, steps, rhr) and their schema."""
    rng = np.random.default_rng(seed)
    n = n_participants * n_weeks
    pid = np.repeat(np.arange(n_participants), n_weeks)
    week = np.tile(np.arange(n_weeks), n_participants)
    gender = rng.choice(3, size=n_participants, p=[0.55, 0.4, 0.05])[pid]
    base_sleep = rng.normal(7.0, 0.7, n_participants)[pid]
    tst = np.clip(base_sleep + rng.normal(0.0, 0.6, n), 4.0, 10.0)
    tst_dev = tst - np.bincount(pid, tst)[pid] / n_weeks
    b0 = rng.normal(0.0, intercept_sd, n_participants)[pid]
    b1 = rng.normal(0.0, slope_sd, n_participants)[pid]
    pss = (18.0 + 1.2 * (gender == 0) + b0 + (WEEK_EFFECT + b1) * week
           + TST_DEV_EFFECT * tst_dev + rng.normal(0.0, noise_sd, n))
    pss = np.clip(np.round(pss), 0, 40).astype(int)
    gad = np.clip(np.round(0.5 * pss - 2.0 + rng.normal(0.0, 1.5, n)), 0, 21).astype(int)
    steps = np.clip(9000 - 120 * pss + rng.normal(0.0, 2000.0, n), 0, 16000)
    rhr = np.clip(62 + 0.3 * pss + rng.normal(0.0, 5.0, n), 45, 90)
    labels = ("female", "male", "other")
    rows = tuple(
        (int(pid[i]), int(week[i]), labels[gender[i]], round(float(tst[i]), 2), int(pss[i]),
         int(gad[i]), round(float(steps[i]), 1), round(float(rhr[i]), 1))
        for i in range(n)
    )
    header = ("id", "week", "gender", "TST", "PSS", "GAD", "steps", "rhr")
    return RawTable(header, rows), wellbeing_schema(n_participants, n_weeks)
