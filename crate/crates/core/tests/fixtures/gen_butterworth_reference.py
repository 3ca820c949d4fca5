"""Regenerates butterworth_reference.json with scipy.

Run once; the JSON is committed and consumed by the Rust tests.
"""
import json

import numpy as np
from scipy import signal

CUTOFF = 0.8
LAGS = list(range(0, 41))
out = []
for order in (1, 2):
    for tc in (2.0, 5.0, 10.0, 15.0, 20.0):
        b, a = signal.butter(order, CUTOFF, "lowpass", analog=False)
        w, h = signal.freqz(b, a)
        t = tc * w / 2
        gain = 5 * np.log(np.abs(h))
        lags = np.array(LAGS, dtype=float)
        interp = np.interp(lags, t, gain)  # flat beyond the last grid point
        out.append(
            {
                "order": order,
                "critical_time": tc,
                "b": b.tolist(),
                "a": a.tolist(),
                "time": t.tolist(),
                "gain": gain.tolist(),
                "lags": LAGS,
                "lag_gain": interp.tolist(),
            }
        )
with open("butterworth_reference.json", "w") as f:
    json.dump(out, f)
