"""Show how SI-SDR and the filtered-projection SDR react to common distortions.

    python demos/metric_sanity.py
"""
import numpy as np

from tsenet import metrics
from tsenet.trainer import si_sdr

rng = np.random.default_rng(0)
s = rng.standard_normal(8000)
noise = rng.standard_normal(8000)
noise -= (noise @ s) / (s @ s) * s
noise *= np.sqrt((s @ s) / 10 / (noise @ noise))

cases = {
    "identical": s,
    "scaled by 0.3": 0.3 * s,
    "orthogonal noise at 10 dB": s + noise,
    "short echo [1, -0.5, 0.25]": np.convolve(s, [1.0, -0.5, 0.25])[:8000],
    "DC offset +2": s + 2.0,
}
print(f"{'estimate':30s} {'SI-SDR':>8s} {'SDR taps=1':>11s} {'SDR taps=32':>12s}")
for name, est in cases.items():
    print(f"{name:30s} {si_sdr(est, s):8.2f} {metrics.sdr_bsseval(est, [s], taps=1):11.2f} "
          f"{metrics.sdr_bsseval(est, [s], taps=32):12.2f}")
print("\nThe echo counts as allowed distortion once the projection filter is long enough;")
print("SI-SDR removes the mean first, so a DC offset costs nothing there.")
