"""Reference workloads and latency coefficients used by tests and examples.

``SINGLE_CALIBRATION`` is a four-point (output tokens, seconds) table for
single-request decoding on a 7B-class model; its least-squares line is
roughly ``0.0230 n + 0.19``.

The batch coefficient sets are synthetic:

* ``BATCH_LIGHT`` has a strong per-row decode cost (``k3``) so padded batch
  time grows almost linearly in ``b``; used with uniform token laws.
* ``BATCH_HEAVY`` has a cheap per-row decode cost and a large prefill
  term, chosen so that with ``lognormal(7, 0.7)`` tokens at ``lam = 0.43``
  the delay-minimizing fixed batch size is 8 and throughput peaks at a
  finite batch size.
"""

from __future__ import annotations

from .dist import LogNormal, TruncatedGaussian, Uniform
from .latency import BatchLatencyModel, SingleLatencyModel, fit_single

SINGLE_CALIBRATION: tuple[tuple[float, float], ...] = (
    (128.0, 2.91),
    (256.0, 5.88),
    (512.0, 12.63),
    (1024.0, 23.47),
)

BATCH_LIGHT = BatchLatencyModel(k1=0.01, k2=0.15, k3=0.002, k4=0.02)
BATCH_HEAVY = BatchLatencyModel(k1=0.02, k2=0.2, k3=0.0003, k4=0.0025)

CHAT_TOKENS = LogNormal(7.0, 0.7)
UNIFORM_1000 = Uniform(1000.0)
UNIFORM_2000 = Uniform(2000.0)
NARROW_GAUSSIAN = TruncatedGaussian(800.0, 20.0)


def single_model() -> SingleLatencyModel:
    """Least-squares fit of :data:`SINGLE_CALIBRATION`."""
    return fit_single(SINGLE_CALIBRATION)[0]
