"""UWB TDOA indoor localization toolkit.

Anchor placement analysis and optimization against Cramer-Rao lower
bounds, an error-state Kalman filter fusing IMU and TDOA, and a
simulation harness that compares achieved error to the theoretical
bounds.
"""

__version__ = "0.1.0"
