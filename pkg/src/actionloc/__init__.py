"""Temporal action localization on precomputed frame features.

Library layout: `autodiff` (array engine), `encoder` / `decoder` /
`model` (network), `targets` / `losses` / `optim` / `train` (training),
`detect` (inference), `evaluate` (mAP), `data` (datasets), `cli`
(command surface), `oracles` / `verify` (brute-force cross-checks).
"""

__version__ = "0.1.0"
