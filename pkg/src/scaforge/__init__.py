"""scaforge: profiled side-channel attack toolkit.

Recovers an AES-128 key byte from (real or simulated) electromagnetic
traces: simulate or import traces, train probabilistic classifiers on
S-box-output labels, and aggregate per-trace probabilities into key ranks.
"""

__version__ = "0.1.0"
