"""Desk-scale distributed network intrusion detection.

Sensors capture a broadcast segment's traffic by redirecting it through
themselves with ARP-table modifications, balance it across upstream
channels by flow hash, and stream it to a head-server that persists every
record and dispatches it to pluggable solver analyzers, whose findings come
back as RFC 4765 IDMEF alerts. A deterministic segment simulator stands in
for physical deployments and makes the capture strategies comparable.
"""

__version__ = "0.1.0"
