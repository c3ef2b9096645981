"""Deterministic simulator of the Luca presence-tracing protocol.

The package models every actor of the Luca system (guest apps, venues,
scanners, health departments, and the central backend server), drives
seeded end-to-end scenarios through a simulated carrier network, runs a
backend-server adversary in passive and active postures, and checks the
design's security objectives O1-O6 against simulation ground truth.
"""

__version__ = "0.1.0"
