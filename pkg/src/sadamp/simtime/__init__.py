"""Averaged dq time-domain simulator, admittance scanning and instability detection."""

from .sim import Event, Scenario, ScenarioError, Simulation, WaveRecord, device_ids, simulate
from .analysis import ScanError, detect_instability, InstabilityVerdict, scan_admittance

__all__ = [
    "Event", "Scenario", "ScenarioError", "Simulation", "WaveRecord", "device_ids", "simulate",
    "ScanError", "detect_instability", "InstabilityVerdict", "scan_admittance",
]
