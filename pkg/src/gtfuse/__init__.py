"""Continuous-time ground-truth trajectory estimation from MoCap, IMU and a
device under test, with a matching simulator and trajectory metrics."""

__version__ = "0.1.0"
