"""Calibration of electrophysiology parameter fields from ERP intervals."""
