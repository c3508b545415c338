"""Whole-slide renal tumor classification from patch predictions."""
