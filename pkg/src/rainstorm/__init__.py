"""Rainstorm identification, tracking, factorization and data-driven simulation."""
from .gridio import (GridField, GridGeometry, apply_cutoff, intensity_curve, load_field,
                     save_field)
from .ident import IdentParams, Region, Segment, identify_field, identify_segments
from .metrics import (FactorSummary, StormMetrics, bootstrap_ci, compare_factors,
                      compute_metrics, factorize, trim_negligible)
from .tracking import StormEvent, TrackParams, read_events, track, write_events

__version__ = "0.1.0"
