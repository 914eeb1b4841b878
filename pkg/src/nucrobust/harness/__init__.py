"""Dataset I/O, the demo segmenter, experiment runs and report emission."""
from .bundle_io import load_bundle, read_manifest, save_bundle, tree_digest
from .experiment import (ColorStats, ExperimentConfig, RunRecord, prepare_color, read_records,
                         run_experiment, write_run)
from .report import emit_report, summary_csv
from .segment import SegmentParams, baseline_segment, segment_bundle

__all__ = [
    "load_bundle", "save_bundle", "read_manifest", "tree_digest",
    "ExperimentConfig", "RunRecord", "ColorStats", "prepare_color", "run_experiment",
    "write_run", "read_records", "emit_report", "summary_csv",
    "SegmentParams", "baseline_segment", "segment_bundle",
]
