"""Edge image clustering: K-Means pipeline, distributed simulation, placement model."""
from .clustering import (ClusterRun, StopRule, approx_lloyd, assign_step, cluster_overlap,
                         detect_active, lloyd, r_value, seed_random, update_step)
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"
