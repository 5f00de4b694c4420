"""Training-free grounded segmentation from free-form referring expressions."""
from anyword.config import PipelineConfig
from anyword.pipeline import Task, run_benchmark, run_pipeline
from anyword.textgraph import parse_expression

__all__ = ["PipelineConfig", "Task", "parse_expression", "run_benchmark", "run_pipeline"]
__version__ = "0.1.0"
