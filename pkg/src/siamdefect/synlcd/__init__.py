"""Synthetic LCD defect generation."""
from .defects import (
    BlobDefect, DefectLayer, LineDefect, NoEdgePoints, edge_points, generate_abpt_defects,
    generate_line_defects, kmeans, render_defects,
)
from .patterns import builtin_patterns, load_patterns
from .perturb import Perturbation, apply_perturbations, sample_perturbation
from .poisson import laplacian_residual, poisson_blend
from .synthesis import (
    DEFECT_TYPES, SynthesisSpec, SynthSample, build_dataset, plan_dataset, read_manifest, sample_spec,
    synthesize_sample,
)
