from .render import (CUTOFF, DEFAULT_NEAR, TILE_SIZE, GaussianGrads,
                     IntersectionSet, LayerGrads, RenderContext, RenderGrads,
                     RenderOutput, StaleContextError, backward, intersect,
                     render)
from .reference import render_reference

__all__ = [
    "CUTOFF", "DEFAULT_NEAR", "TILE_SIZE", "GaussianGrads", "IntersectionSet",
    "LayerGrads", "RenderContext", "RenderGrads", "RenderOutput",
    "StaleContextError", "backward", "intersect", "render", "render_reference",
]
