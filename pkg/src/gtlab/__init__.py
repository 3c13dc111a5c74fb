"""Graph transformer expressivity lab: autodiff core, graph generators, encodings,
GNN / GT / GPS networks, exact constructions and size-extrapolation experiments."""

__version__ = "0.1.0"
