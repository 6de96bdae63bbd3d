"""Services package initialization."""

__all__ = [
    "torus",
    "measure_io",
    "measure_validator",
    "prokhorov",
    "symmetry",
    "tessellation",
    "generators",
    "report_writer",
]
