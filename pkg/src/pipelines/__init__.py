"""Pipeline package initialization."""

__all__ = ["extraction", "allocation", "campaigns"]
