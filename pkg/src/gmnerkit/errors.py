"""Exceptions shared across modules."""


class GroupTooSmall(ValueError):
    """A group operation needs at least two members."""
