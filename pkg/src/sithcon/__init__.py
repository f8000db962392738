"""Scale-invariant temporal history networks and experiments."""

from . import autodiff, datasets, models, sith, train_eval  # noqa: F401

__version__ = "0.1.0"
