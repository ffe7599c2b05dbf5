"""XANES spectrum prediction with an E(3)-equivariant graph network.

Records are dicts in the JSON Lines dataset format (lattice, pbc, positions,
numbers, absorber, spectrum, e0) or their JSON text.
"""

import json

from . import _core
from ._core import Error, cg_residual, energy_grid, finite_derivatives, normalize_edge_step, tiny_gradcheck

__all__ = [
    "Error",
    "Model",
    "cg_residual",
    "energy_grid",
    "finite_derivatives",
    "normalize_edge_step",
    "run_cli",
    "synth_records",
    "tiny_gradcheck",
    "train",
    "variance_baseline",
]


def _lines(records):
    return [r if isinstance(r, str) else json.dumps(r) for r in records]


def synth_records(n, seed=7):
    """Synthetic Fe-O records as dicts."""
    return [json.loads(line) for line in _core.synth_records(n, seed)]


def variance_baseline(records):
    return _core.variance_baseline(_lines(records))


def train(config, records, out=""):
    """Train with a run config dict (sections train, model, loss) and return the result summary."""
    return _core.train(json.dumps(config), _lines(records), out)


def run_cli(*args):
    """Run the command line in-process; returns (exit code, stdout, stderr)."""
    return _core.run_cli([str(a) for a in args])


class Model:
    """Wraps a model built from a config dict or loaded from a checkpoint directory."""

    def __init__(self, config=None, seed=0, _core_model=None):
        self._m = _core_model if _core_model is not None else _core.Model(json.dumps(config or {}), seed)

    @classmethod
    def load(cls, checkpoint_dir):
        return cls(_core_model=_core.Model.load(str(checkpoint_dir)))

    @property
    def config(self):
        return json.loads(self._m.config_json)

    @property
    def parameter_count(self):
        return self._m.parameter_count

    def parameter_report(self):
        return dict(self._m.parameter_report())

    def predict(self, records):
        """Spectra of shape (records, grid points) and edge energies in eV."""
        return self._m.predict(_lines(records))

    def perturb(self, scale, seed):
        self._m.perturb(scale, seed)

    def invariance(self, structures=5, motions=20, seed=0):
        return self._m.invariance(structures, motions, seed)
