"""Numerically exact open-quantum-system dynamics via the quasi-adiabatic
propagator path integral, with mask-based path merging, amplitude filtering
and a multi-worker merge protocol."""

from . import bath, config, distributed, engine, oracle, pathstore, system
from .bath import (EtaTable, OhmicSD, StructuredPeakSD, TabulatedSD,
                   bath_correlation, compute_eta_table, evaluate_sd,
                   influence_increment, reorganization_energy)
from .engine import RunSpec, Trajectory, run, spectrum
from .pathstore import Configuration, Mask, OmegaStore, dense_mask, full_mask
from .system import (RCModelSpec, SystemModel, build_reaction_coordinate_model,
                     build_system_model, map_structured_to_rc)

__version__ = "0.1.0"
