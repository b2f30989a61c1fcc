"""Identifiability checks and noiseless recovery for inverter grid probing."""

from .feeder import (AdmittanceMatrix, Bus, BusPartition, FeederError, FeederGraph, Line,
                     PartitionError, build_admittance, feeder_from_dict, feeder_from_edges, ieee34,
                     load_feeder, load_partition, validate_partition)
from .powerflow import (BusOutputs, JacobianSet, PowerFlowError, ZeroVoltageError, ZipLoad,
                        eval_outputs, jacobians, solve_power_flow)

__version__ = "0.1.0"
