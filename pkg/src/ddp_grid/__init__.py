"""Distributed dynamic programming for incentive-based load management."""
from .errors import (
    CodecError,
    CommandError,
    DDPError,
    DimensionError,
    GenerationError,
    InfeasibleScenarioError,
    ProtocolError,
    ScenarioError,
    SizeError,
)
from .knapsack import Solution, local_block_optimize, solve_bruteforce, solve_centralized
from .model import (
    Coalition,
    LoadSector,
    OperatorCommand,
    StateVector,
    UserLoad,
    compute_capacity,
    evaluate_load,
    evaluate_utility,
    is_feasible,
)
from .network import CostModel, FaultEvent, NetworkConfig, Topology, is_connected
from .protocol import (
    AgentState,
    ProtocolMessage,
    decode_message,
    encode,
    encode_message,
    ingest_neighbor,
    init_agent,
    locally_converged,
    state_update,
)
from .scenario import Scenario, load_scenario, scenario_from_json
from .simnet import RunTrace, apply_fault, run_asynchronous, run_synchronous

__version__ = "0.1.0"
