"""Consensus-Before-Talk spectrum etiquette: closed forms, protocol and simulators."""

__version__ = "0.1.0"

from .analytic import (  # noqa: E402
    CbtParams,
    Divergent,
    LatencyOutcome,
    LbtParams,
    ParameterError,
    cbt_latency,
    crossing_point,
    gossip_dissemination_delay,
    gossip_fraction,
    lbt_backlog_sequence,
    lbt_convergence_threshold,
    lbt_fixed_point,
    lbt_latency,
)
from .protocol import (  # noqa: E402
    Aggregation,
    ConsensusPolicy,
    DistributedSpectrumLedger,
    KeyedHashScheme,
    Normalization,
    Scheduling,
    SpectrumAccessTransaction,
    consensus_timestamp,
    generate_sat,
    verify_sat,
)
from .gossip import GossipState, Mode, Timing, run_dissemination  # noqa: E402
from .access import Etiquette, LatencyReport, ScenarioConfig, simulate, simulate_cbt, simulate_lbt, sweep  # noqa: E402
