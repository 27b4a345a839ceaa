"""Joint partial optimal transport with pseudo labelling for speaker channel adaptation."""

from .ot_core import BACKEND, CostMatrix, TransportPlan, exact_plan, sinkhorn, transport_cost

__version__ = "0.1.0"

__all__ = ["BACKEND", "CostMatrix", "TransportPlan", "exact_plan", "sinkhorn", "transport_cost"]
