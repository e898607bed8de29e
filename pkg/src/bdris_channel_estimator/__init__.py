"""BD-RIS cascaded channel estimation simulator"""

import asyncio

from .channel import SystemConfig
from .estimation import run_protocol
from .harness import CampaignSpec, run_campaign, run_trial


def serve():
    """Entry point for the MCP tool server."""
    from . import server

    asyncio.run(server.main())


__all__ = [
    "CampaignSpec",
    "SystemConfig",
    "run_campaign",
    "run_protocol",
    "run_trial",
    "serve",
]
