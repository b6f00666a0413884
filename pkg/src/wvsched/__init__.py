"""Multi-user wireless video transmission: pricing, scheduling, and learning."""

from wvsched.model import (
    ChannelModel,
    Context,
    DataUnitSpec,
    GopTemplate,
    ModelError,
    ScheduleAction,
    UserState,
    action_set,
    advance_traffic,
    bandwidth_usage,
    build_context,
    distortion_reduction,
    payoff,
    sample_channel,
    transmit_energy,
)

__all__ = [
    "ChannelModel",
    "Context",
    "DataUnitSpec",
    "GopTemplate",
    "ModelError",
    "ScheduleAction",
    "UserState",
    "action_set",
    "advance_traffic",
    "bandwidth_usage",
    "build_context",
    "distortion_reduction",
    "payoff",
    "sample_channel",
    "transmit_energy",
]
