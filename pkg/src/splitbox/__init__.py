"""splitbox: an unprivileged Linux process sandbox.

Static, input-independent policy compiles into kernel-enforced rules
(filesystem/port/IPC scope plus an unconditional syscall deny set); only
runtime-dependent decisions - network destinations, HTTP requests, exec
argument vectors, captured filesystem effects - go through a narrow
user-notification supervisor.
"""

from .cow import EffectSummary, LayerSet, SeccompCowBackend
from .hook import Event, RuntimeContext, map_callback_return
from .launcher import (FeatureReport, LaunchError, LaunchOptions,
                       SandboxHandle, SandboxResult, StdioSpec, check_kernel,
                       confine_self, launch)
from .netpolicy import check_endpoint, classify_flow
from .pipeline import (ForkPlan, ForkRunResult, PipelineResult, Stage,
                       run_cow_fork, run_pipeline)
from .policy import (Access, CowConfig, EffectAction, EndpointRule,
                     EnforcementPlan, HttpRule, PathRule, PinnedAllowlist,
                     PolicyError, Protocol, ResourceLimits,
                     RuntimeHookConfig, SandboxSpec, compile_plan,
                     pin_resolution, validate)
from .policyfile import load_pipeline, load_policy, spec_from_dict
from .supervisor import Supervisor, SupervisorState, Verdict

__version__ = "0.1.0"

__all__ = [
    "Access", "CowConfig", "EffectAction", "EffectSummary", "EndpointRule",
    "EnforcementPlan", "Event", "FeatureReport", "ForkPlan", "ForkRunResult",
    "HttpRule", "LaunchError", "LaunchOptions", "LayerSet", "PathRule",
    "PinnedAllowlist", "PipelineResult", "PolicyError", "Protocol",
    "ResourceLimits", "RuntimeContext", "RuntimeHookConfig", "SandboxHandle",
    "SandboxResult", "SandboxSpec", "SeccompCowBackend", "Stage", "StdioSpec",
    "Supervisor", "SupervisorState", "Verdict", "check_endpoint",
    "check_kernel", "classify_flow", "compile_plan", "confine_self",
    "launch", "load_pipeline", "load_policy", "map_callback_return",
    "pin_resolution", "run_cow_fork", "run_pipeline", "spec_from_dict",
    "validate",
]
