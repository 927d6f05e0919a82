"""syschaos: black-box syscall fault injection and behavioral diffing.

Attach to a running process as a pure black box, perturb chosen syscalls
(injected errnos and/or delays), monitor behavior at the syscall, resource
and application levels across before/during/after phases, and report the
behavioral diff.
"""

from .diffing import (BehaviorLabel, BehaviorSnapshot, ClassifierConfig, DiffReport,
                      SeriesLabel, SeriesStats, Verdict, classify, detect_spike, diff,
                      label_series, summarize)
from .monitor import (ResourceMonitor, TargetDead, TargetHandle, resolve_target,
                      start_sampling)
from .orchestrator import (CampaignConfig, CampaignResult, ExperimentResult,
                           plan_campaign, run_campaign, run_experiment)
from .store import MetricSample, MetricsStore, SeriesKey, TimeRange
from .tables import (DelaySpec, ErrnoCode, SyscallId, errno_by_name, relevant_syscalls,
                     syscall_by_name)
from .tracer import PerturbationSpec, SyscallEvent, TerminalEvent, TracerSession, attach
from .workload import (FixtureCommand, ReplayResult, RequestOutcome, RequestSpec,
                       WorkloadSpec, replay_file_workload, run_workload)

__version__ = "0.1.0"
