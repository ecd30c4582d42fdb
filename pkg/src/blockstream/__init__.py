"""On-demand executable delivery with action-based block prefetching."""

from .client import ClientConfig, ClientRuntime, PageCache, PagePool, RedirectSet, RunReport, run_trace
from .latency import LatencyModel
from .model import (Action, ActionKind, ActionStore, Segment, Trace, TraceEvent, load_actions,
                    parse_trace, format_trace, save_actions, segment_split)
from .predictor import Predictor, PredictorConfig, PredictorDecision, fallback_scan
from .provider import ExecutableImage, Provider, init_preload, normalize_segment, segment_variance
from .server import BlockServer, ServerConfig, VirtualClock
from .sim import (RunMetrics, SyntheticTraceSpec, baseline_readahead, compare_strategies, generate_trace,
                  simulate, simulate_run, table2_metrics)

__version__ = "0.1.0"
