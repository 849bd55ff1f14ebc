"""ratelab: trace-driven video-call rate-control lab.

Simulate calls over bandwidth traces, log telemetry from a GCC-style
controller, train a conservative distributional actor-critic offline from
those logs, and compare policies on held-out traces.
"""

__version__ = "0.1.0"

from .traces import (BandwidthTrace, SyntheticSpec, TraceStats, parse_trace_csv,
                     gen_synthetic_trace, trace_stats, filter_corpus, split_corpus)
from .sim import (SimConfig, SessionLog, TickRecord, FeedbackReport, FreezeSpan,
                  run_session, detect_freezes, ConstantController)
from .gcc import GccController, GccConfig
from .telemetry import (Dataset, RewardParams, Transition, build_state, compute_reward,
                        extract_transitions, dataset_from_logs, write_dataset,
                        read_dataset, drift_score)
from .learner import (TrainHyper, ModelBundle, PolicyController, train, bc_train,
                      train_step, quantile_huber_loss, save_model, load_model)
from .oracle import OracleConfig, OracleController, oracle_decide, action_set_from_log
from .evalkit import QoEReport, CorpusSummary, qoe, summarize, compare
from .corpus import build_corpus
