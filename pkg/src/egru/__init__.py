"""Event-based gated recurrent units.

Two model forms share one parameter container: a continuous-time hybrid
system trained with an event-driven adjoint method, and a discrete-time
recursion trained with sparse surrogate-gradient BPTT.
"""

from .numerics import OpCounter, matvec_counted, sigmoid, sigmoid_prime, sparse_matvec_counted, tanh, tanh_prime
from .params import (Gradients, LayerParams, enforce_threshold_positivity,
                     init_params, load_checkpoint, save_checkpoint)
from .discrete import (BatchTrace, DiscreteTrace, egru_backward, egru_backward_batch,
                       egru_forward, egru_forward_batch, egru_step, gru_step,
                       pseudo_derivative)
from .continuous import (Event, EventRecord, HybridState, InputRecord,
                         IntegratorConfig, Trajectory, apply_input_event,
                         apply_internal_event, decay_activations, detect_crossing,
                         dump_events, euler_discretize, flow_c, load_events, simulate)
from .adjoint import (AdjointState, GrazingEventError, LossSpec, TraceSpec,
                      adjoint_event_transition, adjoint_flow, backward,
                      evaluate_loss, traces_at)
from .optim import (AdamState, adam_step, bce_loss, clip_global_norm,
                    cross_entropy_softmax, exp_trace, sparsity_regularizers)
from .metrics import activity_sparsity, backward_sparsity, effective_mac_report, write_metrics_csv

__version__ = "0.1.0"
