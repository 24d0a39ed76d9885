"""biflow: a bipartite dataflow runtime.

Graphs alternate between tensor vertices (shaped float32 buffers) and
operator vertices (numeric kernels).  A lane-serialized dispatcher walks a
graph by readiness propagation, graphs compose into iterated sequences, and
the same scheduling semantics back both the threaded executor and a
virtual-time cost simulator.  Builders assemble training topologies (single
device, parameter-server data parallelism, token-gated pipelines), a framed
TCP transport splits a graph across processes along its cross-host copies,
and a command-line front end drives the whole stack from JSON configs.
"""

from .graph import (
    BiGraph,
    GraphError,
    GraphSequence,
    Location,
    OperatorVertex,
    TensorVertex,
    ValidationReport,
    dump_graph,
    graph_from_json,
    graph_to_json,
    load_graph,
    merge,
    replicate,
    validate,
)
from .ops import (
    KINDS,
    KernelError,
    OpKindSpec,
    Tensor,
    TensorStore,
    read_tensor_file,
    write_tensor_file,
)
from .dispatcher import (
    DispatchError,
    RunContext,
    RunReport,
    TraceRecord,
    WorkerLane,
    merged_trace,
    run,
    run_sequence,
)
from .profiler import (
    COMPUTE,
    COPY,
    TRANSPORT,
    LaneClass,
    export_trace,
    iteration_gap,
    overlap_fraction,
)
from .costsim import (
    CostModel,
    FitResult,
    SimError,
    SimReport,
    fit_two_point,
    simulate,
    throughput_model,
)
from .builders import (
    LayerSpec,
    Layout,
    NetSpec,
    ParallelPlan,
    Stage,
    SyntheticFeed,
    TrainingSetup,
    build_data_parallel,
    build_model_parallel_pipeline,
    build_sgd_iteration,
    feeder,
    fill_tokens,
    init_params,
    param_names,
)
from .transport import (
    ChannelSpec,
    FrameError,
    HostPartition,
    SequencePartition,
    Transport,
    TransportError,
    decode_frame,
    encode_frame,
    partition_by_host,
    partition_sequence,
    recompose,
    run_distributed,
)

__all__ = [
    "BiGraph",
    "COMPUTE",
    "COPY",
    "ChannelSpec",
    "CostModel",
    "DispatchError",
    "FitResult",
    "FrameError",
    "GraphError",
    "GraphSequence",
    "HostPartition",
    "KINDS",
    "KernelError",
    "LaneClass",
    "LayerSpec",
    "Layout",
    "Location",
    "NetSpec",
    "OpKindSpec",
    "OperatorVertex",
    "ParallelPlan",
    "RunContext",
    "RunReport",
    "SequencePartition",
    "SimError",
    "SimReport",
    "Stage",
    "SyntheticFeed",
    "TRANSPORT",
    "Tensor",
    "TensorStore",
    "TensorVertex",
    "TraceRecord",
    "TrainingSetup",
    "Transport",
    "TransportError",
    "ValidationReport",
    "WorkerLane",
    "build_data_parallel",
    "build_model_parallel_pipeline",
    "build_sgd_iteration",
    "decode_frame",
    "dump_graph",
    "encode_frame",
    "export_trace",
    "feeder",
    "fill_tokens",
    "fit_two_point",
    "graph_from_json",
    "graph_to_json",
    "init_params",
    "iteration_gap",
    "load_graph",
    "merge",
    "merged_trace",
    "overlap_fraction",
    "param_names",
    "partition_by_host",
    "partition_sequence",
    "read_tensor_file",
    "recompose",
    "replicate",
    "run",
    "run_distributed",
    "run_sequence",
    "simulate",
    "throughput_model",
    "validate",
    "write_tensor_file",
]
