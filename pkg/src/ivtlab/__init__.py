"""Continual-learning laboratory built around increment vector transformation.

The package trains dense networks over class-incremental task streams,
maintains diagonal Fisher ledgers, periodically teleports parameters
toward oracle-like solutions, and verifies the underlying two-task
prediction in closed form on quadratic tasks.  See the README for the
module map and the ``ivtlab`` command-line entry point.
"""

__version__ = "0.1.0"

from .data import (
    CsvSchema,
    LabeledDataset,
    ReplayMemory,
    SplitDataset,
    Task,
    TaskStream,
    load_csv,
    load_idx,
    make_incremental_stream,
    synth_gaussian_tasks,
    update_memory,
)
from .fisher import FisherDiagonal, FisherLedger, begin_epoch_accumulator
from .geometry import (
    EvalSet,
    default_lambda_grid,
    landscape_grid,
    lmc_scan,
    stability_plasticity_curve,
)
from .ivt import IncrementTransform, apply_transform, build_transform, schedule_hook
from .metrics import (
    AccuracyMatrix,
    MetricsReport,
    average_accuracy,
    avg_improvement,
    compute_metrics,
    forgetting_measure,
    last_accuracy,
)
from .network import (
    NetworkSpec,
    ParamLayout,
    ParamVector,
    TrainConfig,
    build_network,
    evaluate_accuracy,
    expand_head,
    forward,
    loss_and_grad,
)
from .quadratic import (
    QuadraticTask,
    converged_chain,
    diagonalized_comparison,
    forgetting_and_bound,
    proposition1_gap,
    proposition1_predict,
    solve_incremental,
    solve_oracle,
)
from .training import (
    MemoryConfig,
    MethodSpec,
    RunRecord,
    SequentialState,
    run_sequence,
    train_joint_mtl,
    train_task,
)
