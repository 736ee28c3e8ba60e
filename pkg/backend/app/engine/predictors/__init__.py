from .base import (
    ArrivalPredictor,
    EmptyDatasetError,
    NonFiniteObservationError,
    ObservationScale,
    OraclePredictor,
    PredictorState,
    TrajectoryBatch,
    collect_trajectories,
    encode_observation,
    pending_mask,
)
from .physics import PhysicsPredictor, physics_predict
from .recurrent import (
    CheckpointFormatError,
    HiddenState,
    Minibatch,
    NetParams,
    RecurrentPredictor,
    TrainingDivergedError,
    TrainingHyper,
    TrainingResult,
    check_gradients,
    decode_arrivals,
    finite_difference_error,
    loss_and_grad,
    parameter_count,
    prepare_minibatch,
    step_hidden,
    train,
)
