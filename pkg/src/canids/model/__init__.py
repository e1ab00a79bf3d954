from .layers import LSTM, Bidirectional, Dense, RepeatVector, Reshape, param_count
from .network import FAMILIES, Autoencoder, ModelConfig, TrainedModel, build_layers
from .training import (
    Adam,
    TrainingDivergedError,
    global_mse,
    gradient_check,
    mean_reconstruction_error,
    signalwise_loss,
    signalwise_mse,
    train,
)

__all__ = [
    "Adam", "Autoencoder", "Bidirectional", "Dense", "FAMILIES", "LSTM", "ModelConfig", "RepeatVector",
    "Reshape", "TrainedModel", "TrainingDivergedError", "build_layers", "global_mse", "gradient_check",
    "mean_reconstruction_error", "param_count", "signalwise_loss", "signalwise_mse", "train",
]
