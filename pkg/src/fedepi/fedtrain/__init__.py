"""Detached federated training: protocol, privacy mechanics, and the
centralized oracle/baseline trainer."""

from .central import train_centralized
from .model import (
    Adam,
    ModelParams,
    PlainSGD,
    forward_logits,
    init_embeddings,
    init_params,
    make_optimizer,
    predict_proba,
)
from .observed import ObservedView, build_observed_view
from .privacy import (
    PrivacyConfig,
    calibrate_sigma,
    client_embedding_update,
    dpsgd_sanitize,
    server_aggregate,
)
from .protocol import (
    ClientResult,
    ClientState,
    ModelConfig,
    ServerState,
    TrainResult,
    Transcript,
    client_update,
    train,
)

__all__ = [
    "Adam",
    "ClientResult",
    "ClientState",
    "ModelConfig",
    "ModelParams",
    "ObservedView",
    "PlainSGD",
    "PrivacyConfig",
    "ServerState",
    "TrainResult",
    "Transcript",
    "build_observed_view",
    "calibrate_sigma",
    "client_embedding_update",
    "client_update",
    "dpsgd_sanitize",
    "forward_logits",
    "init_embeddings",
    "init_params",
    "make_optimizer",
    "predict_proba",
    "server_aggregate",
    "train",
    "train_centralized",
]
