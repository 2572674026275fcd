"""Coded-computation masking for offloading bilinear layers to untrusted workers."""

from .coding import (CodingScheme, EncodedBatch, IntegrityVerdict, VirtualBatch, decode_forward, decode_grad,
                     encode, gen_scheme, grad_coefficients, verify_forward, verify_grad)
from .nn import LayerSpec, Model, TrainConfig, train_plaintext
from .privacy import (PrivacyParams, mi_bound_colluding, mi_bound_joint, mi_bound_single, mi_oracle_scalar,
                      required_sigma2)
from .protocol import Coordinator, ProtocolConfig, WorkerProfile, run_virtual_batch
from .training import infer_protocol, train_protocol

__version__ = "0.1.0"
