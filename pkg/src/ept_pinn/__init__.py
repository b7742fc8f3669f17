"""Electrical properties and de-noised B1+ from sine coordinate networks.

Two networks are trained jointly: one maps position to the complex B1+
field, the other to the relative complex permittivity, with a penalty on
the Helmholtz residual ``lap B + k0^2 eps_c B``.
"""
from .evaluation import EvalReport, evaluate, pnae, sample_networks
from .forward_sim import Grid, PhantomSpec, SyntheticDataset, default_phantom, generate
from .network import MlpConfig, MlpParams, init_sine_mlp
from .physics import CoordinateMap, PhysicsConstants, complex_permittivity, eps_to_props
from .trainer import TrainConfig, train

__version__ = "0.1.0"
