"""Federated multimodal activity-recognition simulator.

Privacy-level client partitioning, FedAvg training, and mutual
global/group-model learning with per-modality ensemble inference, run on
synthetic multimodal sensor data.
"""

__version__ = "0.1.0"
