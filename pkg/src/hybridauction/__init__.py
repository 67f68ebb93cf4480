"""Learned and VCG mechanisms for hybrid store/bundle sponsored-search auctions."""
from .model import (AuctionInstance, AuctionSamples, AuctionSetting, BidProfile, MechanismOutcome,
                    enumerate_bundles, expected_bids, utility)
from .vcg import VcgOutcome, vcg_batch, vcg_mechanism, welfare_max_allocation
from .network import HybridRegretNet, NetworkParams
from .data import PopulationSpec, generate, ingest_log, setting_from_preset
from .training import LagrangeState, TrainConfig, Trainer
from .metrics import EvalConfig, EvalReport, LearnedMechanism, VcgMechanism, evaluate
from .estimators import HRegNetAuction, VCGAuction

__version__ = "0.1.0"

__all__ = [
    "AuctionInstance", "AuctionSamples", "AuctionSetting", "BidProfile", "MechanismOutcome",
    "enumerate_bundles", "expected_bids", "utility",
    "VcgOutcome", "vcg_batch", "vcg_mechanism", "welfare_max_allocation",
    "HybridRegretNet", "NetworkParams",
    "PopulationSpec", "generate", "ingest_log", "setting_from_preset",
    "LagrangeState", "TrainConfig", "Trainer",
    "EvalConfig", "EvalReport", "LearnedMechanism", "VcgMechanism", "evaluate",
    "HRegNetAuction", "VCGAuction",
]
