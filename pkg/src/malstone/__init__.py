"""MalStone benchmark kit: MalGen data generation and MalStone A/B engines."""
from malstone.engines import run_malstone_a, run_malstone_b
from malstone.malgen import generate_dataset
from malstone.model import GenConfig

__all__ = ["GenConfig", "generate_dataset", "run_malstone_a", "run_malstone_b"]
__version__ = "0.1.0"
