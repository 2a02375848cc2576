"""Few-shot indoor localization from CSI amplitudes.

A self-contained meta-learning stack: a tiny autodiff engine with
second-order support, the 1-d CNN position regressor it drives, a
synthetic multi-scenario CSI generator, the MAML / FOMAML / TB-MAML
trainers plus conventional and transfer baselines, and the benchmark
experiments that compare them.
"""

__version__ = "0.1.0"
