"""Kernel-driven federated learning simulator.

Clients upload per-sample Jacobian tensors instead of gradients; the server
stacks them, builds an empirical tangent kernel, and advances the global
model in closed form.  The package also ships the communication-efficient
variant (subsampling, seeded Gaussian input projection, top-k Jacobian
compression, synchronised shuffling), a FedAvg baseline, and an analysis
suite for the convergence/weight-gap theory behind the method.
"""

__version__ = "0.1.0"
