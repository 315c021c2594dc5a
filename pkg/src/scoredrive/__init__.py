"""Score-regularized distillation of a diffusion driving prior into a
one-step deterministic trajectory policy, with a toy closed-loop driving
world and a composite safety/comfort scorer."""

__version__ = "0.1.0"
