"""socialstep: social path planning for bipedal robots.

A CVAE planner learns socially acceptable ego trajectories from crowd
recordings, locomotion-safety specifications enter training as
differentiable temporal-logic losses, and a reduced-order LIP step
planner tracks the result under a collision barrier constraint.
"""

__version__ = "0.1.0"
