"""Physics-grounded volumetric blendshapes at desk scale: layered head
anatomy fitting, projective-dynamics facial simulation, training-data
generation, and a realtime neural approximation of the simulation."""

__version__ = "0.1.0"
