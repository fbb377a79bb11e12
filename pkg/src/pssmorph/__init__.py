"""Postsynaptic shape descriptors for neuron surface meshes."""

__version__ = "0.1.0"
