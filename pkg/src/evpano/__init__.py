"""Rotation-only panoramic tracking and mapping for event cameras.

The package estimates the 3-DOF orientation of a rotating event camera
directly from its event stream, while building a cylindrical panoramic
map of event-occurrence probabilities.  Submodules:

- ``geometry``    rotations, camera model, cylindrical projection, Jacobians
- ``events``      event records, stream parsing, packetization
- ``mapping``     panoramic occurrence / normalization map
- ``tracker``     per-packet Gauss-Newton pose refinement
- ``slam``        tracking + mapping pipeline over a full stream
- ``synthgen``    synthetic event-stream generation from a panorama
- ``evaluate``    trajectory alignment and angular-error metrics
- ``trajectories``  trajectory and ground-truth file I/O
- ``cli``         command line entry points
"""

__version__ = "0.1.0"
