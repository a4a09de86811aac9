"""Small-pole landmark recognition from sparse LiDAR.

Modules follow the processing chain: ``scan_model`` and ``synth`` produce
sessions, ``pole_detect`` and ``track_assoc`` label them automatically,
``pole_image`` turns observations into cylindrical signatures, ``encoder``
learns embeddings and ``retrieval`` scores cross-session recognition.
"""

__version__ = "0.1.0"
