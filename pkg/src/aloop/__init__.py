"""Active learning loop for image segmentation.

Subpackages cover the run-config blueprint (`config`), the sample pool and
annotation store (`datamgr`), the segmentation backend (`segbackend`), query
strategies (`strategies`), the orchestration service (`controller`), the
annotation protocol state machine (`protocol`), and the synthetic simulation
lab (`simlab`, `experiment`).
"""

__version__ = "0.1.0"
