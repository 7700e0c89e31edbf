"""Render paper-style figures from atgame's on-disk artifacts.

Pure post-hoc rendering: inputs are the CSV/JSON files a run leaves
behind, outputs are image files. Nothing here imports the training
library.
"""

import matplotlib

matplotlib.use("Agg")

__version__ = "0.1.0"
