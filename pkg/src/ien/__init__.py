"""Information elevation unit (IEU) and network (IEN) for online action detection.

Everything is written against NumPy with hand-derived backward passes. The
main entry points are re-exported here; see the submodules for the rest.
"""

from .cells import CellParams, CellState, CellVariant, cell_backward, cell_forward, unroll
from .datagen import StreamSpec, generate_stream, read_features, segment_windows, write_features
from .errors import ConfigError, FormatError, IenError, NumericError, ShapeError, UsageError
from .metrics import EvalSet, mean_average_precision, mean_calibrated_ap
from .network import (IenConfig, IenModel, ien_backward, ien_forward, ien_loss, load_checkpoint,
                      predict_current, save_checkpoint, stream_infer, train)

__version__ = "0.1.0"
