"""Progressive ANN refinement with ternary residual codes on tiered memory.

Coarse PQ codes stay in fast memory for first-pass scoring; compact
ternary residual records (1.6 bits/dim plus two scalars) stream from far
memory to sharpen candidate distances; only the filtered survivors incur
full-precision fetches for exact re-ranking.
"""

from .estimator import (
    CalibrationModel,
    FeatureVector,
    QueryContext,
    calibrated_distance,
    estimate_ip,
    first_order,
    fit,
    make_query_context,
    sample_calibration_pairs,
    second_order_raw,
)
from .ivf import CandidateList, IvfIndex, build_ivf, search_coarse
from .pipeline import (
    BoundedTopK,
    QueryCost,
    RefineConfig,
    RefineResult,
    TierParams,
    modeled_latency,
    recall_at_k,
    refine,
    sweep_refinement,
)
from .pq import AdcTable, PQCodebook, PQConfig, adc_distance, adc_table, encode, reconstruct, train
from .ternary import (
    TernaryCode,
    TrqRecord,
    TrqStore,
    build_store,
    encode_ternary,
    pack,
    record_stride,
    ternary_inner_product,
    unpack,
)
from .vecstore import (
    Dataset,
    GroundTruth,
    brute_force_knn,
    read_bvecs,
    read_fvecs,
    read_ivecs,
    synth_gaussian,
    write_fvecs,
    write_ivecs,
)

__version__ = "0.1.0"
