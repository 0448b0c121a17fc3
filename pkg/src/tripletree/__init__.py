"""
tripletree: reconstruction of ultrametric binary trees from noisy
closest-pair experiments on leaf triples, with a simulation harness and
the information-theoretic indistinguishability certificate.
"""

from .noise_oracle import (
    CustomModel,
    ExpectationOracle,
    HomogeneousModel,
    NoiselessModel,
    OracleState,
    expectation_query,
    make_model,
    p_correct_homogeneous,
    query,
    triple_distribution,
)
from .stats import (
    DiscreteDistribution,
    LowerBoundPair,
    build_lower_bound_pair,
    distinguishability_report,
    generalized_hoeffding_tail,
    hellinger,
    hellinger_sq,
    hoeffding_radius,
    tvd,
)
from .topology import (
    ReconstructionConfig,
    ReconstructionFailure,
    ScoreVerdict,
    assemble_from_triples,
    build_subtree,
    compare_sums,
    completion_induced,
    completion_quotient,
    partition,
    reconstruct_topology,
    sibling_scores,
)
from .tree_core import (
    BucketPartition,
    CorruptTreeError,
    InfeasibleTreeError,
    NewickParseError,
    Tree,
    bucket_partition,
    closest_pair,
    from_newick,
    generate_random_ultrametric,
    induced_topology,
    quotient,
    to_newick,
    topology_equal,
    tree_from_topology,
    validate_ultrametric,
)
from .weights import (
    EstimationFailure,
    HeightEstimates,
    HeavyPath,
    WeightConfig,
    aggregate_anchor_probs,
    anchor_estimate,
    classify_heavy,
    compute_light_tree,
    final_correction,
    height_from_prob,
    invert_F,
    reconstruct_left_heavy,
    reconstruct_right_path,
    reconstruct_weights,
)

__version__ = "0.1.0"
