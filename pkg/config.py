"""Configuration settings for the Byzantine-robust optimization lab."""

# Schema / reproducibility
SCHEMA_VERSION = 1
DEFAULT_SEED = 0

# Problems
DEFAULT_L2 = 1e-3  # weight of the squared l2 term in logistic regression
HETEROGENEITY_POINTS = 32  # points sampled around x0 to estimate zeta^2
LOGISTIC_HESSIAN_BOUND = 0.5  # spectral bound of the softmax Hessian block
LABELED_PROBLEMS = ("logistic_synthetic", "logistic_mnist")

# Oracles
NOISE_GAUSSIAN = "gaussian_iid"
NOISE_SUBSAMPLING = "sample_subsampling"
NOISE_CHAIN = "bernoulli_chain"

# Aggregators
WEISZFELD_TOL = 1e-8
WEISZFELD_MAX_ITER = 200
WEISZFELD_SINGULARITY = 1e-12
ROBUST_RULES = [
    "krum",
    "median",
    "trimmed_mean",
    "faba",
    "geometric_median",
    "centered_clipping",
]
ALL_RULES = ["ideal", "mean"] + ROBUST_RULES

# Attacks
GAUSSIAN_ATTACK_STD = 30.0
SIGN_FLIP_SCALE = 1.0
IPM_EPSILON = 0.1
ATTACKS = [
    "gaussian",
    "sign_flip",
    "label_flip",
    "sample_duplicate",
    "zero_value",
    "isolation",
    "alie",
    "ipm",
    "bit_flip",
]
# label flip needs losses with labels to poison
LABEL_FREE_ATTACKS = [a for a in ATTACKS if a != "label_flip"]

# Optimizers
QUERY_CAP = 10**6  # total oracle queries allowed for one schedule
MAX_PROX_OUTER = 10**4  # Gamma clamp for the inexact proximal point method
# Byrd-Nester defaults for the manual (experiment) schedule
MANUAL_BETA = 0.9
MANUAL_THETA = 0.1
MANUAL_ALPHA = 0.5

# Lower-bound constructions
CHAIN_MAX_DIM = 64
CHAIN_SCALE = 152.0
GADGET_GRID_BITS = 26  # output quantization of the Lemma-1 gadget aggregator

# Experiments (section-5 protocol)
STEP_SIZE = 0.1
BATCH_SIZE = 32
EPOCHS = 45
NUM_NODES = 10
NUM_BYZANTINE = 2
TAIL_FRACTION = 0.25
METRICS_HEADER = ["round", "oracle_queries", "grad_norm", "f_gap", "agg_deviation", "accuracy"]
SUMMARY_FILE = "summary.json"
METRICS_FILE = "metrics.csv"
GRID_FILE = "grid.json"
CSV_NAN = "NaN"  # written for columns a run does not track

# Robustness suite
SUITE_TRIALS = 10**5
SUITE_DIM = 10
SUITE_CHUNK = 2000  # trials per worker task

# MNIST
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}
MNIST_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DOWNLOAD_TIMEOUT = 60
