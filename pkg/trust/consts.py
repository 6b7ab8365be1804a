# layer kinds
CONV2D = 'conv2d'
RELU = 'relu'
MAXPOOL = 'maxpool'
AVGPOOL = 'avgpool'
GLOBALAVGPOOL = 'globalavgpool'
DENSE = 'dense'
SIGMOID = 'sigmoid'
UPSAMPLE_NEAREST = 'upsample-nearest'
CONCAT_SKIP = 'concat-skip'
LAYER_KINDS = (
    CONV2D, RELU, MAXPOOL, AVGPOOL, GLOBALAVGPOOL, DENSE, SIGMOID, UPSAMPLE_NEAREST, CONCAT_SKIP
)
PARAMETRIC_KINDS = (CONV2D, DENSE)

# relu backward rules
STANDARD = 'standard'
GUIDED = 'guided'
RELU_RULES = (STANDARD, GUIDED)

# architectures
ARCH_A = 'ARCH_A'
ARCH_B = 'ARCH_B'
SEGMENTER = 'SEGMENTER'
CLASSIFIER_ARCHS = (ARCH_A, ARCH_B)
ARCHITECTURES = (
    (ARCH_A, 'ARCH_A'),
    (ARCH_B, 'ARCH_B'),
    (SEGMENTER, 'SEGMENTER'),
)

# saliency methods, in report order
GRAD = 'GRAD'
SG = 'SG'
IG = 'IG'
SIG = 'SIG'
GCAM = 'GCAM'
XRAI = 'XRAI'
GBP = 'GBP'
GGCAM = 'GGCAM'
METHODS = (GRAD, SG, IG, SIG, GCAM, XRAI, GBP, GGCAM)
METHOD_NAMES = {
    GRAD: 'Gradient Explanation',
    SG: 'SmoothGrad',
    IG: 'Integrated Gradients',
    SIG: 'Smooth Integrated Gradients',
    GCAM: 'GradCAM',
    XRAI: 'XRAI (simplified)',
    GBP: 'Guided Backprop',
    GGCAM: 'Guided GradCAM',
}

# dataset
SEGMENTATION = 'segmentation'
DETECTION = 'detection'
FLAVORS = (
    (SEGMENTATION, 'segmentation'),
    (DETECTION, 'detection'),
)
EASY = 'easy'
HARD = 'hard'
DIFFICULTIES = (
    (EASY, 'easy'),
    (HARD, 'hard'),
)
DEFAULT_POSITIVE_FRACTIONS = {
    SEGMENTATION: 0.22,
    DETECTION: 0.40,
}
TRAIN = 'train'
VAL = 'val'
TEST = 'test'
SPLITS = (TRAIN, VAL, TEST)
SPLIT_RATIOS = {
    TRAIN: 0.81,
    VAL: 0.09,
    TEST: 0.10,
}
SYNTHETIC = 'synthetic'
IMPORTED = 'import'
DATASET_SOURCES = (
    (SYNTHETIC, 'synthetic'),
    (IMPORTED, 'import'),
)

# verdict grid
PASS = 'PASS'
FAIL = 'FAIL'
UTILITY_AVG = 'Utility(AVG)'
UTILITY_BASE = 'Utility(BASE)'
RANDOMIZATION = 'Randomization'
REPEATABILITY_LOW = 'Repeatability(LOW)'
REPEATABILITY_BASE = 'Repeatability(BASE)'
REPRODUCIBILITY_LOW = 'Reproducibility(LOW)'
REPRODUCIBILITY_BASE = 'Reproducibility(BASE)'
GRID_COLUMNS = (
    UTILITY_AVG, UTILITY_BASE, RANDOMIZATION,
    REPEATABILITY_LOW, REPEATABILITY_BASE,
    REPRODUCIBILITY_LOW, REPRODUCIBILITY_BASE,
)
LOW_SSIM_BASELINE = 0.5
BASE_LABELS = {
    SEGMENTATION: 'segmenter trained on masks',
    DETECTION: 'segmenter trained on rasterized boxes',
}
REPORT_SCHEMA = 'trust-report/1'

# numerics
BCE_EPSILON = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
RANDOMIZATION_STDDEV = 0.05
PR_THRESHOLD_CAP = 512
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
DICE_SMOOTHING = 1.0

# file formats
SALW_MAGIC = b'SALW1\n'
SALF_MAGIC = b'SALF1\x00\x00\x00'
