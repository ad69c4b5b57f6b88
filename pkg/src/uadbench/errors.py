"""Exception hierarchy shared by all uadbench modules.

Every error carries a short machine-readable ``category`` so the command
line front-end can report it without parsing messages.
"""


class UADError(Exception):
    category = "error"


# data
class ZeroPercentile(UADError):
    category = "zero_percentile"


class AlreadyNormalized(UADError):
    category = "already_normalized"


class EmptyBrain(UADError):
    category = "empty_brain"


class EmptyTrain(UADError):
    category = "empty_train"


class UnreadableFile(UADError):
    category = "unreadable_file"


class ShapeMismatch(UADError, ValueError):
    category = "shape_mismatch"


class InvalidConfig(UADError, ValueError):
    category = "invalid_config"


# networks / training
class InvalidSpec(UADError, ValueError):
    category = "invalid_spec"


class NonPositiveSigma(UADError, ValueError):
    category = "non_positive_sigma"


class DegenerateMixture(UADError):
    category = "degenerate_mixture"


class NonFiniteLoss(UADError):
    category = "non_finite_loss"

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class PhaseOrderViolation(UADError):
    category = "phase_order_violation"


class CheckpointMismatch(UADError):
    category = "checkpoint_mismatch"


# scoring
class InvalidN(UADError, ValueError):
    category = "invalid_n"


class NoKLTerm(UADError):
    category = "no_kl_term"


class DivergedRestoration(UADError):
    category = "diverged_restoration"


class InadmissibleScorer(UADError, ValueError):
    category = "inadmissible_scorer"


# metrics
class DegenerateLabels(UADError, ValueError):
    category = "degenerate_labels"


class BinMismatch(UADError, ValueError):
    category = "bin_mismatch"


class EmptyResults(UADError):
    category = "empty_results"
