"""Query-limited black-box adversarial attacks on video classifiers, desk scale."""

from .attack import (AdaptSettings, AttackConfig, AttackResult, AttackState,
                     TrajectoryRecord, adapt_hyperparams, attack_targeted,
                     attack_untargeted)
from .estimator import NESConfig, fd_estimate, nes_estimate, transform_losses
from .goal import Targeted, Untargeted
from .models import FeatureExtractor, ModelBundle, ToyClassifier
from .oracle import (BudgetExceeded, InProcessOracle, LossValue, OracleResponse,
                     OracleUnavailable, QueryCounter, RemoteOracle, adversarial_loss,
                     query_top1)
from .partition import PartitionSpec, PatchBasis, build_basis, project_onto_basis, rectify
from .tensor import Shape, clip_box, cosine_similarity, read_vtf, sign_of, write_vtf
from .tentative import (TentativeSpec, tentative_random, tentative_static,
                        tentative_transferred)

__version__ = "0.1.0"
