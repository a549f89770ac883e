from .distill import (
    kl_divergence,
    prob_distill_loss,
    relation_distill_loss,
    relation_loss_from_similarity,
    similarity_matrix,
)
from .objective import LossReport, detection_loss, total_loss
from .oim import OimState, oim_logits, oim_loss, oim_loss_and_update, oim_probabilities
