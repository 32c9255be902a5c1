from .blackbox import (
    BlackboxResult,
    BoundaryParams,
    BoundaryStartError,
    QueryBudget,
    TransferResult,
    boundary_attack,
    nes_attack,
    nes_grad,
    transfer_attack,
    write_query_log,
)
from .whitebox import (
    INF,
    AttackConfig,
    AttackObjective,
    adapt,
    best_of,
    cw,
    fgsm,
    lp_norm,
    mim,
    norm_name,
    objective_values,
    parse_norm,
    pgd,
    project,
    step_direction,
)
from ..losses import cw_logit_loss
