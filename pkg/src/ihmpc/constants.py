"""Numerical tolerances shared by the solvers and the test-suite.

=====================  ==========  ==================================================
name                   value       used for
=====================  ==========  ==================================================
INF                    1e20        "no bound" sentinel inside bound vectors
INF_THRESHOLD          1e19        |b| >= this is treated as an infinite bound
SOLVE_RESIDUAL         1e-10       relative residual bound of ``linalg.solve``
SYMMETRY               1e-10       symmetry check on H, Q, R
DARE_STEP_TOL          1e-13       doubling iteration stopping tolerance
DARE_MAX_DOUBLINGS     200         doubling iteration cap
DARE_RESIDUAL          1e-9        relative DARE residual bound
STABILITY_MARGIN       1e-9        rho(A + BK) < 1 - margin
Z1_MAX_COND            1e12        Z1 condition number above which it is "singular"
QP_EPS_ABS             1e-10       ADMM absolute tolerance
QP_EPS_REL             1e-10       ADMM relative tolerance
QP_MAX_ITER            200000      ADMM iteration cap
QP_ACTIVE              1e-8        dual magnitude for strong activity
QP_BOUND_TOL           1e-8        distance to a bound for an active constraint
EXPERT_MATCH           1e-8        prediction vs closed loop tolerance
EXPERT_MAX_HORIZON     256         horizon cap for expert generation
PSD_FLOOR              1e-8        floor for learned Q, R eigenvalues
=====================  ==========  ==================================================
"""

INF = 1e20
INF_THRESHOLD = 1e19

SOLVE_RESIDUAL = 1e-10
SYMMETRY = 1e-10

DARE_STEP_TOL = 1e-13
DARE_MAX_DOUBLINGS = 200
DARE_RESIDUAL = 1e-9
STABILITY_MARGIN = 1e-9
Z1_MAX_COND = 1e12

QP_EPS_ABS = 1e-10
QP_EPS_REL = 1e-10
QP_MAX_ITER = 200000
QP_ACTIVE = 1e-8
QP_BOUND_TOL = 1e-8

EXPERT_MATCH = 1e-8
EXPERT_MAX_HORIZON = 256

PSD_FLOOR = 1e-8
