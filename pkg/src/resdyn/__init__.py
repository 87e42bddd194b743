"""Vehicle dynamic modeling with learned residual correction.

Open-loop dynamic models (rule-based bicycle or small MLP) predict pose by
integration; a residual corrector (sequence encoder feeding a sparse
variational GP) predicts the position error the open-loop model accumulates
over a fixed window and folds it back into the rollout.
"""

__version__ = "0.1.0"
