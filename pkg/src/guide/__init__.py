"""Glucose decision-support workbench.

Subpackages cover the pipeline end to end: CSV ingestion and splits
(``data``), glucose forecasting (``predictor``), meal scheduling
(``mealgen``), the decision environment (``env``), the clinically shaped
reward (``reward``), numpy function approximators (``approximator``), RL
agents (``agents``), evaluation metrics and statistics (``metrics``), the
command line (``cli``) and the what-if HTTP service (``service``).
"""

__version__ = "0.1.0"
