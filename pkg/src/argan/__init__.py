"""Generator-reconstruction defense for traffic-sign classification.

Library layout:

* ``dataset``        -- ingestion, splits, synthetic data, range conversion
* ``models``         -- classifier / generator / critic builders, checkpoints
* ``gan_training``   -- gradient-penalty critic objective and training loop
* ``reconstruction`` -- latent inversion (the defense core)
* ``framework``      -- five-stage training pipeline with resume
* ``attacks``        -- FGSM, DeepFool, C&W (L2), PGD (L2), transfer attacks
* ``defenses``       -- preprocessing baselines and the defense pipeline
* ``evaluation``     -- metrics, comparison tables, perturbation sweeps
* ``config`` / ``cli`` / ``experiments`` -- orchestration surface
"""

__version__ = "0.1.0"
