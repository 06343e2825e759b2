"""Energy-aware device selection and resource allocation for wireless federated learning.

Building blocks:

- ``flsim``: the federated-learning statistical process (partitioning, local
  training, aggregation, evaluation, statistical features).
- ``wireless``: per-device computation/communication time, energy and rate
  formulas plus per-round totals.
- ``solver``: the minimum-energy resource allocation tool (CPU frequency,
  transmit power, bandwidth) for a selected device subset under a time QoS.
- ``environment``: the real wireless-FL decision process (reset/step, reward,
  prompt rendering, trajectory recording).
- ``worldmodel``: the learned transition model for the FL-statistics part and
  the virtual environment built from it.
- ``policy``: masked autoregressive selection policies, heuristic baselines,
  and the external text-backend protocol.
- ``grpo``: group-relative policy optimization (and a PPO variant) of the
  selection policy.
- ``verification``: executable checks of the decoupling result and the
  finite-horizon simulation bound on toy MDPs.
- ``config`` / ``cli``: experiment configuration, presets and the command-line
  pipeline runner.
"""

__version__ = "0.1.0"
