"""What a spurious correlation does to a model and its explanations.

The synthetic tabular generator plants three kinds of features:

  * core features    — actually drive the label in every environment
  * spurious features — correlated with the label in the training
                         environments, anti-correlated in the test one
  * noise features   — never related to the label

A model trained with plain empirical risk minimization happily leans on the
spurious features, so both its accuracy and its input-gradient explanations
fall apart when the correlation flips.  This script makes that visible with
nothing but a small MLP and a few seconds of CPU.

Run:  python demos/01_spurious_correlation.py
"""

import numpy as np

from saliencylab import (
    GeneratorConfig,
    HyperParams,
    ModelSpec,
    batch_attributions,
    generate,
    task_metric,
    train,
)

cfg = GeneratorConfig()             # 5 core + 5 spurious + 10 noise features
bundle = generate(cfg, seed=0)

print("environments and their spurious-feature correlation with the label:")
for env, rho in zip(bundle.train_envs, cfg.rho_train):
    print(f"  {env.env_id}: rho = {rho:+.2f}  ({len(env)} samples)")
print(f"  {bundle.test_env.env_id}: rho = {cfg.rho_test:+.2f}  "
      f"({len(bundle.test_env)} samples)   <- correlation reversed")

spec = ModelSpec(kind="mlp", hidden=(16, 16), input_shape=(20,),
                 output_dim=2, activation="relu")
model, history = train(bundle, spec, HyperParams(method="erm", seed=0))
print(f"\ntrained with plain risk minimization "
      f"(checkpoint from step {history.selected_step})")

for env in bundle.train_envs[:1] + [bundle.test_env]:
    print(f"  accuracy on {env.env_id}: {task_metric(model, env):.3f}")

# Where does the model think the signal lives?  Average the magnitude of the
# input gradient over test samples and group it by feature type.
env = bundle.test_env
attrs = batch_attributions(model, env.x[:256], env.y[:256].astype(np.int64))
mean_attr = np.abs(attrs).mean(axis=0)
groups = {
    "core": mean_attr[:cfg.d_core],
    "spurious": mean_attr[cfg.d_core:cfg.d_core + cfg.d_spur],
    "noise": mean_attr[cfg.d_core + cfg.d_spur:],
}
print("\nmean |input gradient| by feature group:")
for name, vals in groups.items():
    bar = "#" * int(round(40 * vals.mean() / mean_attr.max()))
    print(f"  {name:9s} {vals.mean():.4f}  {bar}")

print("\nThe spurious group soaks up attribution mass it does not deserve;"
      "\nsee 02_consistency_regularization.py for the fix.")
