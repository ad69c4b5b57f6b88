"""Train a VAE on healthy phantom slices and compare the four scoring methods.

A deliberately small run (a couple of minutes on one core).  Numbers are
noisy at this scale; the point is the API.
Run: python3 demos/02_train_and_score.py
"""
import numpy as np

from uadbench.data import PhantomConfig, SliceBatch, extract_slices, generate_phantoms, normalize_volume
from uadbench.metrics import evaluate
from uadbench.postproc import PostprocConfig, postprocess_scores
from uadbench.scoring import score_volume
from uadbench.zoo import TrainConfig, train


def cohort(n, rate, seed, name):
    cfg = PhantomConfig(n_subjects=n, anomaly_rate=rate, seed=seed, dataset_id=name)
    return [normalize_volume(v) for v in generate_phantoms(cfg)]


healthy = cohort(12, 0.0, 0, "healthy")
lesion = cohort(3, 1.0, 1, "lesion")
train_batch = SliceBatch.concat([extract_slices(v, 64) for v in healthy[:10]])
val_batch = SliceBatch.concat([extract_slices(v, 64) for v in healthy[10:]])
print(f"{len(train_batch.pixels)} training slices, {len(val_batch.pixels)} validation slices")

cfg = TrainConfig(max_epochs=8, batch_size=16, learning_rate=1e-3, seed=0)
model = train("VAE", train_batch, val_batch, cfg, input_size=64, channels=(16, 32, 64, 64))
for row in model.history:
    print(f"epoch {row['epoch']:2d}  train {row['train_loss']:.4f}  val {row['val_loss']:.4f}")

pp = PostprocConfig()
options = {"mc": dict(n_samples=10), "restoration": dict(n_iters=50)}
for method in ("reconstruction", "mc", "gradient", "restoration"):
    kw = options.get(method, {})
    scores = [postprocess_scores(score_volume(model, v, method, **kw).scores, v.brain_mask, pp)
              for v in lesion]
    report, _ = evaluate(method, scores, [v.gt_mask for v in lesion], [v.brain_mask for v in lesion], pp)
    print(f"{method:15s} AUPRC {report.auprc:.3f}  AUROC {report.auroc:.3f}  best DICE {report.best_dice:.3f}"
          f"  (prevalence {report.extra['prevalence']:.4f})")

# restored images should sit closer to healthy anatomy than the inputs
v = lesion[0]
field = score_volume(model, v, "restoration", n_iters=50).scores
print("mean |x - y| inside lesions", float(np.abs(field[v.gt_mask]).mean()),
      "elsewhere in the brain", float(np.abs(field[v.brain_mask & ~v.gt_mask]).mean()))
