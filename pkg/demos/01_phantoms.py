"""Generate a small phantom cohort, normalise it and cut it into training slices.

Writes ``phantoms.png`` with one axial slice per subject and the lesion outline.
Run: python3 demos/01_phantoms.py
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from uadbench.data import PhantomConfig, extract_slices, generate_phantoms, normalize_volume

cohort = generate_phantoms(PhantomConfig(n_subjects=4, anomaly_rate=1.0, seed=3, dataset_id="lesion"))
cohort = [normalize_volume(v) for v in cohort]

for v in cohort:
    brain = v.brain_mask.sum()
    lesion = v.gt_mask.sum()
    print(f"{v.subject_id}: {brain} brain voxels, {lesion} lesion voxels ({lesion / brain:.2%})")

# every axial slice that touches the brain becomes one training sample
batch = extract_slices(cohort[0], size=64)
print("slices from the first subject:", batch.pixels.shape, "range", batch.pixels.min(), batch.pixels.max())

fig, axes = plt.subplots(1, len(cohort), figsize=(3 * len(cohort), 3))
for ax, v in zip(axes, cohort):
    z = int(np.argmax(v.gt_mask.sum(axis=(0, 1))))
    ax.imshow(v.intensities[:, :, z].T, cmap="gray", origin="lower")
    ax.contour(v.gt_mask[:, :, z].T, levels=[0.5], colors="r", linewidths=0.8)
    ax.set_title(f"{v.subject_id}, z={z}", fontsize=8)
    ax.axis("off")
fig.tight_layout()
fig.savefig("phantoms.png", dpi=100)
print("wrote phantoms.png")
