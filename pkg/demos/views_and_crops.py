"""
Which crops keep an image's complexity?
=======================================

Positive pairs for contrastive training should agree on complexity.  This
script measures how well the entropy of a crop tracks the entropy of its
source as the crop shrinks, for the three augmentation tiers, and then
shows the crop-and-merge corpus expansion.
"""

# %%
from clic import crop_and_merge, gen_synthetic, global_entropy, make_pair
from clic.config import TrainConfig
from clic.views import crop_study, format_crop_study, merged_count

images = gen_synthetic("mosaic", 500, seed=0).images

# %%
# Sides are fractions of the source side.  ``oc`` only crops, ``fa`` adds
# flips and brightness jitter, ``ma`` adds contrast jitter and blur too.
rows = crop_study(images, [1.0, 0.8, 0.643, 0.3], ["oc", "fa", "ma"], seed=0)
print(format_crop_study(rows))

# %%
# The default training pair: a query view and a key view cut from the same
# image, both resized to the training resolution.
pair = make_pair(images[0], TrainConfig(), seed=1)
print("source GE", round(pair.source_ge, 3),
      "query GE", round(global_entropy(pair.query_view), 3),
      "key GE", round(global_entropy(pair.key_view), 3))

# %%
# Crop-and-merge turns one source into many pseudo-images by tiling pairs
# of same-size crops and their mirror images into a 2x2 grid.
big = gen_synthetic("noise", 1, seed=3, size=160).images[0]
for c in (2, 3, 4, 5):
    merged = crop_and_merge(big, c, seed=0)
    assert len(merged) == merged_count(c)
    print(f"c={c}: {len(merged)} merged images, corpus grows {1 + len(merged)}x")
