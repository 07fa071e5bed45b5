"""foodstudy: image-based dietary assessment platform.

Participants record before/after eating-occasion image pairs with a CLI
food-record client, a server runs pluggable image analysis and the
participant review loop, and researchers refine annotations over HTTP,
producing a downloadable food-image dataset with visual and nutrition
groundtruth.
"""

__version__ = "0.1.0"
