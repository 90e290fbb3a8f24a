"""Published per-plane results: (recall, precision, f1) as printed, four decimals."""

PER_PLANE = {
    "fetal_abdomen": (0.8756, 0.8224, 0.8482),
    "fetal_femur": (0.9702, 0.9828, 0.9764),
    "maternal_cervix": (0.7442, 0.9327, 0.8279),
    "fetal_thorax": (0.9343, 0.9089, 0.9214),
    "fetal_brain": (0.9741, 1.0000, 0.9869),
    "other": (0.9267, 0.8703, 0.8976),
}
F1_ROUNDING_TOL = 5e-4
