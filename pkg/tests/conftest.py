import os

# Pin BLAS threading before numpy loads anywhere, for stable timings and
# run-to-run reproducibility of the suite.
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")
