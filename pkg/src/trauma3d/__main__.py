"""``python3 -m trauma3d``; applies the thread-count env override before numpy loads."""
import os
import sys


def main(argv=None):
    threads = os.environ.get("TRAUMA3D_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = threads
    from .cli import main as run
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
