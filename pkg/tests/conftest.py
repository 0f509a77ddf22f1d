import os

# pin BLAS threading before numpy loads anywhere: acceptance runs fork worker
# pools and a fixed thread count keeps reductions deterministic
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest


@pytest.fixture(scope="session")
def synthetic_stream(tmp_path_factory):
    """Four-task 2-feature stream: f0 carries the label, f1 is pure noise."""
    rng = np.random.default_rng(0)
    rows = ["task,label,f0,f1"]
    for t in range(4):
        for i in range(240):
            y = i % 2
            f0 = (y * 2 - 1) * rng.uniform(0.5, 1.0)
            f1 = rng.normal()
            rows.append(f"t{t},{y},{f0!r},{f1!r}")
    path = tmp_path_factory.mktemp("data") / "stream.csv"
    path.write_text("\n".join(rows) + "\n")
    return str(path)


@pytest.fixture(scope="session")
def one_task_stream(tmp_path_factory):
    rng = np.random.default_rng(1)
    rows = ["task,label,f0,f1,f2"]
    for i in range(120):
        y = i % 2
        f0 = (y * 2 - 1) * rng.uniform(0.5, 1.0)
        rows.append(f"a,{y},{f0!r},{rng.normal()!r},{rng.normal()!r}")
    path = tmp_path_factory.mktemp("data") / "one_task.csv"
    path.write_text("\n".join(rows) + "\n")
    return str(path)


def mnist_dir():
    """Directory holding the MNIST IDX files, from the environment or the
    repo-local data directory."""
    for candidate in (os.environ.get("SMART_MNIST_DIR"),
                      os.path.join(os.path.dirname(__file__), "..", "data", "mnist")):
        if candidate and os.path.exists(os.path.join(candidate, "train-images-idx3-ubyte.gz")):
            return os.path.abspath(candidate)
        if candidate and os.path.exists(os.path.join(candidate, "train-images-idx3-ubyte")):
            return os.path.abspath(candidate)
    return None
