"""Input checks shared by the estimators and module functions."""
import numpy as np
from sklearn.utils import check_array


def check_points(X, name="X", allow_empty=False):
    """Validate an (n, 3) finite float array."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True,
                    ensure_min_samples=0 if allow_empty else 1, input_name=name)
    if X.shape[1] != 3:
        raise ValueError("%s must have 3 columns, got %d" % (name, X.shape[1]))
    return X


def check_labels(labels, n, name="labels"):
    if labels is None:
        return None
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise ValueError("%s must have one entry per point (%d), got shape %s" % (name, n, lab.shape))
    if lab.size and (lab.min() < 0 or lab.max() > 255):
        raise ValueError("%s must fit in an unsigned byte" % name)
    return lab.astype(np.uint8)


def check_rotation(R, atol=1e-9):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError("rotation must be 3x3, got %s" % (R.shape,))
    if not np.allclose(R.T @ R, np.eye(3), atol=atol) or abs(np.linalg.det(R) - 1.0) > atol:
        raise ValueError("rotation is not orthonormal with determinant +1")
    return R
