"""Independent brute-force reference implementations used by the tests.

These deliberately avoid the library's own code paths: rotation matrices
are built by hand from the Rodrigues formula and every reduction is an
explicit Python loop.  Slow and boring on purpose.
"""

import math


def rotvec_to_matrix(rotvec):
    """Explicit Rodrigues construction of the 3x3 rotation matrix."""
    rx, ry, rz = float(rotvec[0]), float(rotvec[1]), float(rotvec[2])
    theta = math.sqrt(rx * rx + ry * ry + rz * rz)
    if theta < 1e-14:
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    kx, ky, kz = rx / theta, ry / theta, rz / theta
    c = math.cos(theta)
    s = math.sin(theta)
    v = 1.0 - c
    return [
        [c + kx * kx * v, kx * ky * v - kz * s, kx * kz * v + ky * s],
        [ky * kx * v + kz * s, c + ky * ky * v, ky * kz * v - kx * s],
        [kz * kx * v - ky * s, kz * ky * v + kx * s, c + kz * kz * v],
    ]


def apply_one(rotvec, trans, point):
    m = rotvec_to_matrix(rotvec)
    x = m[0][0] * point[0] + m[0][1] * point[1] + m[0][2] * point[2] + trans[0]
    y = m[1][0] * point[0] + m[1][1] * point[1] + m[1][2] * point[2] + trans[1]
    z = m[2][0] * point[0] + m[2][1] * point[1] + m[2][2] * point[2] + trans[2]
    return (x, y, z)


def mtre_bruteforce(est_rotvec, est_trans, gt_rotvec, gt_trans, points):
    """Per-point loop: mean distance between the two mapped point sets."""
    total = 0.0
    n = 0
    for p in points:
        a = apply_one(est_rotvec, est_trans, p)
        b = apply_one(gt_rotvec, gt_trans, p)
        total += math.sqrt(
            (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2
        )
        n += 1
    return total / n


def auc_bruteforce(scores, labels):
    """O(n^2) pairwise Mann-Whitney AUC with half credit for ties.

    ``labels`` are booleans (True = positive class).
    """
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    if not pos or not neg:
        raise ValueError("need both classes")
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))
