"""Independent straight-line reference for the triaxial closure.

Written without importing the package: plain floats, one explicit Euler update
per call, used as a second-implementation oracle by the simulator tests.
"""
import math

G0, NU, N_EXP, PHI_C, EC0, LAM, XI, D_EXP, PATM = 3000.0, 0.3, 0.67, 31.2, 0.937, 0.022, 0.71, 2.0, 101.325


def critical_ratio():
    s = math.sin(math.radians(PHI_C))
    return 6.0 * s / (3.0 - s)


def moduli(e, p):
    G = G0 * (2.97 - e) ** 2 / (1.0 + e) * (p / PATM) ** N_EXP
    K = 2.0 * G * (1.0 + NU) / (3.0 * (1.0 - 2.0 * NU))
    ec = EC0 - LAM * (p / PATM) ** XI
    mc = critical_ratio()
    return G, K, ec, mc * (ec / e) ** D_EXP, mc * (e / ec) ** D_EXP


def drained_path(e0, sigma3, increments, substeps):
    p, q, e, ev = sigma3, 0.0, e0, 0.0
    for de in increments:
        h = de / substeps
        for _ in range(substeps):
            G, K, ec, mp, mpt = moduli(e, p)
            eta = q / p
            dq = 3.0 * G * (h - eta / mp * abs(h))
            dev = mpt * abs(h) - eta * h
            p = p + dq / 3.0
            q = q + dq
            ev = ev + dev
            e = e - (1.0 + e0) * dev
    return p, q, ev, e


def undrained_path(e0, sigma3, increments, substeps):
    p, q, u = sigma3, 0.0, 0.0
    for de in increments:
        h = de / substeps
        for _ in range(substeps):
            G, K, ec, mp, mpt = moduli(e0, p)
            eta = q / p
            dq = 3.0 * G * (h - eta / mp * abs(h))
            dp = -K * (mpt * abs(h) - eta * h)
            p = p + dp
            q = q + dq
            u = u + dq / 3.0 - dp
    return p, q, u / sigma3


def triangle(amplitude, n_cycles, steps_per_branch):
    h = amplitude / steps_per_branch
    one = [h] * steps_per_branch + [-h] * (2 * steps_per_branch) + [h] * steps_per_branch
    return one * n_cycles


if __name__ == "__main__":
    print("state functions at e=0.70, p=300:", moduli(0.70, 300.0))
    print("drained 100-step monotonic e0=0.70, 98 kPa:", drained_path(0.70, 98.0, [0.001] * 100, 10))
    print("undrained cycle 0.05% e0=0.925, 300 kPa:",
          undrained_path(0.925, 300.0, triangle(0.0005, 1, 15), 10))
