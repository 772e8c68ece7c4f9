"""Virtual-inertia controller selection and its parameter set.

``TABLE_I`` holds the published parameter values per scheme, keyed by the
configuration names.  ``SHARED_DEFAULTS`` are the remaining engineering
defaults (PLL gains, current loop, filters that the table does not list).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType

SCHEMES = ("CPC", "VSG", "VSG-PID", "VSM", "VSM-PD", "VSM-PID")

TABLE_I = MappingProxyType({
    "CPC": {"k_Pp": 0.045, "k_Pi": 0.023},
    "VSG": {"k_vsg_p": 100.0, "k_vsg_d": 33.6, "w_vsg": 0.01},
    "VSG-PID": {"k_vsg_pid_p": 100.0, "k_vsg_pid_i": 286.0, "k_vsg_pid_d": 33.6, "w_vsg_pid": 0.01},
    "VSM": {
        "k_pv": 0.29, "k_iv": 92.0, "k_ffe": 0.0, "w_qf": 200.0, "k_q": 0.1, "w_vf": 200.0,
        "l_s": 0.25, "r_s": 0.01, "k_w": 20.0, "T_a": 4.0, "k_d": 40.0, "w_d": 5.0,
        "f_b": 50.0, "k_AD": 0.3, "w_AD": 50.0,
    },
    "VSM-PD": {"k_vsm_pd_p": 100.0, "k_vsm_pd_d": 500.0, "w_vsm_pd": 1.0, "k_w_vsm_pd": 200.0},
    "VSM-PID": {
        "k_vsm_pid_p": 3000.0, "k_vsm_pid_i": 476.0, "k_vsm_pid_d": 12600.0,
        "w_vsm_pid": 1.0, "k_w_vsm_pid": 2000.0,
    },
    "common": {"R_d": 0.01, "pll_filter_T": 0.001},
})

# Not in the table.  w_* entries with unit "s" in the table are time constants.
SHARED_DEFAULTS = MappingProxyType({
    "pll_kp": 0.8,         # pu speed per pu voltage error
    "pll_ki": 50.0,        # pu speed per (pu voltage error * s)
    "T_pf": 0.1,           # low-pass on output power for the droop feedback, s
    "T_lag": 0.005,        # inner current loop closure, s
    "i_max": 1.2,          # converter current limit, pu
    "k_pq": 0.1,           # reactive power PI, proportional
    "k_iq": 10.0,          # reactive power PI, integral 1/s
    "T_trim": 5.0,         # VSM power-reference trim, s
    "omega_ref": 1.0,      # grid speed reference
    "vsm_current_limit": 1.2,
})

# In the VSM family the PLL only measures grid frequency for the supplementary
# controller.  The VSM-PID derivative path has a high-frequency gain of 12600 pu,
# and with the synchronising PLL tuning above that loop is unstable near 40 Hz.
VSM_MEASUREMENT_PLL = MappingProxyType({"pll_kp": 0.2, "pll_ki": 3.0})

VSM_FAMILY = ("VSM", "VSM-PD", "VSM-PID")
USES_PLL = ("CPC", "VSG", "VSG-PID", "VSM-PD", "VSM-PID")


def default_parameters(scheme: str) -> dict[str, float]:
    """Every parameter the scheme reads, at its default value."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown controller scheme {scheme!r}; expected one of {SCHEMES}")
    params = dict(TABLE_I["common"])
    params.update(SHARED_DEFAULTS)
    if scheme in VSM_FAMILY:
        params.update(VSM_MEASUREMENT_PLL)
        params.update(TABLE_I["VSM"])
    params.update(TABLE_I[scheme])
    return params


@dataclass(frozen=True)
class VIControllerConfig:
    scheme: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = default_parameters(self.scheme)
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"unknown parameters for {self.scheme}: {sorted(unknown)}")
        merged.update({k: float(v) for k, v in self.params.items()})
        for k, v in merged.items():
            if k.startswith("k_") and v < 0:
                raise ValueError(f"gain {k} must be non-negative")
            if (k.startswith("w_") or k.startswith("T_") or k == "pll_filter_T") and v <= 0:
                raise ValueError(f"filter constant {k} must be positive")
        object.__setattr__(self, "params", merged)

    def __getitem__(self, key: str) -> float:
        return self.params[key]

    @property
    def w_b(self) -> float:
        """Angle-integration base speed in rad/s, derived from the rated frequency."""
        return 2 * math.pi * self.params.get("f_b", 50.0)

    @property
    def uses_pll(self) -> bool:
        return self.scheme in USES_PLL

    @property
    def is_vsm(self) -> bool:
        return self.scheme in VSM_FAMILY

    @property
    def k_w(self) -> float:
        """Frequency-controller gain of the active VSM variant."""
        if self.scheme == "VSM-PD":
            return self.params["k_w_vsm_pd"]
        if self.scheme == "VSM-PID":
            return self.params["k_w_vsm_pid"]
        return self.params["k_w"]
