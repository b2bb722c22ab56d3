"""Open-loop sinusoidal gait with proportional balance torque, used as a test fixture."""
import numpy as np

from umc.damage import DamageArrays, DamageSpec, JointFault
from umc.env import EnvConfig, leg_thrust, reset, step

# pinned by a coarse grid search over (omega, kp, amplitudes)
OMEGA = 4.0
KP = 10.0
AMP_PRE = 7.0
AMP_HEALTHY_POST = 3.0
ONSET = 100


def run_gait(spec: DamageSpec, amp_post=(AMP_PRE, AMP_PRE), steps=1000, cfg=EnvConfig(), seed=0,
             omega=OMEGA, kp=KP, amp_pre=AMP_PRE):
    """Roll out the scripted gait; returns per-step records until the episode ends."""
    state, _ = reset([seed], cfg, onset=[spec.onset_step])
    dmg = DamageArrays.from_specs([spec], cfg.n_joints)
    nl = cfg.n_leg_joints
    log = {"phi": [], "thrust": [], "x": [], "tau": [], "q": [], "qd": []}
    for t in range(steps):
        amp = amp_post if t >= spec.onset_step else (amp_pre,) * cfg.n_legs
        a = np.zeros(cfg.n_joints)
        for leg in range(cfg.n_legs):
            for j in range(cfg.joints_per_leg):
                a[leg * cfg.joints_per_leg + j] = amp[leg] * np.sin(omega * t * cfg.dt + leg * np.pi)
        a[nl:] = -kp * state.q[0, nl:]
        state, res = step(state, a[None], dmg, cfg)
        log["phi"].append(float(state.phi[0]))
        log["thrust"].append(leg_thrust(state.q, state.qd, cfg)[0])
        log["x"].append(float(state.x[0]))
        log["tau"].append(res.tau_applied[0])
        log["q"].append(state.q[0])
        log["qd"].append(state.qd[0])
        if res.done[0]:
            break
    return {k: np.array(v) for k, v in log.items()}, state


def torque_fault_spec(joints=(0, 1), onset=ONSET, cfg=EnvConfig(), detectable=True):
    lim = cfg.damage_limits()
    f = JointFault(sensor_failed=detectable, torque_limit=lim.torque_limit, detectable=detectable)
    return DamageSpec({j: f for j in joints}, onset, 3 if detectable else 6)
