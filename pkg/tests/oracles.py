"""Independent scalar-loop re-implementations used as test oracles."""
import math


def wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def euler_turn_positions(v, yaw_rate, dt, n):
    """Closed-form forward-Euler positions for constant speed and yaw rate, from the origin heading +x.

    Uses the sum of cosines (sines) over an arithmetic progression.
    """
    out = [(0.0, 0.0)]
    d = yaw_rate * dt
    for k in range(1, n + 1):
        if abs(d) < 1e-15:
            out.append((v * dt * k, 0.0))
            continue
        ratio = math.sin(k * d / 2) / math.sin(d / 2)
        mid = (k - 1) * d / 2
        out.append((v * dt * ratio * math.cos(mid), v * dt * ratio * math.sin(mid)))
    return out


def imitation(samples, expert, advised):
    total, count = 0.0, 0
    for n in range(len(samples)):
        for t in range(1, len(expert)):
            x, y, yaw, v = samples[n][t]
            ex, ey, eyaw, _ = expert[t]
            dist = math.sqrt((x - ex) ** 2 + (y - ey) ** 2 + wrap(yaw - eyaw) ** 2)
            ax, ay = advised[n][t - 1]
            gap = (ax - v * math.cos(yaw)) ** 2 + (ay - v * math.sin(yaw)) ** 2
            total += math.exp(-dist / 2) * gap
            count += 1
    return total / count


def correction(samples, expert, advised, dt):
    total, count = 0.0, 0
    T = len(expert) - 1
    for n in range(len(samples)):
        for t in range(1, T):
            x, y = samples[n][t][0], samples[n][t][1]
            tx, ty = (expert[t + 1][0] - x) / dt, (expert[t + 1][1] - y) / dt
            ax, ay = advised[n][t - 1]
            w = math.exp(-math.hypot(x - expert[t][0], y - expert[t][1]) / 2)
            total += w * math.hypot(tx - ax, ty - ay)
            count += 1
    return total / count


def measurements(states, advised, dt):
    """Five raw measurements by explicit loops; ``advised`` rows are (vx, vy) pairs."""
    T = len(states) - 1
    acc = [(states[t + 1][3] - states[t][3]) / dt for t in range(T)]
    yr = [wrap(states[t + 1][2] - states[t][2]) / dt for t in range(T)]
    jerk = [(acc[t + 1] - acc[t]) / dt for t in range(T - 1)]
    ya = [(yr[t + 1] - yr[t]) / dt for t in range(T - 1)]
    vd = 0.0
    for t in range(1, T + 1):
        _, _, yaw, v = states[t]
        vd += (v * math.cos(yaw) - advised[t - 1][0]) ** 2 + (v * math.sin(yaw) - advised[t - 1][1]) ** 2
    return [sum(a * a for a in acc), sum(j * j for j in jerk), sum(r * r for r in yr), sum(a * a for a in ya), vd]


def softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def cost(d, w_raw):
    return sum(di * softplus(wi) for di, wi in zip(d, w_raw))


def selection(costs, ades, k, sharpness=1.0):
    order = sorted(range(len(costs)), key=lambda i: (costs[i], i))[:k]
    c = [costs[i] for i in order]
    a = [ades[i] for i in order]

    def norm(xs):
        lo, hi = min(xs), max(xs)
        return [0.0] * len(xs) if hi - lo <= 0 else [(x - lo) / (hi - lo) for x in xs]

    lc = [sharpness * (1 - e) for e in norm(c)]
    la = [sharpness * (1 - e) for e in norm(a)]
    za = sum(math.exp(x) for x in la)
    pa = [math.exp(x) / za for x in la]
    lse = math.log(sum(math.exp(x) for x in lc))
    return -sum(p * (x - lse) for p, x in zip(pa, lc))


def entropy(p):
    return -sum(x * math.log(x) for x in p if x > 0)
