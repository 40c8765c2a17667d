"""SVG rendering of a scene with the queried field as an arrow lattice (ego frame)."""
from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .encoder import encode_context
from .evaluation import box_corners
from .field import query_velocity
from .scenario import Scenario, context_at, project_to_polyline

LATTICE = 20
OFF_MAP = 6.0


@dataclass(frozen=True)
class PlotConfig:
    x_range: tuple = (-15.0, 60.0)
    y_range: tuple = (-25.0, 25.0)
    px_per_m: float = 10.0
    arrow_scale: float = 0.3        # metres drawn per m/s
    lattice: int = LATTICE


def lattice_points(cfg: PlotConfig):
    xs = np.linspace(*cfg.x_range, cfg.lattice)
    ys = np.linspace(*cfg.y_range, cfg.lattice)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def on_map_mask(points, polylines, radius: float = OFF_MAP) -> np.ndarray:
    """Points within ``radius`` of any polyline."""
    if not polylines:
        return np.zeros(len(points), dtype=bool)
    d = np.min([project_to_polyline(points, pl)[0] for pl in polylines], axis=0)
    return d <= radius


def render_svg(s: Scenario, model, t: float = 2.0, planned=None, cfg: PlotConfig = PlotConfig()) -> str:
    """SVG text with map, agent boxes, expert and optional planned trajectory, and field arrows at time ``t``.

    ``planned`` is an optional world-frame ``(T+1, >=2)`` array.
    """
    view = context_at(s)
    emb = encode_context(view, model.encoder_cfg, model.store)
    frame = emb.features[0].frame
    local_map = emb.features[0].local_map
    (x0, x1), (y0, y1) = cfg.x_range, cfg.y_range
    k = cfg.px_per_m
    W, H = (x1 - x0) * k, (y1 - y0) * k

    def px(xy):
        xy = np.atleast_2d(xy)
        return np.column_stack([(xy[:, 0] - x0) * k, (y1 - xy[:, 1]) * k])

    def path(xy, **attrs):
        p = px(xy)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in p)
        extra = " ".join(f'{key.replace("_", "-")}="{val}"' for key, val in attrs.items())
        return f'<polyline points="{pts}" fill="none" {extra}/>'

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H:.0f}" '
           f'viewBox="0 0 {W:.0f} {H:.0f}">',
           f'<rect width="{W:.0f}" height="{H:.0f}" fill="white"/>']
    colors = {"reference_lane": "#bbbbbb", "road_edge": "#444444", "stop_line": "#d62728", "crosswalk": "#9467bd"}
    for e in s.map:
        dash = ' stroke-dasharray="6,4"' if e.kind == "reference_lane" else ""
        out.append(path(local_map[e.id], stroke=colors[e.kind], stroke_width=2).replace("/>", f"{dash}/>"))
    now = s.current_index
    for a in s.agents:
        if not a.is_valid(now):
            continue
        st = a.states[now]
        xy = frame.xy_to_local(st[:2])
        c = box_corners(xy[0], xy[1], frame.yaw_to_local(st[2]), *a.footprint)
        pts = " ".join(f"{p:.2f},{q:.2f}" for p, q in px(c))
        out.append(f'<polygon class="agent" points="{pts}" fill="#1f77b4" fill-opacity="0.5"/>')
    ego = box_corners(0.0, 0.0, 0.0, model.vehicle.length, model.vehicle.width)
    out.append('<polygon class="ego" points="' + " ".join(f"{p:.2f},{q:.2f}" for p, q in px(ego))
               + '" fill="#2ca02c" fill-opacity="0.6"/>')
    expert = frame.xy_to_local(s.ego.states[now:, :2])
    out.append(path(expert, stroke="#2ca02c", stroke_width=2, **{"class": "expert"}))
    if planned is not None:
        out.append(path(frame.xy_to_local(np.asarray(planned)[:, :2]), stroke="#ff7f0e", stroke_width=2,
                        **{"class": "plan"}))
    grid = lattice_points(cfg)
    keep = on_map_mask(grid, [pl for pl in local_map.values()])
    pts = grid[keep]
    if len(pts):
        vel = query_velocity(np.column_stack([pts, np.full(len(pts), t)]), emb, model.store, model.field_cfg)
        if vel.shape[1] == 1:
            vel = np.column_stack([vel[:, 0], np.zeros(len(vel))])
    else:
        vel = np.zeros((0, 2))
    for p, v in zip(pts, vel):
        a = px(p)[0]
        b = px(p + v * cfg.arrow_scale)[0]
        if np.hypot(*(b - a)) < 1e-9:
            out.append(f'<circle class="arrow" cx="{a[0]:.2f}" cy="{a[1]:.2f}" r="1.5" fill="#555555"/>')
        else:
            out.append(f'<line class="arrow" x1="{a[0]:.2f}" y1="{a[1]:.2f}" x2="{b[0]:.2f}" y2="{b[1]:.2f}" '
                       f'stroke="#555555" stroke-width="1.2" marker-end="url(#head)"/>')
    out.insert(1, '<defs><marker id="head" markerWidth="6" markerHeight="6" refX="5" refY="3" orient="auto">'
                  '<path d="M0,0 L6,3 L0,6 z" fill="#555555"/></marker></defs>')
    legend = f"t = {t:.1f} s; arrow length {cfg.arrow_scale:g} m per m/s; grid {cfg.lattice}x{cfg.lattice}"
    out.append(f'<text x="8" y="18" font-family="monospace" font-size="13">{escape(legend)}</text>')
    out.append("</svg>")
    return "\n".join(out)
