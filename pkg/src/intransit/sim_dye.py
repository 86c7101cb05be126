"""Two-dimensional dye transport on a frozen channel flow.

A small finite-volume stand-in for an ensemble member: a horizontal channel
with circular obstacles, a steady divergence-free velocity field stored on
cell faces (staggered grid), and a dye concentration updated with explicit
first-order upwind advection plus central diffusion.  Two inlet segments on
the left boundary inject dye; their concentration, width and duration are
the six uncertain parameters of a study.

Global cell index is ``y * nx + x``; concentration arrays have shape
``(ny, nx)`` so ``c.ravel()`` is already in global order.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import CFLViolationError, ConfigError
from .launcher import ParameterSet

FIELD_NAME = "dye"


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    length: float = 2.0
    height: float = 1.0

    @property
    def dx(self) -> float:
        return self.length / self.nx

    @property
    def dy(self) -> float:
        return self.height / self.ny

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def index(self, x: int, y: int) -> int:
        return y * self.nx + x

    def coords(self, cell: int) -> tuple[int, int]:
        y, x = divmod(cell, self.nx)
        return x, y

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        xc = (np.arange(self.nx) + 0.5) * self.dx
        yc = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(xc, yc)


@dataclass(frozen=True, eq=False)
class FrozenFlow:
    """Face velocities ``u`` (ny, nx+1) and ``v`` (ny+1, nx), diffusivity and solid mask."""

    grid: Grid
    u: np.ndarray
    v: np.ndarray
    diffusivity: float
    solid: np.ndarray

    def divergence(self) -> np.ndarray:
        g = self.grid
        return (self.u[:, 1:] - self.u[:, :-1]) / g.dx + (self.v[1:, :] - self.v[:-1, :]) / g.dy

    def cell_velocity(self) -> tuple[np.ndarray, np.ndarray]:
        return 0.5 * (self.u[:, 1:] + self.u[:, :-1]), 0.5 * (self.v[1:, :] + self.v[:-1, :])

    def max_outflow_rate(self) -> float:
        g = self.grid
        out = (
            np.maximum(self.u[:, 1:], 0) / g.dx
            + np.maximum(-self.u[:, :-1], 0) / g.dx
            + np.maximum(self.v[1:, :], 0) / g.dy
            + np.maximum(-self.v[:-1, :], 0) / g.dy
        )
        return float(out.max())

    def stable_dt(self, safety: float = 0.9) -> float:
        """Largest step keeping the update a convex combination (hence monotone)."""
        g = self.grid
        rate = self.max_outflow_rate() + 2.0 * self.diffusivity * (1 / g.dx**2 + 1 / g.dy**2)
        limit = 0.25 / (self.diffusivity * (1 / g.dx**2 + 1 / g.dy**2)) if self.diffusivity > 0 else math.inf
        return min(safety / rate if rate > 0 else math.inf, limit)

    def check_stability(self, dt: float) -> None:
        g = self.grid
        cfl = max(float(np.abs(self.u).max()) * dt / g.dx, float(np.abs(self.v).max()) * dt / g.dy)
        diff = self.diffusivity * dt * (1 / g.dx**2 + 1 / g.dy**2)
        convex = 1.0 - dt * self.max_outflow_rate() - 2.0 * diff
        if cfl >= 1.0 or diff > 0.25 or convex < 0.0:
            raise CFLViolationError(f"dt={dt:g}: CFL {cfl:.3f}, diffusion number {diff:.3f}, centre weight {convex:.3f}")


def flow_from_streamfunction(grid: Grid, psi: np.ndarray, diffusivity: float, solid: np.ndarray | None = None) -> FrozenFlow:
    """Face velocities from a node-centred stream function of shape (ny+1, nx+1).

    Differencing a single nodal stream function makes the discrete divergence
    vanish identically, up to rounding.
    """
    if psi.shape != (grid.ny + 1, grid.nx + 1):
        raise ValueError(f"stream function must have shape {(grid.ny + 1, grid.nx + 1)}")
    u = (psi[1:, :] - psi[:-1, :]) / grid.dy
    v = -(psi[:, 1:] - psi[:, :-1]) / grid.dx
    if solid is None:
        solid = np.zeros((grid.ny, grid.nx), dtype=bool)
    return FrozenFlow(grid, u, v, float(diffusivity), solid)


def make_frozen_flow(
    grid: Grid,
    obstacles: Sequence[tuple[float, float, float]] = (),
    velocity: float = 1.0,
    diffusivity: float = 0.0,
) -> FrozenFlow:
    """Uniform channel flow perturbed by cylinders ``(x, y, radius)``.

    Each cylinder adds the potential-flow doublet term, tapered to vanish at
    the channel walls so that the walls stay streamlines.  Cells whose
    centre lies inside a cylinder are solid: their corner nodes share one
    stream-function value, so all their faces carry zero velocity.
    """
    xn = np.arange(grid.nx + 1) * grid.dx
    yn = np.arange(grid.ny + 1) * grid.dy
    X, Y = np.meshgrid(xn, yn)
    taper = np.sin(np.pi * Y / grid.height)
    psi = velocity * Y
    xc, yc = grid.centers()
    solid = np.zeros((grid.ny, grid.nx), dtype=bool)
    for k, (ox, oy, r) in enumerate(obstacles):
        if r <= 0 or ox - r <= 0 or ox + r >= grid.length or oy - r <= 0 or oy + r >= grid.height:
            raise ConfigError(f"obstacle {k} ({ox}, {oy}, r={r}) is not strictly inside the domain")
        for (px, py, pr) in obstacles[:k]:
            if math.hypot(px - ox, py - oy) <= pr + r:
                raise ConfigError(f"obstacle {k} overlaps another obstacle")
        r2 = (X - ox) ** 2 + (Y - oy) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            doublet = np.where(r2 > 0, -velocity * (Y - oy) * r * r / r2, 0.0)
        psi = psi + doublet * taper
        solid |= (xc - ox) ** 2 + (yc - oy) ** 2 < r * r
    psi[0, :] = 0.0
    psi[-1, :] = velocity * grid.height
    # pin each solid cell's corners to one value per obstacle
    for k, (ox, oy, r) in enumerate(obstacles):
        mine = solid & ((xc - ox) ** 2 + (yc - oy) ** 2 < r * r)
        nodes = np.zeros(psi.shape, dtype=bool)
        nodes[:-1, :-1] |= mine
        nodes[1:, :-1] |= mine
        nodes[:-1, 1:] |= mine
        nodes[1:, 1:] |= mine
        if nodes.any():
            psi[nodes] = psi[nodes].mean()
    return flow_from_streamfunction(grid, psi, diffusivity, solid)


def step_concentration(c: np.ndarray, flow: FrozenFlow, dt: float, inflow: np.ndarray | None = None) -> np.ndarray:
    """One explicit step: upwind advective fluxes plus central diffusive fluxes.

    ``inflow`` gives the concentration carried in through each left-boundary
    face (zero when omitted).  The right boundary is zero-gradient, the
    walls and solid faces carry no flux.
    """
    g = flow.grid
    u, v, k = flow.u, flow.v, flow.diffusivity
    left = np.zeros(g.ny) if inflow is None else np.asarray(inflow, dtype=np.float64)

    fx = np.empty((g.ny, g.nx + 1))
    upwind = np.where(u[:, 1:-1] > 0, c[:, :-1], c[:, 1:])
    fx[:, 1:-1] = u[:, 1:-1] * upwind
    fx[:, 0] = u[:, 0] * np.where(u[:, 0] > 0, left, c[:, 0])
    fx[:, -1] = u[:, -1] * c[:, -1]

    fy = np.zeros((g.ny + 1, g.nx))
    fy[1:-1, :] = v[1:-1, :] * np.where(v[1:-1, :] > 0, c[:-1, :], c[1:, :])

    if k > 0:
        open_x = ~(flow.solid[:, :-1] | flow.solid[:, 1:])
        open_y = ~(flow.solid[:-1, :] | flow.solid[1:, :])
        fx[:, 1:-1] -= np.where(open_x, k * (c[:, 1:] - c[:, :-1]) / g.dx, 0.0)
        fy[1:-1, :] -= np.where(open_y, k * (c[1:, :] - c[:-1, :]) / g.dy, 0.0)

    return c - dt * ((fx[:, 1:] - fx[:, :-1]) / g.dx + (fy[1:, :] - fy[:-1, :]) / g.dy)


def inlet_profile(grid: Grid, params: ParameterSet, t: float) -> np.ndarray:
    """Concentration entering through each left-boundary face at time ``t``.

    The upper inlet is centred at 3/4 of the height and the lower one at 1/4;
    a width parameter ``w`` opens a segment of length ``w * height / 2``.
    """
    _, yc = grid.centers()
    y = yc[:, 0]
    h = grid.height
    out = np.zeros(grid.ny)
    for centre, conc, width, duration in (
        (0.75 * h, params.upper_concentration, params.upper_width, params.upper_duration),
        (0.25 * h, params.lower_concentration, params.lower_width, params.lower_duration),
    ):
        if t < duration:
            out[np.abs(y - centre) <= 0.25 * width * h] = conc
    return out


class _Sender(Protocol):
    def send(self, timestep: int, field_name: str, values: np.ndarray) -> None: ...


def substeps(flow: FrozenFlow, t_end: float, n_timesteps: int) -> tuple[int, float]:
    """Solver steps per output step and the solver ``dt`` they imply."""
    dt_out = t_end / n_timesteps
    k = max(1, math.ceil(dt_out / flow.stable_dt()))
    dt = dt_out / k
    flow.check_stability(dt)
    return k, dt


def run_simulation(
    params: ParameterSet,
    grid: Grid,
    flow: FrozenFlow,
    n_timesteps: int,
    session: _Sender,
    t_end: float = 0.2,
    *,
    field_name: str = FIELD_NAME,
    step_delay: float = 0.0,
    crash_at: int | None = None,
) -> np.ndarray:
    """Integrate to ``t_end`` and send the field after each of ``n_timesteps`` output steps.

    Returns the final concentration.  ``crash_at`` terminates the process
    abruptly right before sending that timestep (fault injection).
    """
    k, dt = substeps(flow, t_end, n_timesteps)
    c = np.zeros((grid.ny, grid.nx))
    step = 0
    for out in range(n_timesteps):
        for _ in range(k):
            c = step_concentration(c, flow, dt, inlet_profile(grid, params, step * dt))
            step += 1
        if crash_at is not None and out == crash_at:
            os._exit(70)
        session.send(out, field_name, c.ravel())
        if step_delay:
            time.sleep(step_delay)
    return c


def arrival_step(grid: Grid, flow: FrozenFlow, t_end: float, n_timesteps: int, cell: int) -> int:
    """First output step at which dye *can* be nonzero at ``cell``.

    An explicit update moves information at most one cell per solver step,
    so column ``x`` stays exactly zero for the first ``x`` solver steps;
    output ``j`` is taken after ``(j + 1) * k`` of them.
    """
    k, _ = substeps(flow, t_end, n_timesteps)
    x, _ = grid.coords(cell)
    return -(-(x + 1) // k) - 1


def advective_arrival(grid: Grid, flow: FrozenFlow, t_end: float, n_timesteps: int, cell: int) -> float:
    """Output step at which fluid from the inlet reaches ``cell`` along its row (cell-centre speeds)."""
    uc, _ = flow.cell_velocity()
    x, y = grid.coords(cell)
    speeds = uc[y, : x + 1]
    if (speeds <= 0).any():
        return math.inf
    travel = float(np.sum(grid.dx / speeds)) - 0.5 * grid.dx / speeds[-1]
    return travel / (t_end / n_timesteps)


def flow_for_config(cfg) -> tuple[Grid, FrozenFlow]:
    grid = Grid(cfg.nx, cfg.ny, cfg.length, cfg.height)
    return grid, make_frozen_flow(grid, cfg.obstacles, cfg.velocity, cfg.diffusivity)


def main(argv: list[str] | None = None) -> int:
    """Entry point of one ensemble member, as spawned by the launcher."""
    from .client import ClientSession
    from .config import StudyConfig

    ap = argparse.ArgumentParser(prog="intransit-sim")
    ap.add_argument("--config", required=True)
    ap.add_argument("--sim-id", type=int, required=True)
    ap.add_argument("--params", required=True, help="six comma-separated parameter values")
    ap.add_argument("--endpoints", required=True, help="comma-separated host:port list, one per server rank")
    ap.add_argument("--crash-at", type=int, default=None)
    args = ap.parse_args(argv)

    cfg = StudyConfig.load(args.config)
    params = ParameterSet.parse(args.params)
    grid, flow = flow_for_config(cfg)
    endpoints = [tuple(e.rsplit(":", 1)) for e in args.endpoints.split(",")]
    session = ClientSession.initialize(
        args.sim_id,
        cfg.study_id,
        {FIELD_NAME: (0, grid.n_cells)},
        [(h, int(p)) for h, p in endpoints],
    )
    run_simulation(
        params, grid, flow, cfg.n_timesteps, session, cfg.t_end, step_delay=cfg.step_delay, crash_at=args.crash_at
    )
    session.finalize()
    return 0


if __name__ == "__main__":
    sys.exit(main())
