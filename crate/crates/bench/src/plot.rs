//! Trajectory overlays (SVG and text) and step-by-step storyboards.

use std::fmt::Write as _;

use rmha_core::{Cell, GridMap};

use crate::error::Result;
use crate::trace::{cell, Trace};

const CELL_PX: usize = 24;

fn agent_color(i: usize, n: usize) -> String {
    format!("hsl({},70%,45%)", (i * 360) / n.max(1))
}

fn agent_glyph(i: usize) -> char {
    const GLYPHS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    GLYPHS.get(i).map_or('#', |&b| b as char)
}

/// Per-agent position sequence with consecutive repeats (waits) removed.
pub fn polylines(trace: &Trace) -> Vec<Vec<Cell>> {
    (0..trace.agents())
        .map(|i| {
            let mut line = vec![cell(trace.header.starts[i])];
            for s in &trace.steps {
                let c = cell(s.positions[i]);
                if line.last() != Some(&c) {
                    line.push(c);
                }
            }
            line
        })
        .collect()
}

/// SVG overlay of every agent's path over the map. Agents that never move
/// get markers but no polyline, so a trace without steps draws no lines.
pub fn svg(trace: &Trace) -> Result<String> {
    let map = trace.map()?;
    let (w, h) = (map.width() * CELL_PX, map.height() * CELL_PX);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    for y in 0..map.height() {
        for x in 0..map.width() {
            if !map.is_free(Cell::new(x as i32, y as i32)) {
                let _ = writeln!(
                    out,
                    r##"<rect x="{}" y="{}" width="{CELL_PX}" height="{CELL_PX}" fill="#333333"/>"##,
                    x * CELL_PX,
                    y * CELL_PX
                );
            }
        }
    }
    let center = |c: Cell| (c.x as usize * CELL_PX + CELL_PX / 2, c.y as usize * CELL_PX + CELL_PX / 2);
    let n = trace.agents();
    for (i, line) in polylines(trace).iter().enumerate() {
        let color = agent_color(i, n);
        if line.len() > 1 {
            let points: Vec<String> = line.iter().map(|&c| center(c)).map(|(x, y)| format!("{x},{y}")).collect();
            let _ = writeln!(
                out,
                r#"<polyline class="agent-{i}" points="{}" fill="none" stroke="{color}" stroke-width="3"/>"#,
                points.join(" ")
            );
        }
        let (sx, sy) = center(line[0]);
        let _ = writeln!(out, r#"<circle cx="{sx}" cy="{sy}" r="{}" fill="{color}"/>"#, CELL_PX / 4);
        let (gx, gy) = center(cell(trace.header.goals[i]));
        let q = CELL_PX / 3;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            gx - q,
            gy - q,
            2 * q,
            2 * q
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn blank(map: &GridMap) -> Vec<Vec<char>> {
    (0..map.height())
        .map(|y| {
            (0..map.width())
                .map(|x| if map.is_free(Cell::new(x as i32, y as i32)) { '.' } else { '@' })
                .collect()
        })
        .collect()
}

fn render(grid: &[Vec<char>]) -> String {
    grid.iter().map(|row| row.iter().collect::<String>() + "\n").collect()
}

/// Text overlay: visited cells carry the agent's lowercase letter, final
/// positions the uppercase one, unreached goals `*`.
pub fn text(trace: &Trace) -> Result<String> {
    let map = trace.map()?;
    let mut grid = blank(&map);
    for (i, line) in polylines(trace).iter().enumerate() {
        for c in line {
            grid[c.y as usize][c.x as usize] = agent_glyph(i).to_ascii_lowercase();
        }
    }
    let last = trace.positions_at(trace.steps.len());
    for g in &trace.header.goals {
        let c = cell(*g);
        if !last.contains(&c) {
            grid[c.y as usize][c.x as usize] = '*';
        }
    }
    for (i, c) in last.iter().enumerate() {
        grid[c.y as usize][c.x as usize] = agent_glyph(i);
    }
    let mut out = format!("{} agents, {} steps\n", trace.agents(), trace.steps.len());
    out.push_str(&render(&grid));
    Ok(out)
}

/// Steps at which some agent moved farther from its goal (by static BFS
/// distance), i.e. stepped aside for someone else.
pub fn yield_steps(trace: &Trace) -> Result<Vec<usize>> {
    let map = trace.map()?;
    let dist: Vec<Vec<u32>> = trace.header.goals.iter().map(|&g| map.bfs(cell(g))).collect();
    let mut out = Vec::new();
    for t in 0..trace.steps.len() {
        let before = trace.positions_at(t);
        let after = trace.positions_at(t + 1);
        let yielded = (0..trace.agents()).any(|i| dist[i][map.index(after[i])] > dist[i][map.index(before[i])]);
        if yielded {
            out.push(t);
        }
    }
    Ok(out)
}

/// One text frame per time step, with yields marked.
pub fn storyboard(trace: &Trace) -> Result<String> {
    let map = trace.map()?;
    let yields = yield_steps(trace)?;
    let mut out = String::new();
    for t in 0..=trace.steps.len() {
        let mut grid = blank(&map);
        for g in &trace.header.goals {
            let c = cell(*g);
            grid[c.y as usize][c.x as usize] = '*';
        }
        for (i, c) in trace.positions_at(t).iter().enumerate() {
            grid[c.y as usize][c.x as usize] = agent_glyph(i);
        }
        let note = if t > 0 && yields.contains(&(t - 1)) { "  (yield)" } else { "" };
        let _ = writeln!(out, "T{t}{note}");
        out.push_str(&render(&grid));
        out.push('\n');
    }
    Ok(out)
}
