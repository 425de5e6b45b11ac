//! MovingAI benchmark map (`.map`) and scenario (`.scen`) files.
//!
//! Maps use the usual header (`type`, `height`, `width`, `map`) followed by
//! one text row per grid row; `.`, `G` and `S` are passable, every other
//! character is an obstacle. Scenarios are `version 1` followed by
//! tab-separated rows `bucket map width height sx sy gx gy optimal`.

use std::path::Path;

use rmha_core::{Cell, GridMap};

use crate::error::{read_to_string, write_file, BenchError, Result};

pub fn parse_map(text: &str, origin: &str) -> Result<GridMap> {
    let mut lines = text.lines();
    let mut width = None;
    let mut height = None;
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "map" {
            break;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("type"), _) | (None, _) => {}
            (Some("height"), Some(v)) => height = v.parse::<usize>().ok(),
            (Some("width"), Some(v)) => width = v.parse::<usize>().ok(),
            _ => return Err(BenchError::format(origin, format!("unexpected header line {line:?}"))),
        }
    }
    let (Some(width), Some(height)) = (width, height) else {
        return Err(BenchError::format(origin, "missing width or height"));
    };
    let rows: Vec<&str> = lines.map(str::trim_end).filter(|l| !l.is_empty()).collect();
    if rows.len() != height {
        return Err(BenchError::format(origin, format!("expected {height} rows, found {}", rows.len())));
    }
    let mut occupancy = Vec::with_capacity(width * height);
    for (y, row) in rows.iter().enumerate() {
        if row.chars().count() != width {
            return Err(BenchError::format(origin, format!("row {y} does not have {width} cells")));
        }
        occupancy.extend(row.chars().map(|c| !matches!(c, '.' | 'G' | 'S')));
    }
    Ok(GridMap::new(width, height, occupancy, 0)?)
}

pub fn format_map(map: &GridMap) -> String {
    let mut out = format!("type octile\nheight {}\nwidth {}\nmap\n", map.height(), map.width());
    for y in 0..map.height() {
        for x in 0..map.width() {
            out.push(if map.is_free(Cell::new(x as i32, y as i32)) { '.' } else { '@' });
        }
        out.push('\n');
    }
    out
}

pub fn read_map(path: &Path) -> Result<GridMap> {
    parse_map(&read_to_string(path)?, &path.display().to_string())
}

pub fn write_map(path: &Path, map: &GridMap) -> Result<()> {
    write_file(path, format_map(map))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioEntry {
    pub bucket: usize,
    pub map: String,
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    /// Shortest-path length on the static map.
    pub optimal: f64,
}

pub fn parse_scenario(text: &str, origin: &str) -> Result<Vec<ScenarioEntry>> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some(v) if v.starts_with("version") => {}
        _ => return Err(BenchError::format(origin, "missing version line")),
    }
    let body: String = lines.filter(|l| !l.trim().is_empty()).map(|l| format!("{l}\n")).collect();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(false)
        .from_reader(body.as_bytes());
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 9 {
            return Err(BenchError::format(origin, format!("row {row} has {} fields, expected 9", record.len())));
        }
        let num = |i: usize| -> Result<i64> {
            record[i]
                .trim()
                .parse()
                .map_err(|_| BenchError::format(origin, format!("row {row}: field {i} is not an integer")))
        };
        out.push(ScenarioEntry {
            bucket: num(0)? as usize,
            map: record[1].to_string(),
            width: num(2)? as usize,
            height: num(3)? as usize,
            start: Cell::new(num(4)? as i32, num(5)? as i32),
            goal: Cell::new(num(6)? as i32, num(7)? as i32),
            optimal: record[8]
                .trim()
                .parse()
                .map_err(|_| BenchError::format(origin, format!("row {row}: optimal length is not a number")))?,
        });
    }
    Ok(out)
}

pub fn format_scenario(entries: &[ScenarioEntry]) -> String {
    let mut out = String::from("version 1\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.bucket, e.map, e.width, e.height, e.start.x, e.start.y, e.goal.x, e.goal.y, e.optimal
        ));
    }
    out
}

pub fn read_scenario(path: &Path) -> Result<Vec<ScenarioEntry>> {
    parse_scenario(&read_to_string(path)?, &path.display().to_string())
}

/// Scenario rows for `tasks` on `map`, with BFS optimal lengths.
pub fn scenario_for(map: &GridMap, map_name: &str, tasks: &[(Cell, Cell)]) -> Vec<ScenarioEntry> {
    tasks
        .iter()
        .map(|&(start, goal)| {
            let d = map.bfs(goal)[map.index(start)];
            ScenarioEntry {
                bucket: (d / 4) as usize,
                map: map_name.to_string(),
                width: map.width(),
                height: map.height(),
                start,
                goal,
                optimal: d as f64,
            }
        })
        .collect()
}

pub fn tasks(entries: &[ScenarioEntry]) -> Vec<(Cell, Cell)> {
    entries.iter().map(|e| (e.start, e.goal)).collect()
}
