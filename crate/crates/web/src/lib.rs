//! WebAssembly bindings for the static demo page in `www/`.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;
use swarmco::piece_strategy::{rarest_set, select_peer_balance, PieceMatrix, Scope};
use swarmco::{completion_time, solve, sweep, ModelParams};
use wasm_bindgen::prelude::*;

fn params(arrival_per_min: f64, capacity: f64, pieces: usize, interval: f64, slots: usize) -> ModelParams {
    ModelParams {
        arrival_rate: arrival_per_min / 60.0,
        upload_capacity: capacity,
        pieces,
        ..ModelParams::baseline()
    }
    .with_choking(interval, slots)
}

/// Solved model as JSON: `t0`, per-stage remaining time and queue sizes.
pub fn solve_json(
    arrival_per_min: f64,
    capacity: f64,
    pieces: usize,
    interval: f64,
    slots: usize,
) -> Result<String, String> {
    let p = params(arrival_per_min, capacity, pieces, interval, slots);
    let state = solve(&p).map_err(|e| e.to_string())?;
    let times = completion_time(&state).map_err(|e| e.to_string())?;
    Ok(json!({
        "t0": times.t0(),
        "t_remaining": times.t_remaining,
        "n_bar": state.profile.n_bar,
        "residual": state.residual,
        "iterations": state.iterations,
    })
    .to_string())
}

/// `T_0` for `k = 1..=max_slots`, with the minimizing `k`.
pub fn sweep_json(
    arrival_per_min: f64,
    capacity: f64,
    pieces: usize,
    interval: f64,
    max_slots: usize,
) -> Result<String, String> {
    let p = params(arrival_per_min, capacity, pieces, interval, 1);
    let ks: Vec<usize> = (1..=max_slots.max(1)).collect();
    let r = sweep(&p, &[interval], &ks).map_err(|e| e.to_string())?;
    let grid: Vec<_> = r
        .grid
        .iter()
        .map(|g| json!({"k": g.unchoke_slots, "t0": g.t0}))
        .collect();
    Ok(json!({"grid": grid, "best_k": r.best.unchoke_slots, "best_t0": r.best.t0}).to_string())
}

/// Parses rows of `0`/`1` (one row per piece, one column per peer).
fn parse_table(text: &str) -> Result<Vec<Vec<u8>>, String> {
    let rows: Vec<Vec<u8>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| match t {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    _ => Err(format!("row {}: expected 0 or 1, got `{t}`", i + 1)),
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err("rows must be nonempty and equally long".into());
    }
    Ok(rows)
}

/// Piece chosen by peer-balance rarest-first when peer `downloader`
/// fetches from peer `uploader` (both 1-based columns), plus the rarest
/// set. Pieces are reported 1-based.
pub fn select_json(table: &str, downloader: usize, uploader: usize) -> Result<String, String> {
    let rows = parse_table(table)?;
    let peers = rows[0].len();
    for p in [downloader, uploader] {
        if p == 0 || p > peers {
            return Err(format!("peer {p} outside 1..={peers}"));
        }
    }
    let m = PieceMatrix::from_table(&rows);
    let (d, u) = ((downloader - 1) as u32, (uploader - 1) as u32);
    let eligible: Vec<usize> = m.bits(u).difference(m.bits(d)).collect();
    let rarest = rarest_set(&m, d, &eligible, Scope::Coalition);
    let choice = select_peer_balance(&m, d, m.bits(u), &BTreeSet::new(), &BTreeMap::new());
    Ok(json!({
        "eligible": eligible.iter().map(|b| b + 1).collect::<Vec<_>>(),
        "rarest": rarest.iter().map(|b| b + 1).collect::<Vec<_>>(),
        "choice": choice.map(|b| b + 1),
        "replication": m.replication(),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn solve_model(
    arrival_per_min: f64,
    capacity: f64,
    pieces: usize,
    interval: f64,
    slots: usize,
) -> Result<String, JsValue> {
    solve_json(arrival_per_min, capacity, pieces, interval, slots).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn sweep_slots(
    arrival_per_min: f64,
    capacity: f64,
    pieces: usize,
    interval: f64,
    max_slots: usize,
) -> Result<String, JsValue> {
    sweep_json(arrival_per_min, capacity, pieces, interval, max_slots).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn select_piece(table: &str, downloader: usize, uploader: usize) -> Result<String, JsValue> {
    select_json(table, downloader, uploader).map_err(|e| JsValue::from_str(&e))
}
