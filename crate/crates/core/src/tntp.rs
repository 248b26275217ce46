//! Parsers for the TNTP network / trips / node-coordinate file family.
//!
//! Net rows are `init_node term_node capacity length free_flow_time b power
//! speed toll link_type ;`, trips files are `Origin N` blocks with
//! `dest : demand ;` entries. Comment lines start with `~` or `<` metadata
//! tags; repeated whitespace is insignificant.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::net::{Link, NetError, Node, OdMatrix, RoadNetwork};

pub const DEFAULT_BPR_ALPHA: f64 = 0.15;
pub const DEFAULT_BPR_BETA: f64 = 4.0;

#[derive(Debug, Error)]
pub enum TntpError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("header declares {declared} {what} but file contains {found}")]
    CountMismatch { what: &'static str, declared: usize, found: usize },
    #[error("trips reference unknown node {0}")]
    UnknownNode(usize),
    #[error("parsed demand {parsed} disagrees with declared total {declared}")]
    TotalMismatch { parsed: f64, declared: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
}

fn metadata_value(line: &str) -> Option<(String, String)> {
    let close = line.find('>')?;
    let key = line[1..close].trim().to_ascii_uppercase();
    let value = line[close + 1..].trim().to_string();
    Some((key, value))
}

/// Parses a TNTP net file plus a node coordinate file into a `RoadNetwork`.
/// Node ids are remapped to 0-based indices in id order.
pub fn parse_network(net_text: &str, coord_text: &str) -> Result<RoadNetwork, TntpError> {
    let mut declared_nodes: Option<usize> = None;
    let mut declared_links: Option<usize> = None;
    let mut rows: Vec<(usize, RawLink)> = Vec::new();

    for (lineno, raw) in net_text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('~') {
            continue;
        }
        if line.starts_with('<') {
            if let Some((key, value)) = metadata_value(line) {
                match key.as_str() {
                    "NUMBER OF NODES" => declared_nodes = value.parse().ok(),
                    "NUMBER OF LINKS" => declared_links = value.parse().ok(),
                    _ => {}
                }
            }
            continue;
        }
        let body = line.trim_end_matches(';').trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() < 5 {
            return Err(TntpError::Malformed {
                line: lineno + 1,
                reason: format!("expected at least 5 columns, found {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64, TntpError> {
            fields[i].parse().map_err(|_| TntpError::Malformed {
                line: lineno + 1,
                reason: format!("column {} is not a number: {:?}", i + 1, fields[i]),
            })
        };
        let tail = num(0)? as usize;
        let head = num(1)? as usize;
        let capacity = num(2)?;
        let free_flow_time = num(4)?;
        let bpr_alpha = if fields.len() > 5 { num(5)? } else { DEFAULT_BPR_ALPHA };
        let bpr_beta = if fields.len() > 6 { num(6)? } else { DEFAULT_BPR_BETA };
        // some files carry 0 in the b/power columns; fall back to defaults
        let bpr_alpha = if bpr_alpha > 0.0 { bpr_alpha } else { DEFAULT_BPR_ALPHA };
        let bpr_beta = if bpr_beta > 0.0 { bpr_beta } else { DEFAULT_BPR_BETA };
        rows.push((lineno + 1, RawLink { tail, head, capacity, free_flow_time, bpr_alpha, bpr_beta }));
    }

    if let Some(n) = declared_links {
        if n != rows.len() {
            return Err(TntpError::CountMismatch { what: "links", declared: n, found: rows.len() });
        }
    }
    if rows.is_empty() {
        return Err(TntpError::CountMismatch { what: "links", declared: declared_links.unwrap_or(0), found: 0 });
    }

    let coords = parse_coords(coord_text)?;
    let mut ids: Vec<usize> = rows.iter().flat_map(|(_, l)| [l.tail, l.head]).collect();
    ids.extend(coords.keys().copied());
    ids.sort_unstable();
    ids.dedup();
    if let Some(n) = declared_nodes {
        if n != ids.len() {
            return Err(TntpError::CountMismatch { what: "nodes", declared: n, found: ids.len() });
        }
    }
    let index: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let nodes = ids
        .iter()
        .map(|&id| {
            let (x, y) = coords.get(&id).copied().unwrap_or((0.0, 0.0));
            Node { id, x, y }
        })
        .collect();
    let links = rows
        .into_iter()
        .map(|(_, l)| Link {
            tail: index[&l.tail],
            head: index[&l.head],
            free_flow_time: l.free_flow_time,
            capacity: l.capacity,
            bpr_alpha: l.bpr_alpha,
            bpr_beta: l.bpr_beta,
        })
        .collect();
    Ok(RoadNetwork::new(nodes, links)?)
}

struct RawLink {
    tail: usize,
    head: usize,
    capacity: f64,
    free_flow_time: f64,
    bpr_alpha: f64,
    bpr_beta: f64,
}

/// Parses a node coordinate file: `node x y [;]` per row.
pub fn parse_coords(text: &str) -> Result<BTreeMap<usize, (f64, f64)>, TntpError> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim().trim_end_matches(';').trim();
        if line.is_empty() || line.starts_with('~') || line.starts_with('<') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0].parse::<usize>().is_err() {
            // header row such as "Node X Y"
            continue;
        }
        if fields.len() < 3 {
            return Err(TntpError::Malformed {
                line: lineno + 1,
                reason: "expected `node x y`".into(),
            });
        }
        let id: usize = fields[0].parse().unwrap();
        let x: f64 = fields[1].parse().map_err(|_| TntpError::Malformed {
            line: lineno + 1,
            reason: "bad x coordinate".into(),
        })?;
        let y: f64 = fields[2].parse().map_err(|_| TntpError::Malformed {
            line: lineno + 1,
            reason: "bad y coordinate".into(),
        })?;
        out.insert(id, (x, y));
    }
    Ok(out)
}

/// Parses a TNTP trips file into a single-class OD matrix keyed by external
/// node ids. The caller remaps ids onto a parsed network with
/// [`remap_trips`].
pub fn parse_trips(text: &str) -> Result<BTreeMap<(usize, usize), f64>, TntpError> {
    let mut declared_total: Option<f64> = None;
    let mut origin: Option<usize> = None;
    let mut out: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    // includes intra-zonal entries, which are dropped from the matrix itself
    let mut parsed_total = 0.0;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('~') {
            continue;
        }
        if line.starts_with('<') {
            if let Some((key, value)) = metadata_value(line) {
                if key == "TOTAL OD FLOW" {
                    declared_total = value.parse().ok();
                }
            }
            continue;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("origin") {
            origin = Some(rest.trim().parse().map_err(|_| TntpError::Malformed {
                line: lineno + 1,
                reason: "bad origin id".into(),
            })?);
            continue;
        }
        let o = origin.ok_or(TntpError::Malformed {
            line: lineno + 1,
            reason: "demand entry before any Origin header".into(),
        })?;
        for entry in line.split(';') {
            let entry = entry.trim();
            if entry.is_empty() {
                continue;
            }
            let (dest_s, dem_s) = entry.split_once(':').ok_or(TntpError::Malformed {
                line: lineno + 1,
                reason: format!("expected `dest : demand`, found {entry:?}"),
            })?;
            let dest: usize = dest_s.trim().parse().map_err(|_| TntpError::Malformed {
                line: lineno + 1,
                reason: "bad destination id".into(),
            })?;
            let demand: f64 = dem_s.trim().parse().map_err(|_| TntpError::Malformed {
                line: lineno + 1,
                reason: "bad demand value".into(),
            })?;
            if demand < 0.0 {
                return Err(TntpError::Malformed { line: lineno + 1, reason: "negative demand".into() });
            }
            parsed_total += demand;
            if demand > 0.0 && dest != o {
                *out.entry((o, dest)).or_insert(0.0) += demand;
            }
        }
    }

    if let Some(declared) = declared_total {
        if declared > 0.0 && ((parsed_total - declared) / declared).abs() > 1e-6 {
            return Err(TntpError::TotalMismatch { parsed: parsed_total, declared });
        }
    }
    Ok(out)
}

/// Remaps a trips table keyed by external node ids onto the network's
/// 0-based node indices as a single-class `OdMatrix`.
pub fn remap_trips(
    net: &RoadNetwork,
    trips: &BTreeMap<(usize, usize), f64>,
) -> Result<OdMatrix, TntpError> {
    let index: BTreeMap<usize, usize> =
        net.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let mut od = OdMatrix::new(1);
    for (&(o, d), &v) in trips {
        let oi = *index.get(&o).ok_or(TntpError::UnknownNode(o))?;
        let di = *index.get(&d).ok_or(TntpError::UnknownNode(d))?;
        od.set(0, oi, di, v);
    }
    Ok(od)
}

/// Splits a single-class OD matrix into per-class matrices by demand share.
pub fn split_od_by_share(od: &OdMatrix, shares: &[f64]) -> OdMatrix {
    assert_eq!(od.num_classes(), 1);
    let mut out = OdMatrix::new(shares.len());
    for (c, &share) in shares.iter().enumerate() {
        for (&(r, s), &d) in &od.demands[0] {
            let v = d * share;
            if v > 0.0 {
                out.set(c, r, s, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SF_NET: &str = include_str!("../data/siouxfalls_net.tntp");
    const SF_NODE: &str = include_str!("../data/siouxfalls_node.tntp");
    const SF_TRIPS: &str = include_str!("../data/siouxfalls_trips.tntp");
    const EMA_NET: &str = include_str!("../data/ema_net.tntp");
    const EMA_NODE: &str = include_str!("../data/ema_node.tntp");
    const ANA_TRIPS: &str = include_str!("../data/anaheim_trips.tntp");

    #[test]
    fn sioux_falls_counts() {
        let net = parse_network(SF_NET, SF_NODE).unwrap();
        assert_eq!(net.num_nodes(), 24);
        assert_eq!(net.num_links(), 76);
        assert_eq!(net.links[0].bpr_alpha, 0.15);
        assert_eq!(net.links[0].bpr_beta, 4.0);
    }

    #[test]
    fn ema_counts() {
        let net = parse_network(EMA_NET, EMA_NODE).unwrap();
        assert_eq!(net.num_nodes(), 74);
        assert_eq!(net.num_links(), 258);
    }

    #[test]
    fn sioux_falls_aggregate_demand() {
        let trips = parse_trips(SF_TRIPS).unwrap();
        let total: f64 = trips.values().sum();
        assert!((total - 316_290.0).abs() / 316_290.0 < 1e-6, "total = {total}");
    }

    #[test]
    fn anaheim_aggregate_demand() {
        let trips = parse_trips(ANA_TRIPS).unwrap();
        let total: f64 = trips.values().sum();
        assert!((total - 311_270.0).abs() / 311_270.0 < 1e-6, "total = {total}");
    }

    #[test]
    fn single_entry_trips() {
        let trips = parse_trips("Origin 1\n  2 :    5.0;\n").unwrap();
        assert_eq!(trips.len(), 1);
        assert_eq!(trips[&(1, 2)], 5.0);
    }

    #[test]
    fn empty_body_rejected() {
        let err = parse_network("<NUMBER OF LINKS> 0\n<END OF METADATA>\n", "").unwrap_err();
        assert!(matches!(err, TntpError::CountMismatch { .. }));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "<NUMBER OF LINKS> 1\n<END OF METADATA>\n1 2 bogus 1 1 0.15 4 0 0 1 ;\n";
        match parse_network(text, "") {
            Err(TntpError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_detected() {
        let text = "<NUMBER OF LINKS> 2\n<END OF METADATA>\n1 2 100 1 1 0.15 4 0 0 1 ;\n";
        assert!(matches!(
            parse_network(text, ""),
            Err(TntpError::CountMismatch { what: "links", declared: 2, found: 1 })
        ));
    }

    #[test]
    fn comments_and_whitespace_tolerated() {
        let a = "~ comment\n1 2 100 1 1 ;\n2 1 100 1 1 ;\n";
        let b = "1   2\t100  1   1 ;\n~ comment\n\n2 1 100 1 1 ;\n";
        let na = parse_network(a, "").unwrap();
        let nb = parse_network(b, "").unwrap();
        assert_eq!(na, nb);
    }

    #[test]
    fn trips_total_mismatch_rejected() {
        let text = "<TOTAL OD FLOW> 100.0\nOrigin 1\n 2 : 5.0;\n";
        assert!(matches!(parse_trips(text), Err(TntpError::TotalMismatch { .. })));
    }

    #[test]
    fn remap_rejects_unknown_node() {
        let net = parse_network("1 2 100 1 1 ;\n2 1 100 1 1 ;\n", "").unwrap();
        let mut trips = BTreeMap::new();
        trips.insert((1, 9), 5.0);
        assert!(matches!(remap_trips(&net, &trips), Err(TntpError::UnknownNode(9))));
    }

    #[test]
    fn od_share_split() {
        let net = parse_network("1 2 100 1 1 ;\n2 1 100 1 1 ;\n", "").unwrap();
        let mut trips = BTreeMap::new();
        trips.insert((1, 2), 10.0);
        let od = remap_trips(&net, &trips).unwrap();
        let split = split_od_by_share(&od, &[0.8, 0.2]);
        assert_eq!(split.demand(0, 0, 1), 8.0);
        assert_eq!(split.demand(1, 0, 1), 2.0);
    }
}
